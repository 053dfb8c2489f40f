# %% [markdown]
# A short self-evolving training run on synthetic images.
#
# Each iteration alternates two phases: the descriptor is trained on the
# keypoints the current detector finds, then the detector is trained on the
# keypoints the current descriptor rates as reliable.  This run is tiny
# (a handful of images, a couple of epochs) so it finishes in a few minutes
# on a laptop CPU; the curves show the mechanics, not a converged model.

# %%
import os
import sys

import numpy as np
import torch

from evofeat import evolve
from evofeat.evolve import EvolveConfig
from evofeat.synthetic import synthetic_dataset

torch.set_num_threads(max(1, os.cpu_count() or 1))
n_images = int(sys.argv[1]) if len(sys.argv) > 1 else 8
out = os.path.join(os.path.dirname(__file__), "out", "train")
images = synthetic_dataset(n_images, seed=0, shape=(128, 192))
cfg = EvolveConfig.from_flat({"iterations": 2, "epochs_per_phase": 2, "initial_keypoints": 300,
                              "reliability.m": 2, "detect_warps": 4})
print("config hash", cfg.config_hash())

# %%
net, report = evolve.run_self_evolve(cfg, images, out_dir=out)
for e in report.epochs:
    key = "L1" if e["phase"] == "descriptor" else "L2_sched"
    print(f"iter {e['iteration']} {e['phase']:10s} epoch {e['epoch']}  loss {e[key]:.4f}  lr {e['lr']:.0e}")

# %%
# how many keypoints each cache held, per iteration
for c in report.caches:
    counts = [len(v) for v in c["points"].values()]
    print(f"iteration {c['iteration']} cache {c['kind']}: {np.mean(counts):.0f} keypoints per image")

# %%
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

fig, ax = plt.subplots(1, 2, figsize=(9, 3))
ax[0].plot(report.running_mean("descriptor", "L_des", window=n_images))
ax[0].set_title("descriptor phase: L_des (trailing mean)")
ax[1].plot(report.running_mean("detector", "L_det", window=n_images))
ax[1].set_title("detector phase: focal loss (trailing mean)")
for a in ax:
    a.set_xlabel("step")
fig.tight_layout()
fig.savefig(os.path.join(out, "curves.png"), dpi=100)
print("checkpoints:", report.checkpoints)
