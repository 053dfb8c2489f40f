# %% [markdown]
# Homography accuracy on HPatches-style sequences.
#
# Pass a checkpoint and an HPatches directory to evaluate a trained model:
#
#     python demos/03_homography_accuracy.py run/final.ckpt /data/hpatches
#
# Without arguments the script builds a few synthetic sequences with known
# homographies and evaluates a freshly initialised network, which is useful
# to see the report format and the effect of the error threshold.

# %%
import os
import sys

import numpy as np

from evofeat import match_eval as me
from evofeat import model
from evofeat.synthetic import synthetic_sequence

if len(sys.argv) > 2:
    net = model.load_checkpoint(sys.argv[1])
    sequences = me.load_hpatches(sys.argv[2], max_side=480)
else:
    net = model.init_params(0)
    rng = np.random.default_rng(3)
    sequences = [synthetic_sequence(rng, f"{'iv'[k % 2]}_synth{k}", (160, 240), 3) for k in range(4)]
print(len(sequences), "sequences,", sum(len(s.homographies) for s in sequences), "pairs")

# %%
report = me.evaluate_sequences(net, sequences, me.EvalConfig(top_k=500))
acc = report.accuracy()
print("eps  " + "  ".join(f"{e:>4d}" for e in acc))
print("HA   " + "  ".join(f"{v:4.2f}" for v in acc.values()))
print("average over thresholds: %.3f" % report.average())

# %%
# the corner error of each pair: a failed estimate shows as None
for row in report.rows[:8]:
    print(row)

out = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(out, exist_ok=True)
report.write(os.path.join(out, "ha.jsonl"))
report.plot(os.path.join(out, "ha.png"))
