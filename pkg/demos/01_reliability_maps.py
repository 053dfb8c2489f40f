# %% [markdown]
# Where does an untrained network think its descriptors are reliable?
#
# For one synthetic image we warp a copy, compare the two dense descriptor
# maps and look at the two quantities that drive keypoint selection:
# how far a pixel's descriptor moves under the warp (smaller is better) and
# how close its nearest look-alike in a small window is (larger is better).
# Their ratio, averaged over a few warps, is the reliability map.

# %%
import os

import numpy as np

from evofeat import detect, io, model, reliability
from evofeat.synthetic import synthetic_image

out = os.path.join(os.path.dirname(__file__), "out", "maps")
os.makedirs(out, exist_ok=True)
rng = np.random.default_rng(0)
img = synthetic_image(rng, (160, 240))
net = model.init_params(0)
io.write_image(os.path.join(out, "image.png"), img)

# %%
cfg = reliability.ReliabilityConfig(m=3)
ratio, rounds = reliability.averaged_ratio_map(net, img, cfg, rng, return_rounds=True)
first = rounds[0]
print("pixels covered by every warp:", int((ratio.coverage == cfg.m).sum()), "of", ratio.coverage.size)
print("median descriptor drift  %.3f" % np.nanmedian(np.where(first.valid, first.d_rep_fine, np.nan)))
print("median nearest look-alike %.3f" % np.nanmedian(np.where(first.valid, first.d_dis_fine, np.nan)))

# %%
for name, values in {"d_rep": first.d_rep_fine, "d_dis": first.d_dis_fine, "reliability": ratio.ratio}.items():
    io.write_heatmap(os.path.join(out, f"{name}.png"), np.nan_to_num(values))

# the detector's training targets are the top of that map after NMS
kps = reliability.compute_reliable_keypoints(net, img, cfg, rng)
print(len(kps), "reliable keypoints; first five (row, col):", kps.points[:5].tolist())

# %%
# compare with what the (untrained) detector head currently prefers
prob = detect.keypoint_probability(net, img)
io.write_heatmap(os.path.join(out, "probability.png"), prob)
print("maps written to", out)
