"""Self-evolving keypoint detection and description.

Modules:

- ``geometry``: affine transforms, colour jitter, masked warping
- ``model``: shared-backbone detector/descriptor network and checkpoints
- ``detect``: NMS, affine-adapted detection, random bootstrap keypoints
- ``describe_train``: descriptor phase losses and update step
- ``reliability``: repeatability/distinctness ratio maps, reliable keypoints
- ``detect_train``: detector phase losses and update step
- ``evolve``: the four-step training loop, LR schedule, checkpoints
- ``match_eval``: matching, RANSAC homography, HA metric, diagnostics
"""
from .detect import KeypointSet, NMSConfig, nms
from .geometry import AffineTransform, AugmentConfig, ColorJitter
from .model import ArchConfig, Network, forward, init_params, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "AffineTransform", "ArchConfig", "AugmentConfig", "ColorJitter", "KeypointSet",
    "NMSConfig", "Network", "forward", "init_params", "load_checkpoint",
    "nms", "save_checkpoint",
]
