"""Keypoint extraction: greedy NMS, affine-adapted detection and the random
bootstrap used before the detector has been trained."""
from __future__ import annotations

import contextlib
import json
from dataclasses import dataclass

import numpy as np
import torch

from . import geometry
from .model import Network, forward

KEYPOINT_SCHEMA_VERSION = 1


@dataclass
class KeypointSet:
    """``points`` are integer ``(row, col)``; ``scores`` sorted descending
    when produced by :func:`nms`."""

    points: np.ndarray
    scores: np.ndarray
    descriptors: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.int64).reshape(-1, 2)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if len(self.points) != len(self.scores):
            raise ValueError("points and scores differ in length")

    def __len__(self):
        return len(self.points)

    def xy(self) -> np.ndarray:
        return self.points[:, ::-1].astype(np.float64)

    def top(self, k: int) -> "KeypointSet":
        d = None if self.descriptors is None else self.descriptors[:k]
        return KeypointSet(self.points[:k], self.scores[:k], d)

    @classmethod
    def empty(cls) -> "KeypointSet":
        return cls(np.zeros((0, 2), np.int64), np.zeros(0))


@dataclass(frozen=True)
class NMSConfig:
    radius: int = 4
    max_n: int = 1000
    min_score: float = 0.0


TRAIN_NMS = NMSConfig(4, 1000, 0.0)
EVAL_NMS = NMSConfig(4, 500, 0.015)


def nms(score: np.ndarray, radius: int = 4, max_n: int = 1000, min_score: float = 0.0) -> KeypointSet:
    """Greedy square-window suppression.

    Candidates are pixels with a positive score ``>= min_score``, visited by
    descending score with ``(row, col)`` tie-break.  A candidate is kept iff
    no kept point lies within Chebyshev distance ``radius``.
    """
    if radius < 1:
        raise ValueError("radius must be >= 1")
    score = np.asarray(score, dtype=np.float64)
    h, w = score.shape
    flat = score.ravel()
    cand = np.flatnonzero((flat > 0) & (flat >= min_score))
    # lexsort: last key is primary; flat index order == (row, col) order
    order = cand[np.lexsort((cand, -flat[cand]))]
    blocked = np.zeros((h, w), dtype=bool)
    keep = []
    for idx in order:
        if len(keep) >= max_n:
            break
        r, c = divmod(int(idx), w)
        if blocked[r, c]:
            continue
        keep.append(idx)
        blocked[max(r - radius, 0):r + radius + 1, max(c - radius, 0):c + radius + 1] = True
    keep = np.asarray(keep, dtype=np.int64)
    pts = np.stack(np.divmod(keep, w), axis=1) if len(keep) else np.zeros((0, 2), np.int64)
    return KeypointSet(pts, flat[keep] if len(keep) else np.zeros(0))


@contextlib.contextmanager
def inference(net: Network):
    was = net.training
    net.eval()
    try:
        with torch.no_grad():
            yield net
    finally:
        net.train(was)


def keypoint_probability(net: Network, img: np.ndarray) -> np.ndarray:
    """Channel 1 of the probability map as an (H, W) numpy array."""
    with inference(net):
        prob, _ = forward(net, geometry.to_luminance(img))
    return prob[0, 1].double().numpy()


def detect(net: Network, img: np.ndarray, nms_cfg: NMSConfig = EVAL_NMS,
           with_descriptors: bool = False) -> KeypointSet:
    with inference(net):
        prob, desc = forward(net, geometry.to_luminance(img))
    kps = nms(prob[0, 1].double().numpy(), nms_cfg.radius, nms_cfg.max_n, nms_cfg.min_score)
    if with_descriptors:
        d = desc[0].double().numpy()
        kps.descriptors = d[:, kps.points[:, 0], kps.points[:, 1]].T.copy()
    return kps


def back_warp(values: np.ndarray, warp_mask: np.ndarray, a: geometry.AffineTransform):
    """Pull a map defined on the warped frame back to the reference frame.

    Reference pixel ``p`` samples ``values`` at ``a(p)``; it is covered only if
    every bilinear tap with non-zero weight lies on a valid warped pixel.
    """
    shape = warp_mask.shape
    xs, ys = geometry.pixel_grid(shape)
    m = a.matrix
    sx = m[0, 0] * xs + m[0, 1] * ys + m[0, 2]
    sy = m[1, 0] * xs + m[1, 1] * ys + m[1, 2]
    vals, inside = geometry.bilinear_sample(values, sx, sy)
    cov, _ = geometry.bilinear_sample(warp_mask.astype(np.float64), sx, sy)
    covered = inside & (cov >= 1.0 - 1e-9)
    return vals, covered


def affine_adapted_probability(net: Network, img: np.ndarray, m: int,
                               rng: np.random.Generator,
                               cfg: geometry.AugmentConfig,
                               return_parts: bool = False):
    """Mean keypoint probability over the plain image and ``m - 1`` jittered,
    warped copies mapped back to the reference frame.

    Each pixel is divided by the number of maps that cover it; the plain
    forward always covers, so the count is at least 1.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    base = keypoint_probability(net, img)
    acc = base.copy()
    count = np.ones_like(base)
    parts = [(base, np.ones(base.shape, bool))]
    for _ in range(m - 1):
        warped, a = geometry.augment(rng, img, cfg)
        p = keypoint_probability(net, warped.image)
        vals, covered = back_warp(p, warped.valid_mask, a)
        acc += np.where(covered, vals, 0.0)
        count += covered
        if return_parts:
            parts.append((vals, covered))
    avg = acc / count
    if return_parts:
        return avg, parts
    return avg


def random_keypoints(shape, n: int, rng: np.random.Generator, radius: int = 4) -> KeypointSet:
    """Up to ``n`` uniformly drawn pixels, rejecting any within Chebyshev
    distance ``radius`` of an earlier pick."""
    h, w = shape
    order = rng.permutation(h * w)
    blocked = np.zeros((h, w), dtype=bool)
    keep = []
    for idx in order:
        if len(keep) >= n:
            break
        r, c = divmod(int(idx), w)
        if blocked[r, c]:
            continue
        keep.append((r, c))
        blocked[max(r - radius, 0):r + radius + 1, max(c - radius, 0):c + radius + 1] = True
    pts = np.asarray(keep, dtype=np.int64).reshape(-1, 2)
    return KeypointSet(pts, np.ones(len(pts)))


def write_jsonl(kps: KeypointSet, fp) -> None:
    """One JSON object per keypoint: ``{"v", "x", "y", "score"[, "descriptor"]}``."""
    for i, (r, c) in enumerate(kps.points):
        rec = {"v": KEYPOINT_SCHEMA_VERSION, "x": int(c), "y": int(r), "score": float(kps.scores[i])}
        if kps.descriptors is not None:
            rec["descriptor"] = [float(v) for v in kps.descriptors[i]]
        fp.write(json.dumps(rec) + "\n")


def read_jsonl(fp) -> KeypointSet:
    pts, scores, descs = [], [], []
    for line in fp:
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec.get("v") != KEYPOINT_SCHEMA_VERSION:
            raise ValueError(f"unsupported keypoint record version {rec.get('v')}")
        pts.append((rec["y"], rec["x"]))
        scores.append(rec["score"])
        if "descriptor" in rec:
            descs.append(rec["descriptor"])
    kps = KeypointSet(np.asarray(pts, np.int64).reshape(-1, 2), np.asarray(scores))
    if descs:
        kps.descriptors = np.asarray(descs)
    return kps
