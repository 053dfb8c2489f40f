"""Descriptor phase: hardest-negative triplet loss on detected keypoints and
their warped correspondences, plus a penalty keeping the detector output
close to the phase snapshot."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from . import geometry
from .model import Network, forward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DescTrainConfig:
    margin: float = 0.8
    alpha: float = 1.0
    exclusion_radius: float = 4.0
    max_keypoints: int = 1000
    border: int = 4

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")


@dataclass
class PairSample:
    """An image, its augmented view and keypoint correspondences.

    ``pts_a[i]`` in ``image`` corresponds to ``pts_b[i]`` in ``warped``;
    ``labels_a`` optionally holds every input keypoint, including those lost
    by the warp.
    """

    image: np.ndarray
    warped: np.ndarray
    valid_mask: np.ndarray
    transform: geometry.AffineTransform
    pts_a: np.ndarray
    pts_b: np.ndarray
    labels_a: np.ndarray | None = None

    def batch(self) -> np.ndarray:
        return np.stack([self.image, self.warped])


def make_pair(rng: np.random.Generator, img: np.ndarray, points_rc, aug: geometry.AugmentConfig,
              border: int = 4, max_keypoints: int | None = None) -> PairSample:
    """Jitter + warp ``img`` and carry ``points_rc`` along, dropping points
    that leave the valid region (or come within ``border`` px of the edge)."""
    warped, a = geometry.augment(rng, img, aug)
    pts = np.asarray(points_rc, dtype=np.int64).reshape(-1, 2)
    keep, pts_b = geometry.warp_keypoints(pts, a, warped.valid_mask, border)
    pts_a = pts[keep]
    if max_keypoints is not None and len(pts_a) > max_keypoints:
        sel = np.sort(rng.choice(len(pts_a), max_keypoints, replace=False))
        pts_a, pts_b = pts_a[sel], pts_b[sel]
    return PairSample(geometry.to_luminance(img), warped.image, warped.valid_mask, a, pts_a, pts_b)


def sample_descriptors(desc: torch.Tensor, pts_rc) -> torch.Tensor:
    """Nearest lookup of a ``(C, H, W)`` map at integer ``(row, col)``;
    rows are re-normalised."""
    pts = torch.as_tensor(np.asarray(pts_rc, dtype=np.int64).reshape(-1, 2))
    _, h, w = desc.shape
    if len(pts) and (pts.min() < 0 or pts[:, 0].max() >= h or pts[:, 1].max() >= w):
        raise IndexError("keypoint outside descriptor map")
    d = desc[:, pts[:, 0], pts[:, 1]].T
    return torch.nn.functional.normalize(d, p=2, dim=1)


def pairwise_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return torch.sqrt(sq.clamp_min(0.0) + 1e-12)


def negative_masks(coords_a, coords_b, radius: float):
    """Allowed negatives: ``row_mask[i, j]`` for positive ``j`` of anchor
    ``i`` (judged in the warped view), ``col_mask[j, i]`` for anchor ``j``
    of positive ``i`` (judged in the reference view)."""
    ca = torch.as_tensor(np.asarray(coords_a, dtype=np.float64))
    cb = torch.as_tensor(np.asarray(coords_b, dtype=np.float64))
    n = len(ca)
    eye = torch.eye(n, dtype=torch.bool)
    row = ~eye & (torch.cdist(cb, cb) > radius)
    col = ~eye & (torch.cdist(ca, ca) > radius)
    return row, col


def hardest_negatives(dist: torch.Tensor, row_mask, col_mask):
    """Per-index ``min_j dist[i, j]`` and ``min_j dist[j, i]`` over allowed
    negatives (``inf`` when none)."""
    inf = torch.tensor(float("inf"), dtype=dist.dtype)
    d_row = torch.where(row_mask, dist, inf).min(dim=1).values
    d_col = torch.where(col_mask, dist, inf).min(dim=0).values
    return d_row, d_col


def triplet_hard_loss(anchors: torch.Tensor, positives: torch.Tensor, coords_a=None, coords_b=None,
                      margin: float = 0.8, exclusion_radius: float = 0.0) -> torch.Tensor:
    """Mean over anchors of ``relu(D_ii - min(D_i~, D_~i) + margin)``.

    ``coords_a``/``coords_b`` are the keypoint locations in each view; a
    candidate negative closer than ``exclusion_radius`` to the true
    correspondence is ignored.  Without coordinates only ``j != i`` applies.
    """
    n = len(anchors)
    if n < 2:
        raise ValueError("triplet loss needs at least two keypoints")
    dist = pairwise_distance(anchors, positives)
    if coords_a is None:
        eye = torch.eye(n, dtype=torch.bool)
        row_mask = col_mask = ~eye
    else:
        row_mask, col_mask = negative_masks(coords_a, coords_b, exclusion_radius)
    d_row, d_col = hardest_negatives(dist, row_mask, col_mask)
    hard = torch.minimum(d_row, d_col)
    return torch.relu(dist.diagonal() - hard + margin).mean()


def detector_preservation_loss(p, p_ref, p_hat, p_hat_ref) -> torch.Tensor:
    return 0.5 * (torch.mean((p - p_ref) ** 2) + torch.mean((p_hat - p_hat_ref) ** 2))


def descriptor_losses(net: Network, ref_prob: torch.Tensor, pair: PairSample,
                      cfg: DescTrainConfig) -> dict:
    """``L_des``, ``L'_det`` and ``L1 = L_des + alpha * L'_det`` as tensors.

    ``ref_prob`` is the snapshot network's probability map for the same
    ``(image, warped)`` batch.
    """
    prob, desc = forward(net, pair.batch())
    anchors = sample_descriptors(desc[0], pair.pts_a)
    positives = sample_descriptors(desc[1], pair.pts_b)
    l_des = triplet_hard_loss(anchors, positives, pair.pts_a, pair.pts_b,
                              cfg.margin, cfg.exclusion_radius)
    l_reg = detector_preservation_loss(prob[0], ref_prob[0], prob[1], ref_prob[1])
    return {"L_des": l_des, "L_det_reg": l_reg, "L1": l_des + cfg.alpha * l_reg}


def snapshot_outputs(snap: Network, batch: np.ndarray):
    """Snapshot forward with batch statistics (the snapshot's running buffers
    are frozen), no gradient."""
    snap.train()
    with torch.no_grad():
        return forward(snap, batch)


def descriptor_update_step(net: Network, snap: Network, optimizer: torch.optim.Optimizer,
                           img: np.ndarray, keypoints_rc, rng: np.random.Generator,
                           cfg: DescTrainConfig, aug: geometry.AugmentConfig) -> dict:
    """One Adam step on ``L1``.  Returns a record of float loss terms, or
    ``{"skipped": True}`` when fewer than two correspondences survive."""
    pair = make_pair(rng, img, keypoints_rc, aug, cfg.border, cfg.max_keypoints)
    if len(pair.pts_a) < 2:
        log.info("descriptor step skipped: %d surviving pairs", len(pair.pts_a))
        return {"skipped": True, "n_pairs": len(pair.pts_a)}
    ref_prob, _ = snapshot_outputs(snap, pair.batch())
    net.train()
    losses = descriptor_losses(net, ref_prob, pair, cfg)
    optimizer.zero_grad(set_to_none=True)
    losses["L1"].backward()
    optimizer.step()
    rec = {k: float(v.detach()) for k, v in losses.items()}
    rec["n_pairs"] = len(pair.pts_a)
    rec["skipped"] = False
    return rec
