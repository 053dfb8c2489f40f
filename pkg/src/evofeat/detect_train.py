"""Detector phase: focal loss on reliability keypoints in both views, a
symmetric KL term tying probabilities at corresponding keypoints, and a
penalty keeping descriptors close to the phase snapshot."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from . import geometry
from .describe_train import PairSample, make_pair, snapshot_outputs
from .model import Network, forward

log = logging.getLogger(__name__)

_CLAMP = 1e-7


@dataclass(frozen=True)
class DetTrainConfig:
    gamma: float = 2.0
    focal_alpha: float = 0.25
    beta: float = 1.0
    lam: float = 1e-3
    rep_reduction: str = "sum"
    use_rep: bool = True
    border: int = 0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if not 0 < self.focal_alpha < 1:
            raise ValueError("focal_alpha must lie in (0, 1)")
        if self.beta < 0 or self.lam < 0:
            raise ValueError("beta and lam must be non-negative")
        if self.rep_reduction not in ("sum", "mean"):
            raise ValueError("rep_reduction must be 'sum' or 'mean'")


def rasterize(points_rc, shape) -> np.ndarray:
    y = np.zeros(shape, dtype=np.float64)
    pts = np.asarray(points_rc, dtype=np.int64).reshape(-1, 2)
    if len(pts):
        y[pts[:, 0], pts[:, 1]] = 1.0
    return y


def focal_loss(prob: torch.Tensor, labels, gamma: float = 2.0, alpha: float = 0.25,
               mask=None) -> torch.Tensor:
    """Mean of ``-a_t (1 - p_t)^gamma log p_t`` over (masked) pixels.

    ``prob`` is ``(2, H, W)``; ``labels`` is a binary ``(H, W)`` map.
    """
    y = torch.as_tensor(labels, dtype=prob.dtype)
    p_t = torch.where(y > 0.5, prob[1], prob[0]).clamp_min(_CLAMP)
    a_t = torch.where(y > 0.5, torch.tensor(alpha, dtype=prob.dtype),
                      torch.tensor(1.0 - alpha, dtype=prob.dtype))
    loss = -a_t * (1.0 - p_t) ** gamma * torch.log(p_t)
    if mask is None:
        return loss.mean()
    m = torch.as_tensor(mask, dtype=torch.bool)
    if not m.any():
        return loss.sum() * 0.0
    return loss[m].mean()


def symmetric_detection_loss(prob, labels, prob_hat, labels_hat, mask_hat=None,
                             gamma: float = 2.0, alpha: float = 0.25) -> torch.Tensor:
    return 0.5 * (focal_loss(prob, labels, gamma, alpha)
                  + focal_loss(prob_hat, labels_hat, gamma, alpha, mask_hat))


def _kl(p, q):
    return (p * (torch.log(p) - torch.log(q))).sum(-1)


def repeatability_loss(prob, prob_hat, pts_a, pts_b):
    """Symmetrised KL between the 2-vectors at corresponding keypoints.

    Returns ``(sum, mean)`` over pairs.
    """
    pa = torch.as_tensor(np.asarray(pts_a, dtype=np.int64).reshape(-1, 2))
    pb = torch.as_tensor(np.asarray(pts_b, dtype=np.int64).reshape(-1, 2))
    if len(pa) == 0:
        zero = prob.sum() * 0.0
        return zero, zero
    p = prob[:, pa[:, 0], pa[:, 1]].T.clamp(_CLAMP, 1 - _CLAMP)
    q = prob_hat[:, pb[:, 0], pb[:, 1]].T.clamp(_CLAMP, 1 - _CLAMP)
    per_pair = 0.5 * (_kl(p, q) + _kl(q, p))
    return per_pair.sum(), per_pair.mean()


def descriptor_preservation_loss(f, f_ref, f_hat, f_hat_ref) -> torch.Tensor:
    return 0.5 * (torch.mean((f - f_ref) ** 2) + torch.mean((f_hat - f_hat_ref) ** 2))


def detector_losses(net: Network, ref_desc: torch.Tensor, pair: PairSample,
                    cfg: DetTrainConfig) -> dict:
    """Loss terms of ``L2 = L_det + beta * L_rep + lam * L'_des``.

    ``pair.pts_a`` are the label keypoints in the reference image and
    ``pair.pts_b`` their rasterised warps (already restricted to the view).
    """
    prob, desc = forward(net, pair.batch())
    shape = pair.image.shape
    y = rasterize(pair.pts_a if pair.labels_a is None else pair.labels_a, shape)
    y_hat = rasterize(pair.pts_b, shape)
    l_det = symmetric_detection_loss(prob[0], y, prob[1], y_hat, pair.valid_mask,
                                     cfg.gamma, cfg.focal_alpha)
    rep_sum, rep_mean = repeatability_loss(prob[0], prob[1], pair.pts_a, pair.pts_b)
    l_rep = rep_sum if cfg.rep_reduction == "sum" else rep_mean
    l_des_reg = descriptor_preservation_loss(desc[0], ref_desc[0], desc[1], ref_desc[1])
    beta = cfg.beta if cfg.use_rep else 0.0
    total = l_det + beta * l_rep + cfg.lam * l_des_reg
    sched = l_det + beta * rep_mean + cfg.lam * l_des_reg
    return {"L_det": l_det, "L_rep": rep_sum, "L_rep_mean": rep_mean,
            "L_des_reg": l_des_reg, "L2": total, "L2_sched": sched}


def detector_update_step(net: Network, snap: Network, optimizer: torch.optim.Optimizer,
                         img: np.ndarray, labels_rc, rng: np.random.Generator,
                         cfg: DetTrainConfig, aug: geometry.AugmentConfig) -> dict:
    """One Adam step on ``L2``.  When every label leaves the warped view the
    repeatability term is zero and the step still runs."""
    labels_rc = np.asarray(labels_rc, dtype=np.int64).reshape(-1, 2)
    pair = make_pair(rng, img, labels_rc, aug, cfg.border)
    pair.labels_a = labels_rc
    if len(pair.pts_a) == 0:
        log.info("detector step: no label survives the warp, L_rep skipped")
    _, ref_desc = snapshot_outputs(snap, pair.batch())
    net.train()
    losses = detector_losses(net, ref_desc, pair, cfg)
    optimizer.zero_grad(set_to_none=True)
    losses["L2"].backward()
    optimizer.step()
    rec = {k: float(v.detach()) for k, v in losses.items()}
    rec["n_pairs"] = len(pair.pts_a)
    rec["skipped"] = False
    return rec
