"""Keypoint discovery from descriptor reliability.

For a pixel ``p`` of the reference image and a warp ``A``, repeatability is
the descriptor distance to the corresponding point ``A(p)`` of the warped
view and distinctness is the smallest distance to any other descriptor in a
window around ``A(p)``.  Their ratio, averaged over random warps and fused
across a coarse (1/4) and a fine (full-resolution) feature scale, ranks
pixels by how reliably they can be matched; NMS on that map yields labels
for the detector.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import geometry
from .detect import KeypointSet, NMSConfig, TRAIN_NMS, inference, nms
from .model import Network, forward

# coarse map cell (i, j) is centred on fine pixel 4 * i + 1.5
_COARSE = geometry.AffineTransform(np.array([[4.0, 0, 1.5], [0, 4.0, 1.5], [0, 0, 1.0]]))


@dataclass(frozen=True)
class ReliabilityConfig:
    m: int = 5
    window: int = 8
    coarse_window: int = 4
    exclusion: int = 2
    coarse_exclusion: int = 1
    eps: float = 1e-6
    cap: float = 100.0
    scales: tuple[str, ...] = ("coarse", "fine")
    weights: tuple[float, float] = (0.5, 0.5)
    use_repeatability: bool = True
    use_distinctness: bool = True

    def __post_init__(self):
        if self.window < 2 or self.coarse_window < 2:
            raise ValueError("window half-width must be >= 2")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if not self.scales or set(self.scales) - {"coarse", "fine"}:
            raise ValueError("scales must be a non-empty subset of ('coarse', 'fine')")
        object.__setattr__(self, "scales", tuple(self.scales))
        object.__setattr__(self, "weights", tuple(self.weights))


@dataclass
class ReliabilityMap:
    ratio: np.ndarray
    coverage: np.ndarray


def _as_chw(f) -> torch.Tensor:
    t = torch.as_tensor(f)
    return t if t.dtype in (torch.float32, torch.float64) else t.double()


def _map_coords(a: geometry.AffineTransform, shape):
    xs, ys = geometry.pixel_grid(shape)
    m = a.matrix
    return m[0, 0] * xs + m[0, 1] * ys + m[0, 2], m[1, 0] * xs + m[1, 1] * ys + m[1, 2]


def _footprint_valid(mask_b, sx, sy):
    if mask_b is None:
        return np.ones(sx.shape, bool)
    cov, inside = geometry.bilinear_sample(mask_b.astype(np.float64), sx, sy)
    return inside & (cov >= 1.0 - 1e-9)


def dense_repeatability(f_a, f_b, a: geometry.AffineTransform, mask_b=None):
    """``(D_rep, valid)``: distance between ``f_a[:, p]`` and ``f_b`` sampled
    bilinearly at ``a(p)``.  ``f_*`` are ``(C, H, W)``."""
    fa, fb = _as_chw(f_a), _as_chw(f_b)
    shape = fa.shape[1:]
    sx, sy = _map_coords(a, shape)
    hb, wb = fb.shape[1:]
    # grid_sample with align_corners=True addresses pixel centres 0..W-1
    gx = torch.as_tensor(2.0 * sx / max(wb - 1, 1) - 1.0)
    gy = torch.as_tensor(2.0 * sy / max(hb - 1, 1) - 1.0)
    grid = torch.stack([gx, gy], dim=-1)[None].to(fb.dtype)
    sampled = F.grid_sample(fb[None], grid, mode="bilinear", padding_mode="zeros",
                            align_corners=True)[0]
    d = torch.linalg.vector_norm(fa - sampled, dim=0).double().numpy()
    inside = (sx >= 0) & (sx <= wb - 1) & (sy >= 0) & (sy <= hb - 1)
    valid = inside & _footprint_valid(mask_b, sx, sy)
    return np.where(valid, d, 0.0), valid


def dense_distinctness(f_a, f_b, a: geometry.AffineTransform, window: int = 8,
                       exclusion: int = 2, mask_b=None):
    """``(D_dis, valid)``: min distance from ``f_a[:, p]`` to ``f_b[:, q]``
    over ``q`` in the ``(2 window + 1)^2`` square centred on the rounded
    ``a(p)``, skipping offsets with Chebyshev norm ``<= exclusion`` and any
    ``q`` outside ``f_b`` (or off ``mask_b``)."""
    fa, fb = _as_chw(f_a), _as_chw(f_b)
    c, h, w = fa.shape
    hb, wb = fb.shape[1:]
    sx, sy = _map_coords(a, (h, w))
    cx = torch.as_tensor(np.rint(sx).astype(np.int64)).reshape(-1)
    cy = torch.as_tensor(np.rint(sy).astype(np.int64)).reshape(-1)
    mb = None if mask_b is None else torch.as_tensor(np.asarray(mask_b, bool)).reshape(-1)
    fa_rows = fa.reshape(c, -1).T.contiguous()
    fb_rows = fb.reshape(c, -1).T.contiguous()
    best = torch.full((h * w,), float("inf"), dtype=fa.dtype)
    for dy in range(-window, window + 1):
        for dx in range(-window, window + 1):
            if max(abs(dy), abs(dx)) <= exclusion:
                continue
            qy, qx = cy + dy, cx + dx
            ok = (qy >= 0) & (qy < hb) & (qx >= 0) & (qx < wb)
            idx = qy.clamp(0, hb - 1) * wb + qx.clamp(0, wb - 1)
            if mb is not None:
                ok &= mb[idx]
            d = torch.linalg.vector_norm(fa_rows - fb_rows.index_select(0, idx), dim=1)
            best = torch.where(ok & (d < best), d, best)
    best = best.reshape(h, w)
    valid = torch.isfinite(best).numpy()
    return np.where(valid, best.double().numpy(), 0.0), valid


def ratio_map(d_rep, d_dis, eps: float = 1e-6, cap: float = 100.0, valid=None) -> np.ndarray:
    r = np.minimum(cap, np.asarray(d_dis, np.float64) / (np.asarray(d_rep, np.float64) + eps))
    if valid is not None:
        r = np.where(valid, r, 0.0)
    return r


def minmax_normalize(x: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Scale valid entries to [0, 1]; a constant map normalises to 0."""
    out = np.zeros_like(x, dtype=np.float64)
    if not valid.any():
        return out
    lo, hi = x[valid].min(), x[valid].max()
    if hi > lo:
        out[valid] = (x[valid] - lo) / (hi - lo)
    return out


def upsample_coarse(r: np.ndarray, valid: np.ndarray, shape):
    """Bilinear x4 upsampling (pixel-centre aligned) with a nearest-cell
    validity mask."""
    t = torch.as_tensor(r, dtype=torch.float64)[None, None]
    up = F.interpolate(t, size=tuple(shape), mode="bilinear", align_corners=False)[0, 0].numpy()
    rows = np.minimum(np.arange(shape[0]) // 4, r.shape[0] - 1)
    cols = np.minimum(np.arange(shape[1]) // 4, r.shape[1] - 1)
    return up, valid[np.ix_(rows, cols)]


def fuse_scales(r_coarse, valid_coarse, r_fine, valid_fine, weights=(0.5, 0.5)):
    """Min-max normalise both maps over their valid pixels and blend.

    ``r_coarse`` is at 1/4 resolution and is upsampled first.  Returns
    ``(fused, valid)``.
    """
    up, up_valid = upsample_coarse(r_coarse, valid_coarse, r_fine.shape)
    valid = up_valid & valid_fine
    fused = (weights[0] * minmax_normalize(up, valid)
             + weights[1] * minmax_normalize(r_fine, valid))
    return np.where(valid, fused, 0.0), valid


def _scale_ratio(f_a, f_b, a, mask_b, window, exclusion, cfg: ReliabilityConfig):
    valid = np.ones(f_a.shape[1:], bool)
    d_rep = d_dis = 1.0
    if cfg.use_repeatability:
        d_rep, v = dense_repeatability(f_a, f_b, a, mask_b)
        valid &= v
    if cfg.use_distinctness:
        d_dis, v = dense_distinctness(f_a, f_b, a, window, exclusion, mask_b)
        valid &= v
    if not cfg.use_repeatability or not cfg.use_distinctness:
        # the remaining term still needs a correspondence inside the view
        sx, sy = _map_coords(a, f_a.shape[1:])
        hb, wb = f_b.shape[1:]
        valid &= (sx >= 0) & (sx <= wb - 1) & (sy >= 0) & (sy <= hb - 1)
        valid &= _footprint_valid(mask_b, sx, sy)
    return ratio_map(d_rep, d_dis, cfg.eps, cfg.cap, valid), valid, d_rep, d_dis


def _coarse_transform(a):
    return geometry.compose(geometry.invert(_COARSE), geometry.compose(a, _COARSE))


def _coarse_mask(mask: np.ndarray, shape4) -> np.ndarray:
    h4, w4 = shape4
    m = mask[: 4 * h4, : 4 * w4].reshape(h4, 4, w4, 4)
    return m.all(axis=(1, 3))


def _features(net: Network, img: np.ndarray):
    """Fine (L2-normalised backbone 1x features) and coarse (1/4) maps."""
    with inference(net):
        _, _, pyr = forward(net, img, return_pyramid=True)
    h, w = img.shape
    f1 = F.normalize(pyr.f1[0], dim=0)[:, :h, :w]
    f4 = F.normalize(pyr.f4[0], dim=0)
    return f1, f4


@dataclass
class RoundMaps:
    """Per-warp maps in the reference frame, kept for inspection."""

    transform: geometry.AffineTransform
    fused: np.ndarray
    valid: np.ndarray
    d_rep_fine: np.ndarray | float
    d_dis_fine: np.ndarray | float


def reliability_round(net: Network, img: np.ndarray, ref_feats, warped: geometry.WarpResult,
                      a: geometry.AffineTransform, cfg: ReliabilityConfig) -> RoundMaps:
    f1a, f4a = ref_feats
    f1b, f4b = _features(net, warped.image)
    maps, valids = {}, {}
    d_rep = d_dis = None
    if "fine" in cfg.scales:
        r, v, d_rep, d_dis = _scale_ratio(f1a, f1b, a, warped.valid_mask, cfg.window,
                                          cfg.exclusion, cfg)
        maps["fine"], valids["fine"] = r, v
    if "coarse" in cfg.scales:
        mask4 = _coarse_mask(warped.valid_mask, f4b.shape[1:])
        r, v, *_ = _scale_ratio(f4a, f4b, _coarse_transform(a), mask4, cfg.coarse_window,
                                cfg.coarse_exclusion, cfg)
        maps["coarse"], valids["coarse"] = r, v
    shape = f1a.shape[1:]
    if len(maps) == 2:
        fused, valid = fuse_scales(maps["coarse"], valids["coarse"], maps["fine"],
                                   valids["fine"], cfg.weights)
    elif "fine" in maps:
        fused, valid = maps["fine"], valids["fine"]
    else:
        fused, valid = upsample_coarse(maps["coarse"], valids["coarse"], shape)
        fused = np.where(valid, fused, 0.0)
    return RoundMaps(a, fused, valid, d_rep, d_dis)


def averaged_ratio_map(net: Network, img: np.ndarray, cfg: ReliabilityConfig,
                       rng: np.random.Generator, aug: geometry.AugmentConfig | None = None,
                       return_rounds: bool = False):
    """Mean of per-round (fused) ratio maps over the rounds covering each
    pixel; uncovered pixels get 0."""
    aug = aug or geometry.AugmentConfig()
    lum = geometry.to_luminance(img)
    ref = _features(net, lum)
    acc = np.zeros(lum.shape)
    cov = np.zeros(lum.shape, dtype=np.int64)
    rounds = []
    for _ in range(cfg.m):
        warped, a = geometry.augment(rng, img, aug)
        rm = reliability_round(net, lum, ref, warped, a, cfg)
        acc += np.where(rm.valid, rm.fused, 0.0)
        cov += rm.valid
        if return_rounds:
            rounds.append(rm)
    out = ReliabilityMap(np.where(cov > 0, acc / np.maximum(cov, 1), 0.0), cov)
    if return_rounds:
        return out, rounds
    return out


def compute_reliable_keypoints(net: Network, img: np.ndarray, cfg: ReliabilityConfig,
                               rng: np.random.Generator, nms_cfg: NMSConfig = TRAIN_NMS,
                               aug: geometry.AugmentConfig | None = None) -> KeypointSet:
    rmap = averaged_ratio_map(net, img, cfg, rng, aug)
    return nms(rmap.ratio, nms_cfg.radius, nms_cfg.max_n, nms_cfg.min_score)
