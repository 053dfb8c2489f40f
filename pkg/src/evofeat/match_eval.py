"""Descriptor matching, RANSAC homography estimation and the homography
accuracy (HA) protocol, plus repeatability / matching-score diagnostics."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .detect import KeypointSet, NMSConfig, detect
from .model import Network

THRESHOLDS = tuple(range(1, 11))


class EstimationError(RuntimeError):
    pass


@dataclass
class MatchSet:
    idx_a: np.ndarray
    idx_b: np.ndarray
    distances: np.ndarray

    def __len__(self):
        return len(self.idx_a)

    def pairs(self) -> set[tuple[int, int]]:
        return set(zip(self.idx_a.tolist(), self.idx_b.tolist()))


def descriptor_distances(desc_a, desc_b) -> np.ndarray:
    a = np.asarray(desc_a, np.float64)
    b = np.asarray(desc_b, np.float64)
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.sqrt(np.maximum(sq, 0.0))


def nn_match(desc_a, desc_b, cross_check: bool = True) -> MatchSet:
    """Nearest neighbour under L2 (``argmin`` keeps the lowest index on ties);
    with ``cross_check`` only mutual nearest neighbours survive."""
    d = descriptor_distances(desc_a, desc_b)
    if d.size == 0:
        return MatchSet(np.zeros(0, int), np.zeros(0, int), np.zeros(0))
    fwd = d.argmin(axis=1)
    ia = np.arange(len(d))
    if cross_check:
        bwd = d.argmin(axis=0)
        ia = ia[bwd[fwd] == ia]
    ib = fwd[ia]
    return MatchSet(ia, ib, d[ia, ib])


def ratio_test_match(desc_a, desc_b, ratio: float = 0.8) -> MatchSet:
    """Keep the nearest match iff ``d1 / d2 < ratio``; with a single
    candidate ``d2`` is taken as infinite."""
    d = descriptor_distances(desc_a, desc_b)
    if d.size == 0:
        return MatchSet(np.zeros(0, int), np.zeros(0, int), np.zeros(0))
    fwd = d.argmin(axis=1)
    d1 = d[np.arange(len(d)), fwd]
    if d.shape[1] > 1:
        d2 = np.partition(d, 1, axis=1)[:, 1]
    else:
        d2 = np.full(len(d), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        keep = np.where(d2 > 0, d1 / d2, np.inf) < ratio
    ia = np.flatnonzero(keep)
    return MatchSet(ia, fwd[ia], d1[ia])


# --------------------------------------------------------------------------
# homography

def normalize_points(pts):
    """Similarity moving the centroid to 0 and the mean distance to sqrt(2)."""
    pts = np.asarray(pts, np.float64)
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(1)).mean()
    s = np.sqrt(2.0) / d if d > 0 else 1.0
    t = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
    return (pts - c) * s, t


def dlt_homography(src, dst) -> np.ndarray:
    """Normalised DLT from >= 4 correspondences ``src -> dst``."""
    src = np.asarray(src, np.float64)
    dst = np.asarray(dst, np.float64)
    if len(src) < 4:
        raise EstimationError("DLT needs at least 4 correspondences")
    sn, ts = normalize_points(src)
    dn, td = normalize_points(dst)
    x, y = sn[:, 0], sn[:, 1]
    u, v = dn[:, 0], dn[:, 1]
    zero, one = np.zeros_like(x), np.ones_like(x)
    a = np.empty((2 * len(x), 9))
    a[0::2] = np.stack([x, y, one, zero, zero, zero, -u * x, -u * y, -u], 1)
    a[1::2] = np.stack([zero, zero, zero, x, y, one, -v * x, -v * y, -v], 1)
    _, sv, vt = np.linalg.svd(a)
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(td) @ hn @ ts
    return normalize_homography(h)


def normalize_homography(h) -> np.ndarray:
    h = np.asarray(h, np.float64)
    if abs(h[2, 2]) > 1e-12:
        return h / h[2, 2]
    return h / np.linalg.norm(h)


def project(h, pts) -> np.ndarray:
    pts = np.asarray(pts, np.float64).reshape(-1, 2)
    q = pts @ h[:, :2].T + h[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        return q[:, :2] / q[:, 2:3]


def _degenerate(pts) -> bool:
    # any three of the four points (nearly) collinear
    for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        a, b, c = pts[i], pts[j], pts[k]
        if abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])) < 1e-6:
            return True
    return False


@dataclass(frozen=True)
class RansacConfig:
    threshold: float = 3.0
    max_iters: int = 2000
    confidence: float = 0.995
    seed: int = 0


def estimate_homography(pts_a, pts_b, cfg: RansacConfig = RansacConfig(), rng=None):
    """RANSAC over minimal 4-point samples, scoring the forward transfer error
    ``|H a - b|``; the best consensus set is refit by DLT.

    Returns ``(H, inlier_mask)``; raises :class:`EstimationError` with fewer
    than 4 correspondences or when no model gathers 4 inliers.
    """
    a = np.asarray(pts_a, np.float64).reshape(-1, 2)
    b = np.asarray(pts_b, np.float64).reshape(-1, 2)
    n = len(a)
    if n < 4:
        raise EstimationError(f"need at least 4 matches, got {n}")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    best_mask, best_count = None, 0
    iters, i = cfg.max_iters, 0
    while i < iters:
        i += 1
        sample = rng.choice(n, 4, replace=False)
        if _degenerate(a[sample]) or _degenerate(b[sample]):
            continue
        try:
            h = dlt_homography(a[sample], b[sample])
        except (np.linalg.LinAlgError, EstimationError):
            continue
        err = np.linalg.norm(project(h, a) - b, axis=1)
        mask = np.nan_to_num(err, nan=np.inf) <= cfg.threshold
        count = int(mask.sum())
        if count > best_count:
            best_mask, best_count = mask, count
            frac = count / n
            if frac >= 1.0:
                break
            need = np.log(1 - cfg.confidence) / np.log(1 - frac ** 4) if frac > 0 else np.inf
            iters = min(iters, int(np.ceil(need)))
    if best_mask is None or best_count < 4:
        raise EstimationError("no model with at least 4 inliers")
    h = dlt_homography(a[best_mask], b[best_mask])
    err = np.linalg.norm(project(h, a) - b, axis=1)
    mask = np.nan_to_num(err, nan=np.inf) <= cfg.threshold
    if mask.sum() < best_count:
        mask = best_mask
    return h, mask


def image_corners(shape) -> np.ndarray:
    h, w = shape
    return np.array([[0, 0], [w - 1, 0], [0, h - 1], [w - 1, h - 1]], np.float64)


def corner_error(h_est, h_gt, shape) -> float:
    c = image_corners(shape)
    return float(np.linalg.norm(project(h_est, c) - project(h_gt, c), axis=1).mean())


def homography_accuracy(h_est, h_gt, shape, eps: float) -> bool:
    if h_est is None:
        return False
    return corner_error(h_est, h_gt, shape) <= eps


# --------------------------------------------------------------------------
# HPatches-style evaluation

@dataclass
class Sequence:
    name: str
    images: list
    homographies: dict

    @property
    def subset(self) -> str:
        if self.name.startswith("i_"):
            return "illumination"
        if self.name.startswith("v_"):
            return "viewpoint"
        return "other"


def load_hpatches(root, max_side: int | None = None) -> list[Sequence]:
    """Read ``<seq>/1..6.(ppm|png|jpg)`` and ``H_1_k`` files.

    With ``max_side`` images are downscaled and the homographies adjusted.
    """
    from .io import read_image, resize_long_side, scale_matrix

    seqs = []
    for name in sorted(os.listdir(root)):
        d = os.path.join(root, name)
        if not os.path.isdir(d):
            continue
        images, hs = [], {}
        for k in range(1, 7):
            path = next((os.path.join(d, f"{k}{ext}") for ext in (".ppm", ".png", ".jpg")
                         if os.path.exists(os.path.join(d, f"{k}{ext}"))), None)
            if path is None:
                break
            images.append(read_image(path))
        for k in range(2, len(images) + 1):
            hp = os.path.join(d, f"H_1_{k}")
            if os.path.exists(hp):
                hs[k] = np.loadtxt(hp).reshape(3, 3)
        if len(images) < 2:
            continue
        if max_side is not None:
            scales = []
            for idx, img in enumerate(images):
                images[idx], s = resize_long_side(img, max_side)
                scales.append(s)
            for k, h in hs.items():
                hs[k] = normalize_homography(
                    scale_matrix(scales[k - 1]) @ h @ np.linalg.inv(scale_matrix(scales[0])))
        seqs.append(Sequence(name, images, hs))
    return seqs


@dataclass
class HAReport:
    thresholds: tuple = THRESHOLDS
    rows: list = field(default_factory=list)

    def add(self, seq: str, subset: str, target: int, err: float | None):
        self.rows.append({"sequence": seq, "subset": subset, "target": target,
                          "corner_error": err})

    def accuracy(self, subset: str | None = None) -> dict:
        rows = [r for r in self.rows if subset is None or r["subset"] == subset]
        if not rows:
            return {e: float("nan") for e in self.thresholds}
        errs = np.array([np.inf if r["corner_error"] is None else r["corner_error"] for r in rows])
        return {e: float((errs <= e).mean()) for e in self.thresholds}

    def average(self, subset: str | None = None) -> float:
        return float(np.mean(list(self.accuracy(subset).values())))

    def per_sequence(self) -> dict:
        out = {}
        for seq in sorted({r["sequence"] for r in self.rows}):
            rows = [r for r in self.rows if r["sequence"] == seq]
            errs = np.array([np.inf if r["corner_error"] is None else r["corner_error"] for r in rows])
            out[seq] = {e: float((errs <= e).mean()) for e in self.thresholds}
        return out

    def summary(self) -> dict:
        out = {"overall": self.accuracy(), "avg": self.average()}
        for sub in ("illumination", "viewpoint"):
            if any(r["subset"] == sub for r in self.rows):
                out[sub] = self.accuracy(sub)
                out[f"avg_{sub}"] = self.average(sub)
        return out

    def write(self, path) -> None:
        """Per-pair rows as JSON lines followed by a summary record."""
        with open(path, "w") as fp:
            for r in self.rows:
                fp.write(json.dumps({"kind": "pair", **r}) + "\n")
            summ = self.summary()
            fp.write(json.dumps({"kind": "summary",
                                 **{k: ({str(e): v for e, v in val.items()} if isinstance(val, dict) else val)
                                    for k, val in summ.items()}}) + "\n")

    def plot(self, path) -> None:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 4))
        for sub, label in ((None, "overall"), ("illumination", "illumination"),
                           ("viewpoint", "viewpoint")):
            if sub is not None and not any(r["subset"] == sub for r in self.rows):
                continue
            acc = self.accuracy(sub)
            ax.plot(list(acc), [100 * v for v in acc.values()], marker="o", label=label)
        ax.set_xlabel("corner error threshold (px)")
        ax.set_ylabel("homography accuracy (%)")
        ax.set_ylim(0, 100)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


@dataclass(frozen=True)
class EvalConfig:
    top_k: int = 500
    nms_radius: int = 4
    min_score: float = 0.0
    cross_check: bool = True
    ransac: RansacConfig = RansacConfig()


def estimate_pair(kp_a: KeypointSet, kp_b: KeypointSet, cfg: EvalConfig, rng=None):
    """Cross-checked NN matching + RANSAC; ``None`` when estimation fails."""
    if len(kp_a) < 4 or len(kp_b) < 4:
        return None
    m = nn_match(kp_a.descriptors, kp_b.descriptors, cfg.cross_check)
    try:
        h, _ = estimate_homography(kp_a.xy()[m.idx_a], kp_b.xy()[m.idx_b], cfg.ransac, rng)
    except EstimationError:
        return None
    return h


def evaluate_sequences(net: Network, sequences, cfg: EvalConfig = EvalConfig(),
                       extract=None) -> HAReport:
    """HA@1..10 over (reference, target) pairs.

    ``extract(img) -> KeypointSet`` overrides keypoint extraction (defaults
    to plain detection, top-k, with descriptors).
    """
    nms_cfg = NMSConfig(cfg.nms_radius, cfg.top_k, cfg.min_score)
    if extract is None:
        def extract(img):
            return detect(net, img, nms_cfg, with_descriptors=True)
    report = HAReport()
    for seq in sequences:
        ref = seq.images[0]
        kp_ref = extract(ref)
        for k in sorted(seq.homographies):
            img = seq.images[k - 1]
            kp = extract(img)
            rng = np.random.default_rng(cfg.ransac.seed)
            h = estimate_pair(kp_ref, kp, cfg, rng)
            err = None if h is None else corner_error(h, seq.homographies[k], ref.shape[:2])
            report.add(seq.name, seq.subset, k, err)
    return report


# --------------------------------------------------------------------------
# diagnostics

@dataclass
class Diagnostics:
    repeatability: float
    matching_score: float
    per_trial: list


def _nearest(pts, targets):
    if len(targets) == 0:
        return np.full(len(pts), np.inf), np.zeros(len(pts), int)
    d = np.linalg.norm(pts[:, None, :] - targets[None, :, :], axis=2)
    j = d.argmin(axis=1)
    return d[np.arange(len(pts)), j], j


def pair_diagnostics(kp_a: KeypointSet, kp_b: KeypointSet, a: geometry.AffineTransform,
                     valid_b: np.ndarray, tol: float = 3.0) -> tuple[float, float, int]:
    """Repeatability and matching score of ``kp_a`` against ``kp_b`` in the
    warped view, over the ``kp_a`` points whose warp lands on a valid pixel.

    Returns ``(repeatability, matching_score, n_visible)``.
    """
    h, w = valid_b.shape
    xy_b_true = geometry.transform_points(kp_a.xy(), a)
    rc = np.rint(xy_b_true[:, ::-1]).astype(int)
    vis = (rc[:, 0] >= 0) & (rc[:, 0] < h) & (rc[:, 1] >= 0) & (rc[:, 1] < w)
    vis[vis] = valid_b[rc[vis, 0], rc[vis, 1]]
    n = int(vis.sum())
    if n == 0:
        return 0.0, 0.0, 0
    dist, _ = _nearest(xy_b_true[vis], kp_b.xy())
    rep = float((dist <= tol).mean())
    ms = 0.0
    if kp_a.descriptors is not None and kp_b.descriptors is not None and len(kp_b):
        m = nn_match(kp_a.descriptors, kp_b.descriptors, cross_check=True)
        sel = vis[m.idx_a]
        err = np.linalg.norm(kp_b.xy()[m.idx_b[sel]] - xy_b_true[m.idx_a[sel]], axis=1)
        ms = float((err <= tol).sum() / n)
    return rep, ms, n


def repeatability_and_matching_score(extract, images, n_trials: int, rng: np.random.Generator,
                                     aug: geometry.AugmentConfig | None = None,
                                     tol: float = 3.0) -> Diagnostics:
    """Mean repeatability / matching score over ``n_trials`` random warps,
    cycling through ``images``.

    ``extract(lum_img) -> KeypointSet`` (with descriptors for the matching
    score); typically top-200 detection.
    """
    aug = aug or geometry.AugmentConfig()
    images = list(images)
    trials = []
    for t in range(n_trials):
        img = images[t % len(images)]
        warped, a = geometry.augment(rng, img, aug)
        kp_a = extract(geometry.to_luminance(img))
        kp_b = extract(warped.image)
        rep, ms, n = pair_diagnostics(kp_a, kp_b, a, warped.valid_mask, tol)
        trials.append({"repeatability": rep, "matching_score": ms, "n_visible": n})
    return Diagnostics(float(np.mean([t["repeatability"] for t in trials])),
                       float(np.mean([t["matching_score"] for t in trials])), trials)
