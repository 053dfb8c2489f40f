"""Procedural colour images for desk-scale training runs and tests.

Scenes are a textured background with overlapping filled polygons, ellipses,
stars, stripes and checker patches.  Every region carries its own band-pass
noise texture, so almost every pixel has distinctive local structure (as in
natural photographs) and corners and junctions are plentiful.
"""
from __future__ import annotations

import cv2
import numpy as np


def _color(rng):
    return tuple(float(c) for c in rng.uniform(0.05, 0.95, 3))


def _background(rng, h, w):
    ys, xs = np.mgrid[0:h, 0:w] / max(h, w)
    base = np.empty((h, w, 3))
    for c in range(3):
        a, b, k = rng.uniform(-0.4, 0.4, 3)
        base[..., c] = rng.uniform(0.2, 0.8) + a * xs + b * ys + 0.1 * np.sin(6 * k * xs + 5 * ys)
    coarse = rng.uniform(-0.15, 0.15, (max(h // 16, 2), max(w // 16, 2), 3))
    base += cv2.resize(coarse, (w, h), interpolation=cv2.INTER_CUBIC)
    return base + _texture(rng, h, w)[..., None]


def _polygon(rng, h, w, n):
    c = rng.uniform((0, 0), (w, h))
    r = rng.uniform(8, min(h, w) / 3)
    ang = np.sort(rng.uniform(0, 2 * np.pi, n))
    rad = r * rng.uniform(0.5, 1.0, n)
    return np.stack([c[0] + rad * np.cos(ang), c[1] + rad * np.sin(ang)], 1)


def _star(rng, h, w):
    c = rng.uniform((0, 0), (w, h))
    k = int(rng.integers(4, 8))
    r_out = rng.uniform(10, min(h, w) / 3.5)
    ang = np.linspace(0, 2 * np.pi, 2 * k, endpoint=False) + rng.uniform(0, np.pi)
    rad = np.where(np.arange(2 * k) % 2 == 0, r_out, r_out * rng.uniform(0.3, 0.6))
    return np.stack([c[0] + rad * np.cos(ang), c[1] + rad * np.sin(ang)], 1)


def _texture(rng, h, w):
    """Zero-mean multi-scale noise with a random per-region contrast."""
    tex = np.zeros((h, w))
    for cell in rng.choice([2, 4, 8, 16], size=2, replace=False):
        n = rng.normal(size=(h // cell + 2, w // cell + 2))
        tex += cv2.resize(n, (w, h), interpolation=cv2.INTER_CUBIC)
    tex /= tex.std() + 1e-12
    return rng.uniform(0.05, 0.15) * tex


def _composite(canvas, mask, color, rng):
    h, w = mask.shape
    fill = np.asarray(color)[None, None, :] + _texture(rng, h, w)[..., None]
    canvas *= 1.0 - mask[..., None]
    canvas += mask[..., None] * fill


def _fill(canvas, pts, color, rng, shift=4):
    mask = np.zeros(canvas.shape[:2])
    p = np.round(pts * (1 << shift)).astype(np.int32)
    cv2.fillPoly(mask, [p], 1.0, lineType=cv2.LINE_AA, shift=shift)
    _composite(canvas, mask, color, rng)


def _checker(rng, canvas):
    h, w = canvas.shape[:2]
    ph, pw = int(rng.integers(h // 6, h // 2)), int(rng.integers(w // 6, w // 2))
    y0, x0 = int(rng.integers(0, h - ph)), int(rng.integers(0, w - pw))
    cell = int(rng.integers(5, 14))
    yy, xx = np.mgrid[0:ph, 0:pw]
    pattern = ((yy // cell + xx // cell) % 2).astype(bool)
    c1, c2 = np.array(_color(rng)), np.array(_color(rng))
    patch = np.where(pattern[..., None], c1, c2)
    rot = cv2.getRotationMatrix2D((pw / 2, ph / 2), rng.uniform(-45, 45), 1.0)
    patch = cv2.warpAffine(patch, rot, (pw, ph), borderMode=cv2.BORDER_REFLECT)
    canvas[y0:y0 + ph, x0:x0 + pw] = patch + _texture(rng, ph, pw)[..., None]


def synthetic_image(rng: np.random.Generator, shape=(160, 240), n_shapes: int | None = None) -> np.ndarray:
    """One ``(H, W, 3)`` float image in [0, 1]."""
    h, w = shape
    img = np.ascontiguousarray(_background(rng, h, w), dtype=np.float64)
    n_shapes = int(rng.integers(10, 18)) if n_shapes is None else n_shapes
    for _ in range(n_shapes):
        kind = rng.choice(["polygon", "ellipse", "star", "lines", "checker", "rect"],
                          p=[0.3, 0.15, 0.15, 0.15, 0.05, 0.2])
        color = _color(rng)
        if kind == "polygon":
            _fill(img, _polygon(rng, h, w, int(rng.integers(3, 7))), color, rng)
        elif kind == "star":
            _fill(img, _star(rng, h, w), color, rng)
        elif kind == "rect":
            c = rng.uniform((0, 0), (w, h))
            size = rng.uniform(8, min(h, w) / 2.5, 2)
            box = ((float(c[0]), float(c[1])), (float(size[0]), float(size[1])), float(rng.uniform(0, 90)))
            _fill(img, cv2.boxPoints(box), color, rng)
        elif kind == "ellipse":
            c = (int(rng.integers(0, w)), int(rng.integers(0, h)))
            ax = (int(rng.integers(6, h // 3)), int(rng.integers(4, h // 4)))
            mask = np.zeros((h, w))
            cv2.ellipse(mask, c, ax, float(rng.uniform(0, 180)), 0, 360, 1.0, -1, cv2.LINE_AA)
            _composite(img, mask, color, rng)
        elif kind == "lines":
            for _ in range(int(rng.integers(1, 4))):
                p1 = tuple(int(v) for v in rng.uniform((0, 0), (w, h)))
                p2 = tuple(int(v) for v in rng.uniform((0, 0), (w, h)))
                cv2.line(img, p1, p2, color, int(rng.integers(1, 4)), cv2.LINE_AA)
        else:
            _checker(rng, img)
    img = cv2.GaussianBlur(img, (0, 0), 0.7)
    img += rng.normal(0, 0.01, img.shape)
    return np.clip(img, 0.0, 1.0)


def synthetic_dataset(n: int, seed: int = 0, shape=(160, 240)) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    return {f"synth_{seed}_{i:04d}": synthetic_image(rng, shape) for i in range(n)}


def synthetic_sequence(rng: np.random.Generator, name: str, shape=(160, 240), n_targets: int = 5,
                       max_shift: float = 0.08):
    """An HPatches-like sequence: a reference image plus mildly perspective
    warped, photometrically jittered targets with exact homographies."""
    from . import geometry
    from .match_eval import Sequence

    h, w = shape
    ref = synthetic_image(rng, shape)
    images, hs = [ref], {}
    corners = np.array([[0, 0], [w - 1, 0], [0, h - 1], [w - 1, h - 1]], np.float32)
    for k in range(2, n_targets + 2):
        jitter = rng.uniform(-max_shift, max_shift, (4, 2)) * (w, h)
        if name.startswith("i_"):
            jitter[:] = 0
        hmat = cv2.getPerspectiveTransform(corners, (corners + jitter).astype(np.float32))
        hmat = hmat / hmat[2, 2]
        warped = cv2.warpPerspective(ref, hmat, (w, h), flags=cv2.INTER_LINEAR,
                                     borderMode=cv2.BORDER_REFLECT)
        cj = geometry.sample_jitter(rng, geometry.AugmentConfig())
        images.append(geometry.apply_jitter(warped, cj))
        hs[k] = hmat
    return Sequence(name, images, hs)
