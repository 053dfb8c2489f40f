"""Planar affine transforms, colour jitter and masked bilinear warping.

Coordinates are pixel ``(x, y)`` with x to the right and y down, origin at
the top-left pixel centre.  Transforms are sampled about the image centre and
stored in this corner-origin convention.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from skimage.color import hsv2rgb, rgb2hsv

_DET_EPS = 1e-8


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class AffineTransform:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise GeometryError(f"expected 3x3 matrix, got {m.shape}")
        if not np.array_equal(m[2], [0.0, 0.0, 1.0]):
            raise GeometryError("last row of an affine matrix must be (0, 0, 1)")
        m = m.copy()
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "AffineTransform":
        return cls(np.array([[1.0, 0, tx], [0, 1.0, ty], [0, 0, 1.0]]))

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.matrix[:2, :2]))

    def is_invertible(self) -> bool:
        return abs(self.det) > _DET_EPS

    def inverse(self) -> "AffineTransform":
        return invert(self)

    def __matmul__(self, other: "AffineTransform") -> "AffineTransform":
        return compose(self, other)

    def __call__(self, pts):
        return transform_points(pts, self)


def invert(a: AffineTransform) -> AffineTransform:
    if not a.is_invertible():
        raise GeometryError("affine transform is not invertible")
    lin = a.matrix[:2, :2]
    inv = np.linalg.inv(lin)
    out = np.eye(3)
    out[:2, :2] = inv
    out[:2, 2] = -inv @ a.matrix[:2, 2]
    return AffineTransform(out)


def compose(a: AffineTransform, b: AffineTransform) -> AffineTransform:
    """``a`` after ``b``: ``compose(a, b)(p) == a(b(p))``."""
    m = a.matrix @ b.matrix
    m[2] = (0.0, 0.0, 1.0)
    return AffineTransform(m)


def transform_points(pts, a: AffineTransform) -> np.ndarray:
    """Apply ``a`` to an ``(N, 2)`` array of ``(x, y)`` points."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    return pts @ a.matrix[:2, :2].T + a.matrix[:2, 2]


# --------------------------------------------------------------------------
# sampling

@dataclass(frozen=True)
class ColorJitter:
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 0.0

    def __post_init__(self):
        if min(self.brightness, self.contrast, self.saturation) <= 0:
            raise GeometryError("jitter factors must be positive")
        if not -0.5 <= self.hue <= 0.5:
            raise GeometryError("hue shift must lie in [-0.5, 0.5]")

    def is_identity(self) -> bool:
        return self == ColorJitter()


def _interval(v, name):
    lo, hi = (float(x) for x in v)
    if lo > hi:
        raise GeometryError(f"{name}: low {lo} > high {hi}")
    return lo, hi


@dataclass(frozen=True)
class AugmentConfig:
    """Uniform sampling ranges; angles in degrees, translation as a fraction
    of the image size."""

    rotation: tuple[float, float] = (-40.0, 40.0)
    shear: tuple[float, float] = (-40.0, 40.0)
    translation: tuple[float, float] = (-0.04, 0.04)
    scale: tuple[float, float] = (0.7, 1.4)
    brightness: tuple[float, float] = (0.6, 1.4)
    contrast: tuple[float, float] = (0.6, 1.4)
    saturation: tuple[float, float] = (0.6, 1.4)
    hue: tuple[float, float] = (-0.2, 0.2)

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            object.__setattr__(self, name, _interval(getattr(self, name), name))
        if self.scale[0] <= 0:
            raise GeometryError("scale range must be positive")
        for name in ("brightness", "contrast", "saturation"):
            if getattr(self, name)[0] <= 0:
                raise GeometryError(f"{name} range must be positive")
        if self.hue[0] < -0.5 or self.hue[1] > 0.5:
            raise GeometryError("hue range must lie within [-0.5, 0.5]")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls((0, 0), (0, 0), (0, 0), (1, 1), (1, 1), (1, 1), (1, 1), (0, 0))

    def without_jitter(self) -> "AugmentConfig":
        return AugmentConfig(self.rotation, self.shear, self.translation, self.scale,
                             (1, 1), (1, 1), (1, 1), (0, 0))


def affine_from_params(shape, rotation=0.0, shear=0.0, tx=0.0, ty=0.0, scale=1.0) -> AffineTransform:
    """Translate . Rotate . Shear . Scale about the image centre.

    Angles in degrees; ``tx``/``ty`` in pixels.
    """
    h, w = shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    r, s = np.deg2rad(rotation), np.deg2rad(shear)
    rot = np.array([[np.cos(r), -np.sin(r)], [np.sin(r), np.cos(r)]])
    sh = np.array([[1.0, np.tan(s)], [0.0, 1.0]])
    lin = rot @ sh * scale
    c = np.array([cx, cy])
    m = np.eye(3)
    m[:2, :2] = lin
    m[:2, 2] = c + np.array([tx, ty]) - lin @ c
    return AffineTransform(m)


def sample_affine(rng: np.random.Generator, cfg: AugmentConfig, shape) -> AffineTransform:
    h, w = shape
    if h < 8 or w < 8:
        raise GeometryError(f"image too small for augmentation: {h}x{w}")
    rot = rng.uniform(*cfg.rotation)
    shear = rng.uniform(*cfg.shear)
    tx = rng.uniform(*cfg.translation) * w
    ty = rng.uniform(*cfg.translation) * h
    scale = rng.uniform(*cfg.scale)
    return affine_from_params(shape, rot, shear, tx, ty, scale)


def sample_jitter(rng: np.random.Generator, cfg: AugmentConfig) -> ColorJitter:
    return ColorJitter(
        brightness=rng.uniform(*cfg.brightness),
        contrast=rng.uniform(*cfg.contrast),
        saturation=rng.uniform(*cfg.saturation),
        hue=rng.uniform(*cfg.hue),
    )


# --------------------------------------------------------------------------
# photometric

def to_luminance(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    return img[..., :3] @ np.array([0.299, 0.587, 0.114])


def apply_jitter(img: np.ndarray, j: ColorJitter) -> np.ndarray:
    """Brightness, contrast, saturation, hue, clamping to [0, 1] after each.

    Grayscale (2-D) input only receives brightness and contrast.
    """
    out = np.asarray(img, dtype=np.float64)
    if j.is_identity():
        return out.copy()
    out = np.clip(out * j.brightness, 0.0, 1.0)
    mean = to_luminance(out).mean()
    out = np.clip((out - mean) * j.contrast + mean, 0.0, 1.0)
    if out.ndim == 3:
        gray = to_luminance(out)[..., None]
        out = np.clip((out - gray) * j.saturation + gray, 0.0, 1.0)
        if j.hue != 0.0:
            hsv = rgb2hsv(out)
            hsv[..., 0] = np.mod(hsv[..., 0] + j.hue, 1.0)
            out = np.clip(hsv2rgb(hsv), 0.0, 1.0)
    return out


# --------------------------------------------------------------------------
# warping

@dataclass
class WarpResult:
    image: np.ndarray
    valid_mask: np.ndarray


def bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    """Sample ``img`` (H, W[, C]) at float coordinates.

    Returns ``(values, inside)``; points outside ``[0, W-1] x [0, H-1]`` get 0.
    """
    img = np.asarray(img)
    h, w = img.shape[:2]
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    inside = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    x0 = np.clip(np.floor(xs), 0, max(w - 2, 0)).astype(np.intp)
    y0 = np.clip(np.floor(ys), 0, max(h - 2, 0)).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = np.where(inside, xs - x0, 0.0)
    fy = np.where(inside, ys - y0, 0.0)
    if img.ndim == 3:
        fx, fy = fx[..., None], fy[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    vals = top * (1 - fy) + bot * fy
    mask = inside[..., None] if img.ndim == 3 else inside
    return np.where(mask, vals, 0.0), inside


def pixel_grid(shape):
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    return xs.astype(np.float64), ys.astype(np.float64)


def warp_image(img: np.ndarray, a: AffineTransform, out_shape=None) -> WarpResult:
    """Output pixel ``p`` takes the bilinear sample of ``img`` at ``a^-1(p)``."""
    img = np.asarray(img, dtype=np.float64)
    if not np.all(np.isfinite(img)):
        raise GeometryError("image contains non-finite values")
    inv = invert(a).matrix
    shape = img.shape[:2] if out_shape is None else out_shape
    xs, ys = pixel_grid(shape)
    sx = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    sy = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    vals, inside = bilinear_sample(img, sx, sy)
    return WarpResult(vals, inside)


def augment(rng: np.random.Generator, img: np.ndarray, cfg: AugmentConfig):
    """Jitter (in source colour space) then warp; returns luminance result and
    the transform.  ``img`` may be (H, W) or (H, W, 3)."""
    shape = img.shape[:2]
    a = sample_affine(rng, cfg, shape)
    j = sample_jitter(rng, cfg)
    lum = to_luminance(apply_jitter(img, j))
    return warp_image(lum, a), a


def warp_keypoints(points_rc, a: AffineTransform, valid_mask: np.ndarray, border: int = 0):
    """Map integer ``(row, col)`` keypoints through ``a`` and round.

    Returns ``(keep, warped_rc)``: indices of the input points whose rounded
    image lies at least ``border`` px inside the frame on a valid pixel, and
    those rounded locations.
    """
    pts = np.asarray(points_rc, dtype=np.int64).reshape(-1, 2)
    h, w = valid_mask.shape
    if len(pts) == 0:
        return np.zeros(0, np.int64), np.zeros((0, 2), np.int64)
    xy = transform_points(pts[:, ::-1], a)
    rc = np.rint(xy[:, ::-1]).astype(np.int64)
    ok = ((rc[:, 0] >= border) & (rc[:, 0] <= h - 1 - border)
          & (rc[:, 1] >= border) & (rc[:, 1] <= w - 1 - border))
    ok[ok] = valid_mask[rc[ok, 0], rc[ok, 1]]
    keep = np.flatnonzero(ok)
    return keep, rc[keep]
