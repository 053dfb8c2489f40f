"""Image files and dataset ingestion.  Images are float arrays in [0, 1],
(H, W) for grayscale or (H, W, 3) for colour."""
from __future__ import annotations

import os

import numpy as np
from PIL import Image

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".ppm", ".pgm", ".bmp")
MIN_SIDE = 64


class DataError(ValueError):
    pass


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("L") if im.mode in ("L", "I", "I;16", "1") else im.convert("RGB")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return arr


def write_image(path, img: np.ndarray) -> None:
    arr = np.clip(np.asarray(img, np.float64), 0, 1)
    Image.fromarray((arr * 255 + 0.5).astype(np.uint8)).save(path)


def write_heatmap(path, values: np.ndarray, cmap: str = "viridis") -> None:
    import matplotlib

    v = np.asarray(values, np.float64)
    lo, hi = np.nanmin(v), np.nanmax(v)
    norm = (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)
    rgba = matplotlib.colormaps[cmap](norm)
    write_image(path, rgba[..., :3])


def resize_long_side(img: np.ndarray, max_side: int):
    """Downscale so the long side is at most ``max_side``; returns
    ``(image, scale)``.  Images already small enough are returned as is."""
    h, w = img.shape[:2]
    s = min(1.0, max_side / max(h, w))
    if s >= 1.0:
        return img, 1.0
    nh, nw = max(int(round(h * s)), 1), max(int(round(w * s)), 1)
    mode = "L" if img.ndim == 2 else "RGB"
    im = Image.fromarray((np.clip(img, 0, 1) * 255 + 0.5).astype(np.uint8), mode)
    im = im.resize((nw, nh), Image.BILINEAR)
    return np.asarray(im, np.float64) / 255.0, nw / w


def scale_matrix(s: float) -> np.ndarray:
    """Pixel-centre aware scaling ``x' = s (x + 0.5) - 0.5``."""
    o = 0.5 * s - 0.5
    return np.array([[s, 0, o], [0, s, o], [0, 0, 1.0]])


def crop_to_multiple(img: np.ndarray, k: int = 4) -> np.ndarray:
    h, w = img.shape[:2]
    return img[: h - h % k, : w - w % k]


def load_image_dir(root, max_side: int = 320) -> dict[str, np.ndarray]:
    """All images under ``root`` keyed by relative path, resized so the long
    side is ``<= max_side`` and cropped to multiples of 4.  Images smaller
    than 64x64 are rejected."""
    out = {}
    for dirpath, _, files in sorted(os.walk(root)):
        for f in sorted(files):
            if not f.lower().endswith(IMAGE_EXTS):
                continue
            path = os.path.join(dirpath, f)
            img = read_image(path)
            if min(img.shape[:2]) < MIN_SIDE:
                raise DataError(f"{path}: image smaller than {MIN_SIDE}x{MIN_SIDE}")
            img, _ = resize_long_side(img, max_side)
            out[os.path.relpath(path, root)] = crop_to_multiple(img)
    if not out:
        raise DataError(f"no images found under {root}")
    return out
