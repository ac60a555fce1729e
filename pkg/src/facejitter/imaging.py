"""PNG input/output (8-bit sRGB via Pillow) and preview montages."""

from __future__ import annotations

import numpy as np
from PIL import Image


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=float) * 255.0), 0, 255).astype(np.uint8)


def read_png(path) -> np.ndarray:
    """RGB image as float64 in [0, 1], shape (H, W, 3)."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_png(path, image: np.ndarray) -> None:
    arr = to_uint8(image)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    # fixed encoder settings keep the bytes reproducible
    Image.fromarray(arr).save(path, format="PNG", optimize=False, compress_level=6)


def write_float_png(path, field: np.ndarray, lo: float | None = None, hi: float | None = None) -> None:
    """Grey-scale visualization of a scalar field (finite values mapped to [0, 1])."""
    f = np.asarray(field, dtype=float)
    finite = np.isfinite(f)
    lo = float(f[finite].min()) if lo is None and finite.any() else (lo or 0.0)
    hi = float(f[finite].max()) if hi is None and finite.any() else (hi or 1.0)
    scaled = np.where(finite, (f - lo) / (hi - lo if hi > lo else 1.0), 0.0)
    write_png(path, scaled)


def montage(images, columns: int = 6, pad: int = 4, fill: float = 1.0) -> np.ndarray:
    """Grid of equally sized RGB images, row-major."""
    imgs = [np.asarray(im, dtype=float) for im in images]
    if not imgs:
        raise ValueError("montage needs at least one image")
    h, w = imgs[0].shape[:2]
    if any(im.shape[:2] != (h, w) for im in imgs):
        raise ValueError("montage images must share dimensions")
    cols = min(columns, len(imgs))
    rows = -(-len(imgs) // cols)
    out = np.full((rows * h + (rows + 1) * pad, cols * w + (cols + 1) * pad, 3), fill)
    for k, im in enumerate(imgs):
        r, c = divmod(k, cols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        out[y:y + h, x:x + w] = im if im.ndim == 3 else im[..., None]
    return out
