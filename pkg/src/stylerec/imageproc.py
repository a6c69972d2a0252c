"""Decoding and the preprocessing shared by the feature extractors.

Images are numpy arrays: RGB rasters are ``(height, width, 3)`` uint8 in
non-linear sRGB, Lab rasters are ``(height, width, 3)`` float64.
"""

from __future__ import annotations

import io

import numpy as np
from PIL import Image, UnidentifiedImageError

WORK_SIZE = 256

# sRGB primaries to XYZ, D65 white, 2 degree observer
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_D65 = _RGB_TO_XYZ.sum(axis=1)


class DecodeError(ValueError):
    pass


def check_rgb(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"expected an (H, W, 3) raster, got shape {img.shape}")
    if img.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {img.dtype}")
    return img


def decode(data: bytes) -> np.ndarray:
    """Decode a JPEG or PNG payload into an 8-bit RGB raster."""
    try:
        with Image.open(io.BytesIO(data)) as im:
            if im.format not in ("JPEG", "PNG"):
                raise DecodeError(f"unsupported image format {im.format}")
            im.load()
            if im.mode in ("RGBA", "LA") or (im.mode == "P" and "transparency" in im.info):
                # composite onto white rather than silently dropping alpha
                rgba = im.convert("RGBA")
                bg = Image.new("RGBA", rgba.size, (255, 255, 255, 255))
                im = Image.alpha_composite(bg, rgba)
            return np.array(im.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DecodeError(f"cannot decode image: {exc}") from None


def load_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centers: output pixel i samples source coordinate (i+0.5)*s-0.5
    x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    x = np.clip(x, 0, n_in - 1)
    lo = np.floor(x).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = x - lo
    return lo, hi, frac


def resize(img: np.ndarray, w: int, h: int) -> np.ndarray:
    """Bilinear resize with half-pixel alignment, rounding half up."""
    img = check_rgb(img)
    if w < 1 or h < 1:
        raise ValueError("target size must be positive")
    src_h, src_w = img.shape[:2]
    if (src_w, src_h) == (w, h):
        return img.copy()
    f = img.astype(np.float64)
    y0, y1, fy = _axis_weights(src_h, h)
    x0, x1, fx = _axis_weights(src_w, w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = f[y0][:, x0] * (1 - fx) + f[y0][:, x1] * fx
    bot = f[y1][:, x0] * (1 - fx) + f[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    # snap values within float noise of an integer before rounding half up
    out = np.floor(np.round(out, 9) + 0.5)
    return np.clip(out, 0, 255).astype(np.uint8)


def center_crop(img: np.ndarray, side: int) -> np.ndarray:
    """Central ``side`` x ``side`` window; odd margins lose the extra
    row/column at the bottom/right."""
    img = check_rgb(img)
    h, w = img.shape[:2]
    if side < 1 or side > min(h, w):
        raise ValueError(f"crop side {side} does not fit a {w}x{h} image")
    top = (h - side) // 2
    left = (w - side) // 2
    return img[top : top + side, left : left + side].copy()


def srgb_to_linear(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)


def srgb_to_cielab(img: np.ndarray) -> np.ndarray:
    """sRGB bytes to CIELAB (D65, 2 degree observer)."""
    img = check_rgb(img)
    lin = srgb_to_linear(img / 255.0)
    xyz = lin @ _RGB_TO_XYZ.T
    t = xyz / _D65
    eps = (6 / 29) ** 3
    f = np.where(t > eps, np.cbrt(t), t / (3 * (6 / 29) ** 2) + 4 / 29)
    L = 116 * f[..., 1] - 16
    a = 500 * (f[..., 0] - f[..., 1])
    b = 200 * (f[..., 1] - f[..., 2])
    lab = np.stack([L, a, b], axis=-1)
    lab[..., 0] = np.clip(lab[..., 0], 0.0, 100.0)
    return lab


def rgb_to_gray(img: np.ndarray) -> np.ndarray:
    """Rec.601 luma of the non-linear sRGB values, scaled to [0, 1]."""
    img = check_rgb(img).astype(np.float64)
    return (0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]) / 255.0


def to_work_size(img: np.ndarray) -> np.ndarray:
    """Stretch to the 256x256 working square (aspect ratio not preserved)."""
    return resize(img, WORK_SIZE, WORK_SIZE)
