"""Color GIST descriptor.

Follows the Oliva-Torralba reference layout used by the LEAR code: the
image is stretched to 256x256, each RGB channel is prefiltered (log,
whitening, local contrast normalization), padded by 32 pixels, filtered in
the frequency domain by 20 Gabor filters (3 scales with 8, 8 and 4
orientations) and the response magnitudes are averaged over a 4x4 grid.
Output layout: channel, then filter, then grid row, then grid column.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import scipy.fft as sfft

from ..imageproc import check_rgb, to_work_size

ORIENTATIONS = (8, 8, 4)
N_BLOCKS = 4
BOUNDARY = 32
PREFILTER_FC = 4
N_FILTERS = sum(ORIENTATIONS)
DIM = 3 * N_FILTERS * N_BLOCKS * N_BLOCKS


def _freq_grid(n: int) -> tuple[np.ndarray, np.ndarray]:
    f = np.arange(-n // 2, n // 2, dtype=np.float64)
    fx, fy = np.meshgrid(f, f)
    return np.fft.ifftshift(fx), np.fft.ifftshift(fy)


def filter_params(orientations=ORIENTATIONS) -> list[tuple[float, float, float, float]]:
    """(bandwidth, peak frequency, angular width, orientation) per filter."""
    params = []
    for scale, n_or in enumerate(orientations):
        for j in range(n_or):
            params.append(
                (0.35, 0.3 / 1.85**scale, 16 * n_or**2 / 32**2, np.pi / n_or * j)
            )
    return params


@lru_cache(maxsize=8)
def gabor_bank(n: int, orientations: tuple[int, ...] = ORIENTATIONS) -> np.ndarray:
    """Frequency-domain transfer functions, shape ``(n_filters, n, n)``.

    The DC coefficient is zeroed so every filter ignores constant input.
    Orientation 0 passes horizontal frequencies, i.e. vertical structure.
    """
    fx, fy = _freq_grid(n)
    fr = np.hypot(fx, fy)
    t = np.angle(fx + 1j * fy)
    params = filter_params(orientations)
    bank = np.empty((len(params), n, n))
    for i, (bw, f0, aw, theta) in enumerate(params):
        tr = t + theta
        tr = tr + 2 * np.pi * (tr < -np.pi) - 2 * np.pi * (tr > np.pi)
        bank[i] = np.exp(-10 * bw * (fr / n / f0 - 1) ** 2 - 2 * aw * np.pi * tr**2)
    bank[:, 0, 0] = 0.0
    bank.setflags(write=False)
    return bank


def prefilter(img: np.ndarray, fc: float = PREFILTER_FC) -> np.ndarray:
    """Log-domain whitening and local contrast normalization.

    ``img`` is ``(h, w, c)`` with values on a 0-255 scale.
    """
    img = np.log(np.asarray(img, dtype=np.float64) + 1.0)
    w = 5
    s1 = fc / np.sqrt(np.log(2))
    img = np.pad(img, ((w, w), (w, w), (0, 0)), mode="symmetric")
    sn, sm = img.shape[:2]
    n = max(sn, sm)
    n += n % 2
    img = np.pad(img, ((0, n - sn), (0, n - sm), (0, 0)), mode="symmetric")
    # the low-pass keeps DC, so removing any per-channel constant leaves
    # ``out`` unchanged; using a pixel value makes flat channels exactly zero
    img = img - img[:1, :1]
    fx, fy = _freq_grid(n)
    gf = np.exp(-(fx**2 + fy**2) / s1**2)
    low = np.real(sfft.ifft2(sfft.fft2(img, axes=(0, 1)) * gf[..., None], axes=(0, 1)))
    out = img - low
    energy = sfft.ifft2(sfft.fft2(out.mean(axis=2) ** 2) * gf)
    localstd = np.sqrt(np.abs(energy))
    out = out / (0.2 + localstd[..., None])
    return out[w : sn - w, w : sm - w]


def block_means(x: np.ndarray, n_blocks: int = N_BLOCKS) -> np.ndarray:
    """Mean over an ``n_blocks`` x ``n_blocks`` grid of the first two axes."""
    rows = np.linspace(0, x.shape[0], n_blocks + 1).astype(int)
    cols = np.linspace(0, x.shape[1], n_blocks + 1).astype(int)
    out = np.empty((n_blocks, n_blocks) + x.shape[2:])
    for i in range(n_blocks):
        for j in range(n_blocks):
            out[i, j] = x[rows[i] : rows[i + 1], cols[j] : cols[j + 1]].mean(axis=(0, 1))
    return out


def filter_responses(prefiltered: np.ndarray, orientations=ORIENTATIONS) -> np.ndarray:
    """Gabor response magnitudes, shape ``(c, n_filters, h, w)``."""
    x = np.pad(prefiltered, ((BOUNDARY, BOUNDARY), (BOUNDARY, BOUNDARY), (0, 0)), mode="symmetric")
    h, w = x.shape[:2]
    if h != w:
        raise ValueError("GIST expects a square image")
    bank = gabor_bank(h, tuple(orientations))
    spec = sfft.fft2(x, axes=(0, 1)).transpose(2, 0, 1)
    resp = np.abs(sfft.ifft2(spec[:, None] * bank[None], axes=(-2, -1)))
    return resp[..., BOUNDARY : h - BOUNDARY, BOUNDARY : w - BOUNDARY]


def color_gist(img: np.ndarray) -> np.ndarray:
    """960-dimensional color GIST of an RGB raster."""
    img = to_work_size(check_rgb(img)).astype(np.float64)
    resp = filter_responses(prefilter(img))
    cells = block_means(resp.transpose(2, 3, 0, 1))  # (4, 4, c, filters)
    return cells.transpose(2, 3, 0, 1).reshape(-1)
