"""Graph-based visual saliency (GBVS) at a 32x32 working resolution.

Seven feature maps (intensity, red-green and blue-yellow opponency, four
Gabor orientations) are each turned into an activation map by taking the
equilibrium distribution of a Markov chain over map locations, where the
weight between two locations is their feature dissimilarity times a
Gaussian falloff in distance. A second chain, weighted by activation
instead of dissimilarity, concentrates mass on the strongest peaks. The
normalized maps are summed and the master map is flattened to 1024 values
summing to 1.
"""

from __future__ import annotations

import logging

import numpy as np
import scipy.fft as sfft

from ..imageproc import check_rgb, rgb_to_gray, to_work_size
from .gist import gabor_bank

log = logging.getLogger(__name__)

MAP_SIZE = 32
DIM = MAP_SIZE * MAP_SIZE
SIGMA_ACTIVATION = 0.15
SIGMA_NORMALIZATION = 0.06
MAX_ITER = 10_000
TOL = 1e-9
_ORIENT_PAD = 8


class ConvergenceError(RuntimeError):
    pass


def distance_kernel(height: int, width: int, sigma: float) -> np.ndarray:
    """exp(-d^2 / 2 sigma^2) between all pairs of grid locations (row-major)."""
    r, c = np.divmod(np.arange(height * width), width)
    d2 = (r[:, None] - r[None, :]) ** 2 + (c[:, None] - c[None, :]) ** 2
    return np.exp(-d2 / (2.0 * sigma**2))


def row_normalize(weights: np.ndarray) -> np.ndarray:
    """Row-stochastic matrix; all-zero rows become uniform rows."""
    w = np.asarray(weights, dtype=np.float64)
    sums = w.sum(axis=1, keepdims=True)
    n = w.shape[1]
    return np.where(sums > 0, w / np.where(sums > 0, sums, 1.0), 1.0 / n)


def activation_transition(fmap: np.ndarray, sigma: float) -> np.ndarray:
    """Transition matrix with weights |M(i) - M(j)| * distance falloff."""
    fmap = np.asarray(fmap, dtype=np.float64)
    v = fmap.reshape(-1)
    k = distance_kernel(*fmap.shape, sigma)
    return row_normalize(np.abs(v[:, None] - v[None, :]) * k)


def normalization_transition(act: np.ndarray, sigma: float) -> np.ndarray:
    """Transition matrix with weights A(j) * distance falloff."""
    act = np.asarray(act, dtype=np.float64)
    k = distance_kernel(*act.shape, sigma)
    return row_normalize(k * act.reshape(1, -1))


def equilibrium(p: np.ndarray, max_iter: int = MAX_ITER, tol: float = TOL) -> np.ndarray:
    """Stationary distribution of a row-stochastic matrix by power iteration.

    Iterates the lazy chain (P + I) / 2, which has the same stationary
    distribution but cannot oscillate on periodic chains. Convergence is an
    L1 change below ``tol``.
    """
    n = p.shape[0]
    lazy = 0.5 * (p + np.eye(n))
    pi = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        nxt = pi @ lazy
        nxt /= nxt.sum()
        if np.abs(nxt - pi).sum() < tol:
            return nxt
        pi = nxt
    raise ConvergenceError(f"power iteration did not converge in {max_iter} steps")


def _stationary_or_uniform(p: np.ndarray) -> np.ndarray:
    try:
        return equilibrium(p)
    except ConvergenceError:
        log.warning("saliency chain did not converge; using a uniform map")
        return np.full(p.shape[0], 1.0 / p.shape[0])


def _block_mean(x: np.ndarray, size: int) -> np.ndarray:
    f = x.shape[0] // size
    return x[: f * size, : f * size].reshape(size, f, size, f).mean(axis=(1, 3))


def feature_maps(img: np.ndarray) -> list[np.ndarray]:
    """The seven 32x32 feature maps of an RGB raster."""
    img = to_work_size(check_rgb(img))
    rgb = img.astype(np.float64) / 255.0
    gray = rgb_to_gray(img)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    peak = np.maximum(rgb.max(axis=2), 1e-3)
    rg = (r - g) / peak
    by = (b - np.minimum(r, g)) / peak
    small = [_block_mean(m, MAP_SIZE) for m in (gray, rg, by)]

    pad = _ORIENT_PAD
    x = np.pad(small[0], pad, mode="symmetric")
    bank = gabor_bank(x.shape[0], (4,))
    resp = np.abs(sfft.ifft2(sfft.fft2(x)[None] * bank, axes=(-2, -1)))
    small.extend(resp[:, pad:-pad, pad:-pad])
    return small


def gbvs_saliency(img: np.ndarray) -> np.ndarray:
    """1024-dimensional saliency map summing to 1."""
    master = np.zeros((MAP_SIZE, MAP_SIZE))
    for fmap in feature_maps(img):
        if np.ptp(fmap) <= 1e-12:
            # a flat map has nothing to activate or concentrate
            master += 1.0 / fmap.size
            continue
        act = _stationary_or_uniform(activation_transition(fmap, SIGMA_ACTIVATION * MAP_SIZE))
        act = act.reshape(fmap.shape)
        norm = _stationary_or_uniform(normalization_transition(act, SIGMA_NORMALIZATION * MAP_SIZE))
        master += norm.reshape(fmap.shape)
    flat = master.reshape(-1)
    return flat / flat.sum()
