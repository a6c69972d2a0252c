"""Joint L*a*b* color histogram."""

from __future__ import annotations

import numpy as np

from ..imageproc import srgb_to_cielab, to_work_size

L_BINS, A_BINS, B_BINS = 4, 14, 14
L_RANGE = (0.0, 100.0)
AB_RANGE = (-110.0, 110.0)
DIM = L_BINS * A_BINS * B_BINS


def _bin_index(v: np.ndarray, lo: float, hi: float, n: int) -> np.ndarray:
    idx = np.floor((np.clip(v, lo, hi) - lo) / (hi - lo) * n).astype(np.intp)
    return np.minimum(idx, n - 1)


def lab_histogram(lab: np.ndarray) -> np.ndarray:
    """784-bin joint histogram of a Lab raster, summing to 1.

    Bins are uniform over fixed ranges (values outside are clipped) and
    laid out L-major, then a*, then b*.
    """
    lab = np.asarray(lab, dtype=np.float64).reshape(-1, 3)
    if lab.shape[0] == 0:
        raise ValueError("empty image")
    li = _bin_index(lab[:, 0], *L_RANGE, L_BINS)
    ai = _bin_index(lab[:, 1], *AB_RANGE, A_BINS)
    bi = _bin_index(lab[:, 2], *AB_RANGE, B_BINS)
    flat = (li * A_BINS + ai) * B_BINS + bi
    hist = np.bincount(flat, minlength=DIM).astype(np.float64)
    return hist / lab.shape[0]


def lab_hist_feature(img: np.ndarray) -> np.ndarray:
    return lab_histogram(srgb_to_cielab(to_work_size(img)))
