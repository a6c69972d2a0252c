"""Batch extraction of the native channels over a manifest."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from typing import Callable

import numpy as np

from ..data import Manifest
from ..imageproc import DecodeError, load_image
from . import gist, histogram, saliency
from .fvec import FeatureChannel

EXTRACTORS: dict[str, tuple[Callable[[np.ndarray], np.ndarray], int]] = {
    "lab_hist": (histogram.lab_hist_feature, histogram.DIM),
    "gist": (gist.color_gist, gist.DIM),
    "saliency": (saliency.gbvs_saliency, saliency.DIM),
}


def extract_image(path, channel: str) -> np.ndarray:
    fn, dim = EXTRACTORS[channel]
    vec = np.asarray(fn(load_image(path)), dtype=np.float64)
    if vec.shape != (dim,) or not np.all(np.isfinite(vec)):
        raise ValueError(f"{channel} extractor produced a bad vector for {path}")
    return vec


def _job(args):
    rid, path, channel = args
    try:
        return rid, extract_image(path, channel), None
    except (OSError, DecodeError, ValueError) as exc:
        return rid, None, f"{type(exc).__name__}: {exc}"


def extract_channel(
    manifest: Manifest,
    channel: str,
    workers: int = 1,
) -> tuple[FeatureChannel, list[tuple[str, str]]]:
    """Extract one native channel for every record.

    Returns the channel (rows ordered by id) and a list of ``(id, error)``
    for images that could not be read. Output does not depend on
    ``workers``.
    """
    if channel not in EXTRACTORS:
        raise ValueError(f"unknown native channel {channel!r}; expected one of {sorted(EXTRACTORS)}")
    dim = EXTRACTORS[channel][1]
    jobs = [(r.id, str(manifest.resolve(r)), channel) for r in sorted(manifest.records, key=lambda r: r.id)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_job, jobs, chunksize=8))
    else:
        results = [_job(j) for j in jobs]
    ids = [rid for rid, vec, _ in results if vec is not None]
    matrix = np.array([vec for _, vec, _ in results if vec is not None]).reshape(len(ids), dim)
    errors = [(rid, err) for rid, _, err in results if err is not None]
    return FeatureChannel(channel, dim, ids, matrix), errors
