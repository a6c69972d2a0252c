"""Evaluation protocol: class-balanced AP, label-balanced accuracy,
confusion matrices and content/style correlation.

AP is computed on a subset of the evaluated split in which every class has
the same number of records (grouped by primary label), so a random ranker
scores about 1/K. Accuracy is computed per class on a subset balanced by
the binary label, so chance is 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import Manifest, balanced_subset, class_balanced_ids
from .seeding import derive_seed

REPORT_FORMAT = "EVAL1"


def _order(scores: np.ndarray, tiebreak: np.ndarray | None) -> np.ndarray:
    if tiebreak is None:
        tiebreak = np.arange(len(scores))
    return np.lexsort((tiebreak, -scores))


def average_precision(
    scores: Sequence[float],
    labels: Sequence[int],
    ids: Sequence[str] | np.ndarray | None = None,
) -> float:
    """Non-interpolated AP: mean of precision at the rank of each positive.

    Ties in score are ranked by ascending id (or input position when no ids
    are given).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D and the same length")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    tiebreak = None
    if ids is not None:
        ids = np.asarray(ids)
        tiebreak = ids if ids.dtype.kind in "iu" else np.argsort(np.argsort(ids, kind="stable"), kind="stable")
    hits = labels[_order(scores, tiebreak)] > 0
    n_pos = int(hits.sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive")
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, n_pos + 1) / ranks))


@dataclass
class APFragment:
    per_class_ap: dict[str, float]
    mean_ap: float
    subset_ids: list[str]
    seed: int


def balanced_mean_ap(
    scores: np.ndarray,
    ids: Sequence[str],
    manifest: Manifest,
    seed: int,
    per_class: int | None = None,
) -> APFragment:
    """Per-class AP on a class-balanced subset of ``ids``.

    ``scores`` is ``(len(ids), K)`` in manifest class order. Every class
    must have at least one record among ``ids``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    ids = list(ids)
    if scores.shape != (len(ids), len(manifest.classes)):
        raise ValueError(f"scores shape {scores.shape} != ({len(ids)}, {len(manifest.classes)})")
    wanted = set(ids)
    sub = Manifest(manifest.classes, [r for r in manifest.records if r.id in wanted], manifest.source)
    chosen = class_balanced_ids(sub, None, derive_seed(seed, "ap_subset"), per_class)
    row = {rid: i for i, rid in enumerate(ids)}
    idx = np.array([row[r] for r in chosen])
    rank = np.argsort(np.argsort(np.array(chosen), kind="stable"), kind="stable")
    records = manifest.by_id()
    per_class = {}
    for k, cls in enumerate(manifest.classes):
        labels = np.array([1 if cls in records[r].labels else -1 for r in chosen])
        per_class[cls] = average_precision(scores[idx, k], labels, rank)
    return APFragment(per_class, float(np.mean(list(per_class.values()))), chosen, seed)


def tune_threshold(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Threshold maximizing balanced accuracy of ``score > t``.

    Candidates are midpoints between consecutive distinct scores plus one
    point below and above the range; the smallest best candidate wins.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels) > 0
    if y.all() or not y.any():
        raise ValueError("threshold tuning needs both labels")
    u = np.unique(s)
    cands = np.concatenate([[u[0] - 1.0], (u[:-1] + u[1:]) / 2, [u[-1] + 1.0]])
    pred = s[None, :] > cands[:, None]
    tpr = (pred & y).sum(axis=1) / y.sum()
    tnr = (~pred & ~y).sum(axis=1) / (~y).sum()
    return float(cands[np.argmax(tpr + tnr)])


def balanced_accuracy(
    scores: Sequence[float],
    labels: Sequence[int],
    seed: int,
    threshold: float = 0.0,
    ids: Sequence[str] | None = None,
) -> float:
    """Accuracy of ``score > threshold`` on a label-balanced subsample."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if ids is None:
        ids = [str(i) for i in range(len(scores))]
    pos = {rid: i for i, rid in enumerate(ids)}
    pairs = balanced_subset(list(zip(ids, labels.tolist())), seed)
    idx = np.array([pos[rid] for rid, _ in pairs])
    pred = scores[idx] > threshold
    return float(np.mean(pred == (labels[idx] > 0)))


def confusion_matrix(
    scores: np.ndarray,
    ids: Sequence[str],
    manifest: Manifest,
) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalized confusion matrix and the ground-truth prior.

    Prediction is the argmax over class scores (lowest index on ties). A
    record with several labels contributes one row entry per label.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if len(ids) == 0:
        raise ValueError("cannot build a confusion matrix from no records")
    K = len(manifest.classes)
    records = manifest.by_id()
    counts = np.zeros((K, K))
    pred = np.argmax(scores, axis=1)
    for i, rid in enumerate(ids):
        labels = records[rid].labels
        if not labels:
            raise ValueError(f"record {rid!r} has no label")
        for k, cls in enumerate(manifest.classes):
            if cls in labels:
                counts[k, pred[i]] += 1
    totals = counts.sum(axis=1)
    if np.any(totals == 0):
        missing = [c for c, t in zip(manifest.classes, totals) if t == 0]
        raise ValueError(f"no evaluated records for classes {missing}")
    return counts / totals[:, None], totals / totals.sum()


def pearson(a: np.ndarray, b: np.ndarray) -> float | None:
    """Pearson r, or None when either series has zero variance."""
    a = np.asarray(a, dtype=np.float64) - np.mean(a)
    b = np.asarray(b, dtype=np.float64) - np.mean(b)
    den = np.sqrt((a @ a) * (b @ b))
    if den == 0:
        return None
    return float((a @ b) / den)


@dataclass
class Correlation:
    rows: list[str]
    columns: list[str]
    matrix: list[list[float]]
    zero_variance: list[list[bool]]


def content_style_correlation(
    content: Mapping[str, Sequence[float]],
    content_names: Sequence[str],
    manifest: Manifest,
    ids: Sequence[str] | None = None,
) -> Correlation:
    """Correlation of each content score series with each binary style series.

    Zero-variance pairs are recorded as 0 and flagged.
    """
    if ids is None:
        ids = [r.id for r in manifest.records if r.id in content]
    missing = [rid for rid in ids if rid not in content]
    if missing:
        raise KeyError(f"content scores missing for {missing[:5]}")
    C = np.array([content[rid] for rid in ids], dtype=np.float64).reshape(len(ids), len(content_names))
    records = manifest.by_id()
    mat, flags = [], []
    for g in range(len(content_names)):
        row, frow = [], []
        for cls in manifest.classes:
            y = np.array([1.0 if cls in records[rid].labels else 0.0 for rid in ids])
            r = pearson(C[:, g], y)
            row.append(0.0 if r is None else r)
            frow.append(r is None)
        mat.append(row)
        flags.append(frow)
    return Correlation(list(content_names), list(manifest.classes), mat, flags)


@dataclass
class EvalReport:
    classes: list[str]
    per_class_ap: dict[str, float]
    mean_ap: float
    per_class_accuracy: dict[str, float]
    mean_accuracy: float
    confusion: list[list[float]]
    prior: list[float]
    thresholds: dict[str, float] = field(default_factory=dict)
    correlation: Correlation | None = None
    seeds: dict[str, int] = field(default_factory=dict)
    subset_sizes: dict[str, int] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.classes:
            raise ValueError("report has no classes")
        for name in ("per_class_ap", "per_class_accuracy"):
            d = getattr(self, name)
            if list(d) != list(self.classes):
                raise ValueError(f"{name} does not cover the report classes in order")
            if any(not (0.0 <= v <= 1.0) for v in d.values()):
                raise ValueError(f"{name} values must lie in [0, 1]")
        conf = np.asarray(self.confusion, dtype=np.float64)
        K = len(self.classes)
        if conf.shape != (K, K) or len(self.prior) != K:
            raise ValueError("confusion matrix / prior shape does not match classes")
        if np.any(conf < 0) or np.any(np.abs(conf.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("confusion rows must be non-negative and sum to 1")


def evaluate(
    test_scores: np.ndarray,
    test_ids: Sequence[str],
    manifest: Manifest,
    seed: int,
    val_scores: np.ndarray | None = None,
    val_ids: Sequence[str] | None = None,
    content: Mapping[str, Sequence[float]] | None = None,
    content_names: Sequence[str] = (),
    meta: Mapping[str, str] | None = None,
) -> EvalReport:
    """Full report from score matrices (rows = ids, columns = classes).

    Accuracy thresholds are tuned per class on the validation scores when
    given, otherwise fixed at 0.
    """
    test_scores = np.asarray(test_scores, dtype=np.float64)
    test_ids = list(test_ids)
    records = manifest.by_id()
    frag = balanced_mean_ap(test_scores, test_ids, manifest, seed)
    row = {rid: i for i, rid in enumerate(test_ids)}
    sub_idx = [row[r] for r in frag.subset_ids]
    confusion, prior = confusion_matrix(test_scores[sub_idx], frag.subset_ids, manifest)

    thresholds, accuracy = {}, {}
    for k, cls in enumerate(manifest.classes):
        t = 0.0
        if val_scores is not None and val_ids is not None:
            vy = [1 if cls in records[r].labels else -1 for r in val_ids]
            if len(set(vy)) == 2:
                t = tune_threshold(np.asarray(val_scores)[:, k], vy)
        thresholds[cls] = t
        ty = [1 if cls in records[r].labels else -1 for r in test_ids]
        accuracy[cls] = balanced_accuracy(test_scores[:, k], ty, derive_seed(seed, "accuracy", cls), t, test_ids)

    corr = None
    if content is not None:
        corr = content_style_correlation(content, content_names, manifest, [r for r in test_ids if r in content])

    return EvalReport(
        classes=list(manifest.classes),
        per_class_ap=frag.per_class_ap,
        mean_ap=frag.mean_ap,
        per_class_accuracy=accuracy,
        mean_accuracy=float(np.mean(list(accuracy.values()))),
        confusion=confusion.tolist(),
        prior=prior.tolist(),
        thresholds=thresholds,
        correlation=corr,
        seeds={"seed": seed},
        subset_sizes={"ap_subset": len(frag.subset_ids), "evaluated": len(test_ids)},
        meta=dict(meta or {}),
    )
