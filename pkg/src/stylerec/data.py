"""Dataset manifests, label binarization, deterministic splits and
balanced subsampling.

Manifest files are JSON Lines: a header object ``{"classes": [...],
"source": "..."}`` followed by one object per record with ``id``, ``path``,
``labels`` and optionally ``caption`` and ``split``.
"""

from __future__ import annotations

import json
import os
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .seeding import rng_for, stable_key

SPLITS = ("train", "val", "test", "unassigned")


class ManifestError(ValueError):
    """Raised for malformed or inconsistent manifests."""


@dataclass(frozen=True)
class ImageRecord:
    id: str
    path: str
    labels: frozenset[str] = frozenset()
    split: str = "unassigned"
    caption: str | None = None


@dataclass
class Manifest:
    classes: list[str]
    records: list[ImageRecord]
    source: str = ""
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        validate(self)

    def resolve(self, record: ImageRecord) -> Path:
        p = Path(record.path)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p

    def in_split(self, split: str | None) -> list[ImageRecord]:
        if split is None or split == "all":
            return list(self.records)
        if split not in SPLITS:
            raise ManifestError(f"unknown split {split!r}")
        return [r for r in self.records if r.split == split]

    def primary_label(self, record: ImageRecord) -> str | None:
        """First of the record's labels in class-vocabulary order."""
        for c in self.classes:
            if c in record.labels:
                return c
        return None

    def by_id(self) -> dict[str, ImageRecord]:
        return {r.id: r for r in self.records}


def validate(manifest: Manifest) -> None:
    classes = manifest.classes
    if not classes:
        raise ManifestError("manifest declares no classes")
    if len(set(classes)) != len(classes):
        raise ManifestError("duplicate class names in manifest header")
    vocab = set(classes)
    seen: set[str] = set()
    for r in manifest.records:
        if r.id in seen:
            raise ManifestError(f"duplicate record id {r.id!r}")
        seen.add(r.id)
        unknown = r.labels - vocab
        if unknown:
            raise ManifestError(f"record {r.id!r} has unknown labels {sorted(unknown)}")
        if r.split not in SPLITS:
            raise ManifestError(f"record {r.id!r} has unknown split {r.split!r}")


def _parse_record(obj: dict, lineno: int) -> ImageRecord:
    try:
        rid = obj["id"]
        path = obj["path"]
    except KeyError as exc:
        raise ManifestError(f"line {lineno}: missing field {exc.args[0]!r}") from None
    labels = obj.get("labels", [])
    if not isinstance(rid, str) or not isinstance(path, str) or not isinstance(labels, list):
        raise ManifestError(f"line {lineno}: bad field types")
    return ImageRecord(
        id=rid,
        path=path,
        labels=frozenset(labels),
        split=obj.get("split", "unassigned"),
        caption=obj.get("caption"),
    )


def load_manifest(path: str | os.PathLike) -> Manifest:
    path = Path(path)
    header = None
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc.msg}") from None
            if not isinstance(obj, dict):
                raise ManifestError(f"{path}:{lineno}: expected a JSON object")
            if header is None:
                if "classes" not in obj or not isinstance(obj["classes"], list):
                    raise ManifestError(f"{path}: first line must be a header with 'classes'")
                header = obj
            else:
                records.append(_parse_record(obj, lineno))
    if header is None:
        raise ManifestError(f"{path}: empty manifest file")
    return Manifest(
        classes=list(header["classes"]),
        records=records,
        source=str(header.get("source", "")),
        root=path.parent,
    )


def dump_manifest(manifest: Manifest, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"classes": manifest.classes, "source": manifest.source}) + "\n")
        for r in manifest.records:
            obj = {"id": r.id, "path": r.path, "labels": [c for c in manifest.classes if c in r.labels]}
            if r.split != "unassigned":
                obj["split"] = r.split
            if r.caption is not None:
                obj["caption"] = r.caption
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def _quotas(n: int, fractions: Sequence[float]) -> list[int]:
    # largest-remainder rounding; ties go to the earlier split
    raw = [n * f for f in fractions]
    base = [int(np.floor(x)) for x in raw]
    left = n - sum(base)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[:left]:
        base[i] += 1
    return base


def split_dataset(
    manifest: Manifest,
    seed: int,
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2),
) -> Manifest:
    """Assign every record to train/val/test, stratified by primary label.

    Within a stratum records are ordered by a hash of ``(seed, id)`` and cut
    according to largest-remainder quotas, so each stratum's split sizes are
    within one record of the requested fractions.
    """
    if not manifest.records:
        raise ManifestError("cannot split an empty manifest")
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValueError("fractions must be three positive numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")

    strata: dict[str | None, list[ImageRecord]] = defaultdict(list)
    for r in manifest.records:
        strata[manifest.primary_label(r)].append(r)

    assigned: dict[str, str] = {}
    for members in strata.values():
        members = sorted(members, key=lambda r: (stable_key(seed, r.id), r.id))
        q_train, q_val, _ = _quotas(len(members), fractions)
        for i, r in enumerate(members):
            assigned[r.id] = "train" if i < q_train else "val" if i < q_train + q_val else "test"

    return replace(manifest, records=[replace(r, split=assigned[r.id]) for r in manifest.records])


def binarize_labels(manifest: Manifest, cls: str, split: str | None = None) -> list[tuple[str, int]]:
    """(id, +1/-1) pairs; a missing label counts as a negative."""
    if cls not in manifest.classes:
        raise ManifestError(f"unknown class {cls!r}")
    return [(r.id, 1 if cls in r.labels else -1) for r in manifest.in_split(split)]


def balanced_subset(pairs: Sequence[tuple[str, int]], seed: int) -> list[tuple[str, int]]:
    """Equal numbers of positives and negatives (the minority count of each).

    Selected pairs keep their input order.
    """
    pos = [i for i, (_, y) in enumerate(pairs) if y > 0]
    neg = [i for i, (_, y) in enumerate(pairs) if y <= 0]
    if not pos or not neg:
        raise ValueError("balanced_subset needs at least one positive and one negative")
    k = min(len(pos), len(neg))
    rng = rng_for(seed, "balanced_subset")
    keep = np.concatenate([rng.choice(pos, size=k, replace=False), rng.choice(neg, size=k, replace=False)])
    return [pairs[i] for i in np.sort(keep)]


def class_balanced_ids(
    manifest: Manifest,
    split: str | None,
    seed: int,
    per_class: int | None = None,
) -> list[str]:
    """Ids of a subset in which every class has the same number of records.

    Records are grouped by primary label; each group is subsampled to the
    smallest group size (or ``per_class`` if given and smaller). Unlabeled
    records are excluded. The returned ids keep manifest order.
    """
    groups: dict[str, list[str]] = {c: [] for c in manifest.classes}
    for r in manifest.in_split(split):
        p = manifest.primary_label(r)
        if p is not None:
            groups[p].append(r.id)
    empty = [c for c, ids in groups.items() if not ids]
    if empty:
        raise ManifestError(f"classes without records in split {split!r}: {empty}")
    k = min(len(ids) for ids in groups.values())
    if per_class is not None:
        k = min(k, per_class)
    rng = rng_for(seed, "class_balanced")
    chosen: set[str] = set()
    for c in manifest.classes:
        ids = groups[c]
        chosen.update(ids[i] for i in rng.choice(len(ids), size=k, replace=False))
    return [r.id for r in manifest.records if r.id in chosen]


def split_counts(manifest: Manifest) -> dict[str, int]:
    counts = dict.fromkeys(SPLITS, 0)
    for r in manifest.records:
        counts[r.split] += 1
    return counts


def make_manifest(
    classes: Iterable[str],
    rows: Iterable[tuple[str, str, Iterable[str]]],
    source: str = "",
) -> Manifest:
    """Convenience constructor from ``(id, path, labels)`` tuples."""
    return Manifest(
        classes=list(classes),
        records=[ImageRecord(i, p, frozenset(l)) for i, p, l in rows],
        source=source,
    )
