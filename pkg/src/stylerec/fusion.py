"""Second-stage late fusion and the content-conditioned expansion.

Stage 1 is one MultiModel per feature channel. Their decision values are
concatenated channel-major (all classes of channel 0, then channel 1, ...)
and a second OvA model is trained on that vector. In ``fusion_x_content``
mode the fused vector ``f`` is expanded with four aggregate content scores
``c`` to ``[f | c1*f | c2*f | c3*f | c4*f]``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import Manifest
from .features.fvec import FeatureChannel
from .learner import Hyperparams, MultiModel, load_multimodel, save_multimodel, train_one_vs_all

MODES = ("single", "fusion", "fusion_x_content")

VOC_CLASSES = (
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow",
    "diningtable", "dog", "horse", "motorbike", "person", "pottedplant", "sheep", "sofa",
    "train", "tvmonitor",
)
CONTENT_GROUPS: dict[str, tuple[str, ...]] = {
    "animals": ("bird", "cat", "cow", "dog", "horse", "sheep"),
    "vehicles": ("aeroplane", "bicycle", "boat", "bus", "car", "motorbike", "train"),
    "indoor": ("bottle", "chair", "diningtable", "pottedplant", "sofa", "tvmonitor"),
    "people": ("person",),
}
CONTENT_NAMES = tuple(CONTENT_GROUPS)


class LeakageError(ValueError):
    """Stage-1 models saw records outside the training split."""


def stage1_scores(
    models: Sequence[MultiModel],
    channels: Sequence[FeatureChannel],
    ids: Sequence[str],
) -> np.ndarray:
    """(len(ids), n_channels * n_classes) matrix of stage-1 decision values."""
    if len(models) != len(channels):
        raise ValueError("need exactly one channel per stage-1 model")
    blocks = []
    for mm, ch in zip(models, channels):
        if mm.channel != ch.name:
            raise ValueError(f"model for channel {mm.channel!r} given channel {ch.name!r}")
        blocks.append(mm.score_channel(ch, ids))
    if not blocks:
        raise ValueError("no stage-1 models")
    return np.hstack(blocks)


def load_content_scores(
    path: str | os.PathLike,
    aggregation: Mapping[str, Sequence[str]] = CONTENT_GROUPS,
) -> dict[str, np.ndarray]:
    """Read per-VOC-class scores and reduce them to one score per group.

    A group's score is the max of its member class scores, clipped to
    [0, 1]. Every line must carry all 20 VOC classes.
    """
    known = set(VOC_CLASSES)
    for group, members in aggregation.items():
        unknown = set(members) - known
        if unknown:
            raise ValueError(f"group {group!r} refers to unknown classes {sorted(unknown)}")
    out: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rid = str(obj["id"])
                scores = {k: float(v) for k, v in obj["scores"].items()}
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, AttributeError):
                raise ValueError(f"{path}:{lineno}: malformed content-score line") from None
            missing = known - set(scores)
            if missing:
                raise ValueError(f"{path}:{lineno}: missing VOC classes {sorted(missing)}")
            if not all(np.isfinite(list(scores.values()))):
                raise ValueError(f"{path}:{lineno}: non-finite score")
            out[rid] = np.clip([max(scores[c] for c in members) for members in aggregation.values()], 0.0, 1.0)
    return out


def outer_product_expand(fused: np.ndarray, content: np.ndarray) -> np.ndarray:
    """``[f | c1*f | ... | cG*f]`` for a vector or row-wise for matrices."""
    fused = np.asarray(fused, dtype=np.float64)
    content = np.asarray(content, dtype=np.float64)
    if fused.ndim == 1:
        return np.concatenate([fused, np.outer(content, fused).reshape(-1)])
    prod = content[:, :, None] * fused[:, None, :]
    return np.hstack([fused, prod.reshape(fused.shape[0], -1)])


def content_matrix(content: Mapping[str, np.ndarray], ids: Sequence[str]) -> np.ndarray:
    missing = [i for i in ids if i not in content]
    if missing:
        raise KeyError(f"content scores missing for {missing[:5]}")
    return np.array([content[i] for i in ids], dtype=np.float64).reshape(len(ids), -1)


@dataclass
class FusionModel:
    stage1: list[MultiModel]
    stage2: MultiModel | None
    mode: str
    content_names: tuple[str, ...] = CONTENT_NAMES
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not self.stage1:
            raise ValueError("no stage-1 models")
        classes = self.stage1[0].classes
        if any(mm.classes != classes for mm in self.stage1):
            raise ValueError("stage-1 models disagree on classes")
        if self.mode == "single":
            if len(self.stage1) != 1 or self.stage2 is not None:
                raise ValueError("single mode takes exactly one stage-1 model and no stage 2")
            return
        if self.stage2 is None:
            raise ValueError(f"mode {self.mode} requires a stage-2 model")
        expected = self.fused_dim * (len(self.content_names) + 1 if self.mode == "fusion_x_content" else 1)
        if self.stage2.dim != expected:
            raise ValueError(f"stage-2 dimension {self.stage2.dim} != {expected}")

    @property
    def classes(self) -> list[str]:
        return list(self.stage1[0].classes)

    @property
    def channels(self) -> list[str]:
        return [mm.channel for mm in self.stage1]

    @property
    def fused_dim(self) -> int:
        return sum(len(mm.classes) for mm in self.stage1)

    @property
    def needs_content(self) -> bool:
        return self.mode == "fusion_x_content"

    def features(
        self,
        channels: Mapping[str, FeatureChannel],
        ids: Sequence[str],
        content: Mapping[str, np.ndarray] | None = None,
    ) -> np.ndarray:
        """Stage-2 inputs for ``ids``."""
        missing = [c for c in self.channels if c not in channels]
        if missing:
            raise KeyError(f"feature channels missing: {missing}")
        fused = stage1_scores(self.stage1, [channels[c] for c in self.channels], ids)
        if self.mode == "fusion_x_content":
            if content is None:
                raise ValueError("fusion_x_content needs content scores")
            return outer_product_expand(fused, content_matrix(content, ids))
        return fused

    def scores(
        self,
        channels: Mapping[str, FeatureChannel],
        ids: Sequence[str],
        content: Mapping[str, np.ndarray] | None = None,
    ) -> np.ndarray:
        """(len(ids), n_classes) final decision values."""
        if self.mode == "single":
            mm = self.stage1[0]
            if mm.channel not in channels:
                raise KeyError(f"feature channel missing: {mm.channel}")
            return mm.score_channel(channels[mm.channel], ids)
        return self.stage2.scores(self.features(channels, ids, content))


def check_no_leakage(manifest: Manifest, stage1: Sequence[MultiModel]) -> None:
    train = {r.id for r in manifest.in_split("train")}
    for mm in stage1:
        if not mm.train_ids:
            raise LeakageError(f"stage-1 model {mm.channel!r} carries no training provenance")
        leaked = [i for i in mm.train_ids if i not in train]
        if leaked:
            raise LeakageError(
                f"stage-1 model {mm.channel!r} was trained on {len(leaked)} non-train ids, e.g. {leaked[:3]}"
            )


def fused_channel(
    stage1: Sequence[MultiModel],
    channels: Mapping[str, FeatureChannel],
    ids: Sequence[str],
    mode: str,
    content: Mapping[str, np.ndarray] | None = None,
) -> FeatureChannel:
    """Stage-2 inputs for ``ids`` packaged as a feature channel."""
    if mode not in ("fusion", "fusion_x_content"):
        raise ValueError(f"no stage-2 features in mode {mode!r}")
    fused = stage1_scores(stage1, [channels[mm.channel] for mm in stage1], ids)
    if mode == "fusion_x_content":
        if content is None:
            raise ValueError("fusion_x_content needs content scores")
        fused = outer_product_expand(fused, content_matrix(content, ids))
    return FeatureChannel(mode, fused.shape[1], list(ids), fused)


def train_fusion(
    manifest: Manifest,
    stage1: Sequence[MultiModel],
    channels: Mapping[str, FeatureChannel],
    mode: str,
    h: Hyperparams,
    content: Mapping[str, np.ndarray] | None = None,
) -> FusionModel:
    """Train the stage-2 OvA model on train-split stage-1 scores."""
    if mode not in ("fusion", "fusion_x_content"):
        raise ValueError(f"train_fusion mode must be fusion or fusion_x_content, got {mode!r}")
    check_no_leakage(manifest, stage1)
    train_ids = [r.id for r in manifest.in_split("train")]
    ch = fused_channel(stage1, channels, train_ids, mode, content)
    stage2 = train_one_vs_all(manifest, ch, h)
    return FusionModel(list(stage1), stage2, mode)


# ------------------------------------------------------------------ bundles

BUNDLE_FORMAT = "SMDL1-bundle"


def save_bundle(model: FusionModel, directory: str | os.PathLike) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stage1_dirs = []
    for i, mm in enumerate(model.stage1):
        sub = f"stage1_{i:02d}_{mm.channel}"
        save_multimodel(mm, directory / sub)
        stage1_dirs.append(sub)
    obj = {
        "format": BUNDLE_FORMAT,
        "mode": model.mode,
        "stage1": stage1_dirs,
        "stage2": None,
        "content_names": list(model.content_names),
        "meta": model.meta,
    }
    if model.stage2 is not None:
        save_multimodel(model.stage2, directory / "stage2")
        obj["stage2"] = "stage2"
    with open(directory / "bundle.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_bundle(directory: str | os.PathLike) -> FusionModel:
    directory = Path(directory)
    with open(directory / "bundle.json", encoding="utf-8") as fh:
        obj = json.load(fh)
    if obj.get("format") != BUNDLE_FORMAT:
        raise ValueError(f"{directory}: not a model bundle")
    stage1 = [load_multimodel(directory / d) for d in obj["stage1"]]
    stage2 = load_multimodel(directory / obj["stage2"]) if obj.get("stage2") else None
    return FusionModel(stage1, stage2, obj["mode"], tuple(obj.get("content_names", CONTENT_NAMES)), obj.get("meta", {}))
