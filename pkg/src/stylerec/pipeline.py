"""End-to-end training, evaluation and ranking over loaded inputs.

These functions are what the CLI commands call once files are parsed.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, replace
from typing import Mapping, Sequence

import numpy as np

from .data import Manifest
from .evaluation import EvalReport, evaluate
from .features.fvec import FeatureChannel
from .fusion import FusionModel, fused_channel, train_fusion
from .learner import Hyperparams, select_hyperparams, train_one_vs_all
from .seeding import derive_seed

log = logging.getLogger(__name__)


def fit(
    manifest: Manifest,
    channels: Sequence[FeatureChannel],
    mode: str,
    grid: Sequence[Hyperparams],
    seed: int = 0,
    content: Mapping[str, np.ndarray] | None = None,
) -> tuple[FusionModel, list[dict]]:
    """Select hyperparameters on val and train the final models on train.

    Each stage-1 channel gets its own validation sweep; in the fusion
    modes the stage-2 model gets one more sweep over the fused features.
    Returns the model and the concatenated validation table (one row per
    stage, channel and config).
    """
    if mode == "single" and len(channels) != 1:
        raise ValueError("single mode takes exactly one feature channel")
    if mode == "fusion_x_content" and content is None:
        raise ValueError("fusion_x_content needs content scores")
    table: list[dict] = []
    stage1 = []
    for ch in channels:
        g = [replace(h, seed=derive_seed(seed, "train", ch.name)) for h in grid]
        best, rows = select_hyperparams(g, manifest, ch, derive_seed(seed, "select", ch.name))
        table.extend({"stage": 1, "channel": ch.name, **r} for r in rows)
        log.info("channel %s: selected %s", ch.name, best)
        stage1.append(train_one_vs_all(manifest, ch, best))
    if mode == "single":
        return FusionModel(stage1, None, "single"), table

    by_name = {ch.name: ch for ch in channels}
    tv_ids = [r.id for r in manifest.records if r.split in ("train", "val")]
    fused = fused_channel(stage1, by_name, tv_ids, mode, content)
    g = [replace(h, seed=derive_seed(seed, "train", mode)) for h in grid]
    best, rows = select_hyperparams(g, manifest, fused, derive_seed(seed, "select", mode))
    table.extend({"stage": 2, "channel": mode, **r} for r in rows)
    model = train_fusion(manifest, stage1, by_name, mode, best, content)
    model.meta["stage2_hyperparams"] = asdict(best)
    return model, table


def evaluate_model(
    model: FusionModel,
    manifest: Manifest,
    channels: Mapping[str, FeatureChannel],
    seed: int = 0,
    split: str = "test",
    content: Mapping[str, np.ndarray] | None = None,
) -> EvalReport:
    if model.classes != manifest.classes:
        raise ValueError("model classes do not match the manifest classes")
    ids = [r.id for r in manifest.in_split(split)]
    if not ids:
        raise ValueError(f"split {split!r} is empty")
    scores = model.scores(channels, ids, content)
    val_ids = [r.id for r in manifest.in_split("val")] if split != "val" else []
    val_scores = model.scores(channels, val_ids, content) if val_ids else None
    return evaluate(
        scores,
        ids,
        manifest,
        seed,
        val_scores=val_scores,
        val_ids=val_ids or None,
        content=content,
        content_names=model.content_names,
        meta={"mode": model.mode, "channels": ",".join(model.channels), "split": split},
    )


def rank_by_style(
    model: FusionModel,
    channels: Mapping[str, FeatureChannel],
    ids: Sequence[str],
    style: str,
    content: Mapping[str, np.ndarray] | None = None,
) -> list[tuple[str, float]]:
    """All ``ids`` ordered by descending style score, ties by ascending id."""
    if style not in model.classes:
        raise KeyError(f"unknown style {style!r}")
    ids = list(ids)
    if not ids:
        return []
    scores = model.scores(channels, ids, content)[:, model.classes.index(style)]
    return sorted(zip(ids, scores.tolist()), key=lambda t: (-t[1], t[0]))
