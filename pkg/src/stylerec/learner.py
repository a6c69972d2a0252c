"""Linear classifiers trained by AdaGrad SGD with elastic-net penalties.

Each binary model minimizes::

    lambda1 * |w|_1 + lambda2 / 2 * |w|_2^2 + sum_i loss(y_i * w.x_i)

one example at a time. The L2 term enters the subgradient, the L1 term is
applied as a per-coordinate soft threshold after the adaptive step, which
is what produces exact zeros. The bias is an extra constant-1 coordinate
that is never penalized. Inputs are standardized with statistics of the
training rows; the statistics are stored in the model.
"""

from __future__ import annotations

import base64
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from itertools import product
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .data import Manifest, binarize_labels
from .features.fvec import FeatureChannel
from .seeding import rng_for

LOSSES = ("hinge", "logistic")
EPSILON = 1e-8
MODEL_FORMAT = "SMDL1"


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Hyperparams:
    lambda1: float = 0.0
    lambda2: float = 0.0
    loss: str = "hinge"
    eta0: float = 0.5
    epochs: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("regularization weights must be non-negative")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if not self.eta0 > 0:
            raise ValueError("eta0 must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")


def default_grid(seed: int = 0, epochs: int = 10) -> list[Hyperparams]:
    values = (0.0, 1e-7, 1e-5, 1e-3)
    return [
        Hyperparams(lambda1=l1, lambda2=l2, loss=loss, epochs=epochs, seed=seed)
        for loss, l1, l2 in product(LOSSES, values, values)
    ]


@dataclass
class OptimizerState:
    grad_sq_accum: np.ndarray
    step_count: int = 0
    epsilon: float = EPSILON

    @classmethod
    def zeros(cls, dim: int, epsilon: float = EPSILON) -> "OptimizerState":
        return cls(np.zeros(dim), 0, epsilon)


def loss_and_subgradient(loss: str, margin: float, y: float = 1.0) -> tuple[float, float]:
    """Loss at ``margin = y * w.x`` and its derivative with respect to w.x.

    The subgradient with respect to w is the returned scale times x. For
    hinge, a margin of exactly 1 counts as satisfied.
    """
    if loss == "hinge":
        if margin < 1.0:
            return 1.0 - margin, -y
        return 0.0, 0.0
    if loss == "logistic":
        return float(np.logaddexp(0.0, -margin)), float(-y * expit(-margin))
    raise ValueError(f"unknown loss {loss!r}")


def _step_inplace(G, w, g, eta0, lambda1, l1_mask, eps):
    G += g * g
    rate = eta0 / np.sqrt(G + eps)
    u = w - rate * g
    thresh = rate * lambda1
    if l1_mask is not None:
        thresh = thresh * l1_mask
    np.multiply(np.sign(u), np.maximum(np.abs(u) - thresh, 0.0), out=w)


def adagrad_step(
    state: OptimizerState,
    w: np.ndarray,
    g: np.ndarray,
    h: Hyperparams,
    l1_mask: np.ndarray | None = None,
) -> tuple[OptimizerState, np.ndarray]:
    """One composite AdaGrad update.

    ``g`` is the subgradient of the data loss plus the L2 term. Coordinates
    where ``l1_mask`` is 0 skip the soft threshold.
    """
    g = np.asarray(g, dtype=np.float64)
    w = np.array(w, dtype=np.float64)
    if g.shape != w.shape or state.grad_sq_accum.shape != w.shape:
        raise ValueError("dimension mismatch between state, weights and gradient")
    if not np.all(np.isfinite(g)):
        raise TrainingError(f"non-finite gradient at step {state.step_count}")
    G = state.grad_sq_accum.copy()
    _step_inplace(G, w, g, h.eta0, h.lambda1, l1_mask, state.epsilon)
    return OptimizerState(G, state.step_count + 1, state.epsilon), w


@dataclass
class LinearModel:
    class_name: str
    weights: np.ndarray
    bias: float = 0.0
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    mean: np.ndarray | None = None
    scale: np.ndarray | None = None
    channel: str = ""
    history: list[float] = field(default_factory=list, compare=False)

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    def standardize(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.mean is not None:
            x = x - self.mean
        if self.scale is not None:
            x = x / self.scale
        return x


def predict_score(model: LinearModel, x: np.ndarray) -> np.ndarray | float:
    """Decision value w.x + b for one vector or a matrix of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.dim:
        raise ValueError(f"feature dimension {x.shape[-1]} != model dimension {model.dim}")
    s = model.standardize(x) @ model.weights + model.bias
    return float(s) if np.ndim(s) == 0 else s


def standardization(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale <= 1e-12] = 1.0
    return mean, scale


def objective(model: LinearModel, X: np.ndarray, y: np.ndarray) -> float:
    """Regularized training objective, averaged over examples."""
    h = model.hyperparams
    m = np.asarray(y) * predict_score(model, X)
    if h.loss == "hinge":
        data = np.maximum(0.0, 1.0 - m)
    else:
        data = np.logaddexp(0.0, -m)
    w = model.weights
    reg = h.lambda1 * np.abs(w).sum() + 0.5 * h.lambda2 * (w @ w)
    return float(data.mean() + reg)


def train_binary(
    X: np.ndarray,
    y: np.ndarray,
    h: Hyperparams,
    class_name: str = "",
    standardize: bool = True,
    stats: tuple[np.ndarray, np.ndarray] | None = None,
) -> LinearModel:
    """Fit one binary model on rows of ``X`` with labels ``y`` in {+1, -1}.

    Weights start at zero; every epoch visits the examples in a fresh
    order drawn from ``h.seed`` and takes one AdaGrad step per example.
    ``stats`` overrides the (mean, scale) standardization.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError("X must be (n, d) and y must be (n,)")
    if not (np.any(y > 0) and np.any(y < 0)):
        raise TrainingError(f"class {class_name!r}: training data needs both labels")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValueError("labels must be +1 or -1")

    if stats is not None:
        mean, scale = stats
    elif standardize:
        mean, scale = standardization(X)
    else:
        mean, scale = None, None
    Z = X
    if mean is not None:
        Z = (Z - mean) / scale
    n, d = Z.shape
    Za = np.hstack([Z, np.ones((n, 1))])
    mask = np.ones(d + 1)
    mask[-1] = 0.0

    w = np.zeros(d + 1)
    G = np.zeros(d + 1)
    eps = EPSILON
    rng = rng_for(h.seed, "train_binary")
    hinge = h.loss == "hinge"
    history = []
    for epoch in range(h.epochs):
        order = rng.permutation(n)
        total = 0.0
        for i in order:
            x = Za[i]
            yi = y[i]
            m = yi * (x @ w)
            if hinge:
                if m < 1.0:
                    total += 1.0 - m
                    g = -yi * x
                else:
                    g = np.zeros(d + 1)
            else:
                total += float(np.logaddexp(0.0, -m))
                g = (-yi * expit(-m)) * x
            if h.lambda2:
                g = g + h.lambda2 * (w * mask)
            if not math.isfinite(m) or not np.all(np.isfinite(g)):
                raise TrainingError(f"class {class_name!r}: non-finite gradient in epoch {epoch}")
            _step_inplace(G, w, g, h.eta0, h.lambda1, mask, eps)
        history.append(total / n)

    return LinearModel(
        class_name=class_name,
        weights=w[:-1].copy(),
        bias=float(w[-1]),
        hyperparams=h,
        mean=mean,
        scale=scale,
        history=history,
    )


@dataclass
class MultiModel:
    """One binary model per class over a single feature channel."""

    channel: str
    classes: list[str]
    models: list[LinearModel]
    train_ids: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if len(self.classes) != len(self.models):
            raise ValueError("one model per class required")
        dims = {m.dim for m in self.models}
        if len(dims) > 1:
            raise ValueError("models disagree on feature dimension")

    @property
    def dim(self) -> int:
        return self.models[0].dim

    def scores(self, X: np.ndarray) -> np.ndarray:
        """(n, n_classes) decision values."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.column_stack([predict_score(m, X) for m in self.models])

    def score_channel(self, channel: FeatureChannel, ids: Sequence[str]) -> np.ndarray:
        return self.scores(channel.rows(ids))


def _split_ids(manifest: Manifest, split: str) -> list[str]:
    return [r.id for r in manifest.in_split(split)]


def train_one_vs_all(
    manifest: Manifest,
    channel: FeatureChannel,
    h: Hyperparams,
    split: str = "train",
) -> MultiModel:
    """Train one binary model per manifest class on ``split``."""
    ids = _split_ids(manifest, split)
    if not ids:
        raise TrainingError(f"split {split!r} is empty")
    X = channel.rows(ids)
    stats = standardization(X)
    models = []
    for cls in manifest.classes:
        y = np.array([lab for _, lab in binarize_labels(manifest, cls, split)], dtype=np.float64)
        try:
            model = train_binary(X, y, h, class_name=cls, stats=stats)
        except TrainingError as exc:
            raise TrainingError(f"[{cls}] {exc}") from exc
        model.channel = channel.name
        models.append(model)
    return MultiModel(channel.name, list(manifest.classes), models, tuple(sorted(ids)))


def _tie_key(h: Hyperparams, index: int):
    # max() over this key: larger lambda1, larger lambda2, hinge, earlier in grid
    return (h.lambda1, h.lambda2, h.loss == "hinge", -index)


def select_hyperparams(
    grid: Sequence[Hyperparams],
    manifest: Manifest,
    channel: FeatureChannel,
    seed: int = 0,
) -> tuple[Hyperparams, list[dict]]:
    """Pick the config with the best class-balanced mean AP on ``val``."""
    from .evaluation import balanced_mean_ap

    if not grid:
        raise ValueError("empty hyperparameter grid")
    val_ids = _split_ids(manifest, "val")
    if not val_ids:
        raise ValueError("validation split is empty")
    Xval = channel.rows(val_ids)
    table = []
    best = None
    for index, h in enumerate(grid):
        row = {"index": index, **asdict(h), "mean_ap": None, "error": None}
        try:
            mm = train_one_vs_all(manifest, channel, h)
            frag = balanced_mean_ap(mm.scores(Xval), val_ids, manifest, seed)
            row["mean_ap"] = frag.mean_ap
            key = (frag.mean_ap,) + _tie_key(h, index)
            if best is None or key > best[0]:
                best = (key, h)
        except (TrainingError, ValueError) as exc:
            row["error"] = str(exc)
        table.append(row)
    if best is None:
        raise TrainingError("every hyperparameter configuration failed")
    return best[1], table


# ---------------------------------------------------------------- model files

def _b64(a: np.ndarray | None) -> str | None:
    if a is None:
        return None
    return base64.b64encode(np.asarray(a, dtype="<f8").tobytes()).decode("ascii")


def _unb64(s: str | None) -> np.ndarray | None:
    if s is None:
        return None
    return np.frombuffer(base64.b64decode(s), dtype="<f8").astype(np.float64)


def model_to_dict(model: LinearModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "class": model.class_name,
        "channel": model.channel,
        "dim": model.dim,
        "hyperparams": asdict(model.hyperparams),
        "bias": model.bias,
        "weights": _b64(model.weights),
        "mean": _b64(model.mean),
        "scale": _b64(model.scale),
    }


def model_from_dict(obj: dict) -> LinearModel:
    if obj.get("format") != MODEL_FORMAT:
        raise ValueError(f"not an {MODEL_FORMAT} model: format={obj.get('format')!r}")
    w = _unb64(obj["weights"])
    if w.shape != (obj["dim"],):
        raise ValueError("weight payload does not match declared dim")
    return LinearModel(
        class_name=obj["class"],
        weights=w,
        bias=float(obj["bias"]),
        hyperparams=Hyperparams(**obj["hyperparams"]),
        mean=_unb64(obj.get("mean")),
        scale=_unb64(obj.get("scale")),
        channel=obj.get("channel", ""),
    )


def _dump(obj, path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _slug(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in name)


def save_multimodel(mm: MultiModel, directory: str | os.PathLike) -> list[Path]:
    """One ``<class>.smdl.json`` file per class plus ``index.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, (cls, model) in enumerate(zip(mm.classes, mm.models)):
        name = f"{i:03d}_{_slug(cls)}.smdl.json"
        _dump(model_to_dict(model), directory / name)
        files.append(name)
    _dump(
        {
            "format": MODEL_FORMAT + "-multi",
            "channel": mm.channel,
            "classes": mm.classes,
            "files": files,
            "train_ids": list(mm.train_ids),
        },
        directory / "index.json",
    )
    return [directory / f for f in files]


def load_multimodel(directory: str | os.PathLike) -> MultiModel:
    directory = Path(directory)
    with open(directory / "index.json", encoding="utf-8") as fh:
        index = json.load(fh)
    if index.get("format") != MODEL_FORMAT + "-multi":
        raise ValueError(f"{directory}: not a model directory")
    models = []
    for f in index["files"]:
        with open(directory / f, encoding="utf-8") as fh:
            models.append(model_from_dict(json.load(fh)))
    return MultiModel(index["channel"], list(index["classes"]), models, tuple(index.get("train_ids", ())))


def with_seed(h: Hyperparams, seed: int) -> Hyperparams:
    return replace(h, seed=seed)
