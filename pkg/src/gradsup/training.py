"""Optimizers and the combined-objective training loop."""

from __future__ import annotations

import csv
import json
import os
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from .autodiff import (
    DiffValue,
    binary_cross_entropy_from_logit,
    parameter_gradient,
    softmax_cross_entropy_from_logits,
)
from .data import Dataset, Example
from .evaluation import resolve_task, validation_metric
from .models import ModelParams, encode_batch, init_model, logits
from .objective import CounterfactualPair, GsConfig, build_terms, combined_loss, terms_gs_loss

OPTIMIZERS = ("adadelta", "sgd")


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, what: str):
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}: {what}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.  ``lam`` is read from (and written to) ``gs``."""

    optimizer: str = "adadelta"
    lr: float = 1.0
    rho_decay: float = 0.95
    adadelta_eps: float = 1e-6
    batch_size: int = 32
    max_epochs: int = 30
    patience: int = 10
    gs: GsConfig = field(default_factory=GsConfig)
    seed: int = 0
    ensemble_size: int = 1
    warmup_epochs: int = 0
    task: str = "auto"

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.patience < 0 or self.max_epochs < 0 or self.warmup_epochs < 0:
            raise ValueError("patience, max_epochs and warmup_epochs must be non-negative")
        if self.lr <= 0 or self.adadelta_eps <= 0 or not 0 <= self.rho_decay < 1:
            raise ValueError("lr and adadelta_eps must be positive and rho_decay in [0, 1)")
        if self.ensemble_size < 1:
            raise ValueError("ensemble size must be at least 1")

    @property
    def lam(self) -> float:
        return self.gs.lam

    def with_lam(self, lam: float) -> "TrainConfig":
        return replace(self, gs=replace(self.gs, lam=lam))


@dataclass
class TrainHistory:
    main_loss: list[float] = field(default_factory=list)
    gs_loss: list[float] = field(default_factory=list)
    val_metric: list[float] = field(default_factory=list)

    @property
    def chosen_epoch(self) -> int:
        """Index of the selected epoch, or -1 before any epoch ran."""
        return choose_epoch(self.val_metric)

    def __len__(self) -> int:
        return len(self.val_metric)

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "main_loss", "gs_loss", "val_metric"])
            for epoch, row in enumerate(zip(self.main_loss, self.gs_loss, self.val_metric)):
                writer.writerow([epoch, *(repr(float(v)) for v in row)])


def choose_epoch(metrics: Sequence[float]) -> int:
    """Argmax of ``metrics``; the earliest epoch wins ties.  NaN never wins."""
    best, best_value = -1, -np.inf
    for i, m in enumerate(metrics):
        if m > best_value:
            best, best_value = i, m
    if best < 0 and len(metrics):
        return 0
    return best


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


def _as_arrays(params) -> list[np.ndarray]:
    return params.arrays() if isinstance(params, ModelParams) else [np.asarray(p, dtype=np.float64) for p in params]


def _rewrap(params, arrays: list[np.ndarray]):
    return params.with_arrays(arrays) if isinstance(params, ModelParams) else arrays


def _check_shapes(arrays, grads) -> None:
    if len(arrays) != len(grads):
        raise ValueError(f"{len(grads)} gradients for {len(arrays)} parameters")
    for p, g in zip(arrays, grads):
        if np.shape(g) != p.shape:
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")


def sgd_step(params, grads, lr: float):
    """``theta - lr * g`` for every parameter array."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    arrays = _as_arrays(params)
    _check_shapes(arrays, grads)
    return _rewrap(params, [p - lr * np.asarray(g) for p, g in zip(arrays, grads)])


@dataclass(frozen=True)
class AdadeltaState:
    sq_grad: tuple[np.ndarray, ...]
    sq_delta: tuple[np.ndarray, ...]

    @classmethod
    def zeros_like(cls, arrays) -> "AdadeltaState":
        zeros = tuple(np.zeros_like(a, dtype=np.float64) for a in arrays)
        return cls(zeros, zeros)


def adadelta_step(params, grads, state: AdadeltaState | None = None, rho: float = 0.95, eps: float = 1e-6):
    """One AdaDelta update; returns ``(params, state)``.  A fresh state is zeros."""
    if eps <= 0:
        raise ValueError("AdaDelta epsilon must be positive")
    arrays = _as_arrays(params)
    _check_shapes(arrays, grads)
    if state is None:
        state = AdadeltaState.zeros_like(arrays)
    _check_shapes(arrays, state.sq_grad)
    new_params, sq_grad, sq_delta = [], [], []
    for p, g, eg, ed in zip(arrays, grads, state.sq_grad, state.sq_delta):
        g = np.asarray(g, dtype=np.float64)
        eg = rho * eg + (1 - rho) * g * g
        delta = -np.sqrt(ed + eps) / np.sqrt(eg + eps) * g
        ed = rho * ed + (1 - rho) * delta * delta
        new_params.append(p + delta)
        sq_grad.append(eg)
        sq_delta.append(ed)
    return _rewrap(params, new_params), AdadeltaState(tuple(sq_grad), tuple(sq_delta))


# ---------------------------------------------------------------------------
# Losses and the training loop
# ---------------------------------------------------------------------------


def batch_inputs(params: ModelParams, dataset: Dataset, idx, values: Sequence[DiffValue]) -> DiffValue:
    if params.uses_tokens:
        return encode_batch(values[-1], [dataset.tokens[i] for i in idx], params.max_tokens)
    return DiffValue(dataset.X[idx])


def main_loss(z: DiffValue, targets: np.ndarray, task: str) -> DiffValue:
    """Mean cross-entropy: per-label sigmoid for binary/multilabel, softmax for multiclass."""
    targets = np.asarray(targets)
    if task == "multiclass":
        return softmax_cross_entropy_from_logits(z, np.argmax(targets, axis=1)).mean()
    return binary_cross_entropy_from_logit(z, targets).mean()


def _check_compatible(params: ModelParams, dataset: Dataset) -> None:
    if dataset.n_labels != params.n_outputs:
        raise ValueError(f"model has {params.n_outputs} outputs but data has {dataset.n_labels} labels")
    if dataset.is_text != params.uses_tokens:
        raise ValueError("token data needs a model with an embedding table (and vice versa)")
    if not dataset.is_text and dataset.feature_width != params.input_width:
        raise ValueError(f"model input width {params.input_width} != feature width {dataset.feature_width}")


def mean_gs_loss(params: ModelParams, dataset: Dataset, pairs: Sequence[CounterfactualPair], gs: GsConfig) -> float:
    """Mean supervision loss over all pairs, without building a parameter graph."""
    if not pairs:
        return float("nan")
    terms, _ = build_terms(dataset.Y, pairs, gs)
    return float(np.mean(terms_gs_loss(params, dataset, terms, gs, retain=False).data))


def train(
    model: ModelParams,
    train_set: Dataset,
    pairs: Sequence[CounterfactualPair],
    val_set: Dataset | None,
    config: TrainConfig = TrainConfig(),
) -> tuple[ModelParams, TrainHistory]:
    """Minimize ``main + lam * gs`` with mini-batches; return the best-validation parameters.

    A pair joins a batch when either endpoint is in it.  With ``lam == 0``
    (or during warm-up) the supervision term is not built at all, so the
    parameter trajectory is exactly that of plain training.  Without a
    validation set the training main loss (negated) selects the epoch.
    """
    _check_compatible(model, train_set)
    if val_set is not None and len(val_set):
        _check_compatible(model, val_set)
    task = resolve_task(config.task, train_set)
    history = TrainHistory()
    if config.max_epochs == 0:
        return model, history
    if len(train_set) == 0:
        raise ValueError("training set is empty")

    rng = np.random.default_rng(config.seed)
    gs_cfg = config.gs
    terms, owner = build_terms(train_set.Y, pairs, gs_cfg) if pairs else (None, None)
    pair_a = np.array([p.a for p in pairs], dtype=np.int64)
    pair_b = np.array([p.b for p in pairs], dtype=np.int64)

    params = model
    state = None
    best = model
    stale = 0
    n = len(train_set)
    for epoch in range(config.max_epochs):
        use_gs = gs_cfg.lam > 0 and terms is not None and epoch >= config.warmup_epochs
        order = rng.permutation(n)
        losses = []
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            values = [DiffValue(a, requires_grad=True) for a in params.arrays()]
            z = logits(params, batch_inputs(params, train_set, idx, values), values)
            loss = main_loss(z, train_set.Y[idx], task)
            losses.append(loss.item())
            if use_gs:
                in_batch = np.zeros(n, dtype=bool)
                in_batch[idx] = True
                rows = (in_batch[pair_a] | in_batch[pair_b])[owner]
                if rows.any():
                    gs = terms_gs_loss(params, train_set, terms.subset(rows), gs_cfg, values).mean()
                    loss = combined_loss(loss, gs, gs_cfg.lam)
            if not np.isfinite(loss.item()):
                raise TrainingDivergedError(epoch, b, f"loss is {loss.item()}")
            grads = parameter_gradient(loss, values, allow_unused=True)
            with np.errstate(over="ignore", invalid="ignore"):
                if config.optimizer == "sgd":
                    arrays = sgd_step(params.arrays(), grads, config.lr)
                else:
                    arrays, state = adadelta_step(params.arrays(), grads, state, config.rho_decay, config.adadelta_eps)
            if not all(np.isfinite(a).all() for a in arrays):
                raise TrainingDivergedError(epoch, b, "parameters became non-finite")
            params = params.with_arrays(arrays)

        history.main_loss.append(float(np.mean(losses)))
        history.gs_loss.append(mean_gs_loss(params, train_set, pairs, gs_cfg) if pairs else float("nan"))
        if val_set is not None and len(val_set):
            metric = validation_metric(params, val_set, task)
        else:
            metric = -history.main_loss[-1]
        history.val_metric.append(metric)
        if history.chosen_epoch == epoch:
            best, stale = params, 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return best, history


# ---------------------------------------------------------------------------
# Ablations and ensembles
# ---------------------------------------------------------------------------


def randomize_relations(pairs: Sequence[CounterfactualPair], dataset: Dataset, seed: int = 0) -> list[CounterfactualPair]:
    """As many pairs as ``pairs``, joining random examples whose labels differ."""
    if len(dataset) < 2:
        raise ValueError("need at least two examples to draw relations")
    _, pattern = np.unique(dataset.Y, axis=0, return_inverse=True)
    pattern = pattern.reshape(-1)
    counts = np.bincount(pattern)
    eligible = np.flatnonzero(counts[pattern] < len(dataset))
    if eligible.size == 0:
        raise ValueError("no two examples have different labels")
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < len(pairs):
        i = int(rng.choice(eligible))
        j = int(rng.integers(len(dataset)))
        if pattern[i] != pattern[j]:
            out.append(CounterfactualPair(i, j))
    return out


def shuffle_labels(dataset: Dataset, seed: int = 0) -> Dataset:
    """Permute label vectors across examples and drop every counterfactual link."""
    perm = np.random.default_rng(seed).permutation(len(dataset))
    return Dataset(
        [
            Example(ex.id, dataset[int(k)].labels, ex.features, ex.tokens, None, ex.split)
            for ex, k in zip(dataset, perm)
        ],
        dataset.name,
    )


def init_like(template: ModelParams, seed: int) -> ModelParams:
    """Fresh initialization with ``template``'s architecture."""
    hidden = template.activations[0] if len(template.activations) > 1 else "relu"
    vocab = None if template.embedding is None else template.embedding.shape[0]
    return init_model(template.layer_sizes, hidden, seed, vocab_size=vocab, max_tokens=template.max_tokens)


def thread_count(default: int = 1) -> int:
    """Worker count from ``GRADSUP_THREADS`` (unset or invalid means ``default``)."""
    try:
        return max(1, int(os.environ.get("GRADSUP_THREADS", default)))
    except ValueError:
        return default


def train_ensemble(
    template: ModelParams,
    train_set: Dataset,
    pairs: Sequence[CounterfactualPair],
    val_set: Dataset | None,
    config: TrainConfig = TrainConfig(),
    k: int | None = None,
    n_jobs: int | None = None,
    make_pairs: Callable[[int], Sequence[CounterfactualPair]] | None = None,
) -> list[tuple[ModelParams, TrainHistory]]:
    """Train ``k`` members that differ only in seed (``config.seed + i``).

    Results come back ordered by seed whatever order the workers finish in.
    """
    k = config.ensemble_size if k is None else k
    if k < 1:
        raise ValueError("an ensemble needs at least one member")
    seeds = [config.seed + i for i in range(k)]
    jobs = (
        delayed(train)(
            init_like(template, s),
            train_set,
            make_pairs(s) if make_pairs else pairs,
            val_set,
            replace(config, seed=s),
        )
        for s in seeds
    )
    return list(Parallel(n_jobs=n_jobs or thread_count())(jobs))


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------

_GS_KEYS = {"lambda": "lam", "lam": "lam", "norm_eps": "norm_eps", "bidirectional": "bidirectional", "multi_class": "multi_class"}


def config_from_dict(raw: dict) -> tuple[TrainConfig, dict]:
    """Split a JSON config into a :class:`TrainConfig` and the remaining keys.

    The remaining keys (data paths, model shape) are returned untouched;
    GS settings may sit at top level or under ``"gs"``.
    """
    raw = dict(raw)
    gs_raw = dict(raw.pop("gs", {}))
    for key in list(raw):
        if key in _GS_KEYS:
            gs_raw[key] = raw.pop(key)
    gs_kwargs = {}
    for key, value in gs_raw.items():
        if key not in _GS_KEYS:
            raise ValueError(f"unknown GS setting {key!r}")
        gs_kwargs[_GS_KEYS[key]] = value
    names = {f.name for f in fields(TrainConfig)} - {"gs"}
    kwargs = {k: raw.pop(k) for k in list(raw) if k in names}
    return TrainConfig(gs=GsConfig(**gs_kwargs), **kwargs), raw


def load_train_config(path) -> tuple[TrainConfig, dict]:
    with Path(path).open("r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return config_from_dict(raw)


def config_to_dict(config: TrainConfig) -> dict:
    out = {f.name: getattr(config, f.name) for f in fields(TrainConfig) if f.name != "gs"}
    out["gs"] = {
        "lambda": config.gs.lam,
        "norm_eps": config.gs.norm_eps,
        "bidirectional": config.gs.bidirectional,
        "multi_class": config.gs.multi_class,
    }
    return out
