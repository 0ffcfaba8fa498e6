"""Metrics, geometric diagnostics and the evaluation report."""

from __future__ import annotations

import json
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .autodiff import DiffValue, grad, take
from .models import ModelParams, logits, predict_logits
from .objective import CounterfactualPair, GsConfig, build_terms, endpoint_gradients

TASKS = ("binary", "multiclass", "multilabel")
REPORT_SCHEMA = "gradsup-report/1"
AP_DEFINITION = "all-points AP (area under the precision envelope); score ties ranked by example index"


def resolve_task(task: str, dataset) -> str:
    """``"auto"`` means binary for one label and multilabel otherwise."""
    if task == "auto":
        return "binary" if dataset.n_labels == 1 else "multilabel"
    if task not in TASKS:
        raise ValueError(f"task must be 'auto' or one of {TASKS}")
    return task


def _members(model) -> list[ModelParams]:
    return [model] if isinstance(model, ModelParams) else list(model)


def _check_arity(model, dataset) -> None:
    arity = _members(model)[0].n_outputs
    if arity != dataset.n_labels:
        raise ValueError(f"model has {arity} outputs but data has {dataset.n_labels} labels")


def accuracy(model, dataset, task: str = "auto") -> float:
    """Fraction correct.  One logit: positive iff the logit is > 0.  Several: argmax, lowest index on ties."""
    if len(dataset) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    _check_arity(model, dataset)
    z = np.atleast_2d(predict_logits(model, dataset.inputs()))
    y = dataset.Y
    if y.shape[1] == 1:
        pred = (z[:, 0] > 0).astype(np.int64)
        return float(np.mean(pred == y[:, 0]))
    return float(np.mean(np.argmax(z, axis=1) == np.argmax(y, axis=1)))


def _ap_fraction(scores, labels) -> Fraction | None:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in shape")
    ranked = labels[np.argsort(-scores, kind="stable")] > 0
    ranks = np.flatnonzero(ranked) + 1
    n_pos = len(ranks)
    if n_pos == 0:
        return None
    # The envelope at a positive is the best precision at any later positive
    # (precision only drops across negatives), so walk positives backwards
    # and compare k/rank exactly with integer cross-multiplication.
    total = Fraction(0)
    best_k, best_rank, run = 0, 1, 0
    for k in range(n_pos, 0, -1):
        rank = int(ranks[k - 1])
        if k * best_rank > best_k * rank:
            if run:
                total += Fraction(run * best_k, best_rank)
            best_k, best_rank, run = k, rank, 0
        run += 1
    total += Fraction(run * best_k, best_rank)
    return total / n_pos


def average_precision(scores, labels) -> float | None:
    """All-points AP of one class, or ``None`` when it has no positives.

    Scores are ranked descending with a stable sort, so tied scores keep
    example order.  Precision is replaced by its running maximum from the
    right (the envelope) and averaged over the positive positions.  The sum
    is exact (rational) and rounded once.
    """
    ap = _ap_fraction(scores, labels)
    return None if ap is None else float(ap)


@dataclass(frozen=True)
class MapResult:
    value: float
    per_class: tuple[float | None, ...]

    @property
    def skipped(self) -> tuple[int, ...]:
        return tuple(c for c, ap in enumerate(self.per_class) if ap is None)


def mean_average_precision(scores, labels, details: bool = False):
    """Mean AP over classes that have at least one positive.

    The mean is taken over exact per-class values, so it does not depend
    on summation order.  With ``details`` a :class:`MapResult` is returned,
    listing per-class AP and the skipped classes.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be matching n x C matrices")
    exact = [_ap_fraction(scores[:, c], labels[:, c]) for c in range(scores.shape[1])]
    kept = [ap for ap in exact if ap is not None]
    if not kept:
        raise ValueError("no class has a positive example")
    per_class = tuple(None if ap is None else float(ap) for ap in exact)
    result = MapResult(float(sum(kept) / len(kept)), per_class)
    return result if details else result.value


def dataset_map(model, dataset, details: bool = False):
    _check_arity(model, dataset)
    scores = np.atleast_2d(predict_logits(model, dataset.inputs()))
    return mean_average_precision(scores, dataset.Y, details)


def validation_metric(model, dataset, task: str = "auto") -> float:
    """Accuracy for binary/multiclass tasks, mAP for multilabel ones."""
    if resolve_task(task, dataset) == "multilabel":
        return dataset_map(model, dataset)
    return accuracy(model, dataset, task)


def metric_name(dataset, task: str = "auto") -> str:
    return "mAP" if resolve_task(task, dataset) == "multilabel" else "accuracy"


def _cosines(g: np.ndarray, target: np.ndarray) -> np.ndarray:
    g_norm = np.linalg.norm(g, axis=-1)
    t_norm = np.linalg.norm(target, axis=-1)
    safe = np.where(g_norm > 0, g_norm, 1.0)
    return np.where(g_norm > 0, np.sum(g * target, axis=-1) / (safe * t_norm), 0.0)


def gradient_alignment(model, pairs: Sequence[CounterfactualPair], dataset, config: GsConfig = GsConfig()) -> float:
    """Mean cosine between supervised input-gradients and their target directions.

    Terms follow the training rule (same logit selection and orientation).
    A zero gradient counts as cosine 0.  For an ensemble of feature models
    the gradient of the averaged logit is used; token ensembles average the
    members' alignments since each member has its own encoding space.
    """
    if not pairs:
        raise ValueError("gradient alignment needs at least one pair")
    terms, _ = build_terms(dataset.Y, pairs, config)
    members = _members(model)
    if dataset.is_text:
        return float(np.mean([_cosines(*_gradients(m, dataset, terms)).mean() for m in members]))
    g_sum, target = _gradients(members[0], dataset, terms)
    for m in members[1:]:
        g_sum = g_sum + _gradients(m, dataset, terms)[0]
    return float(np.mean(_cosines(g_sum / len(members), target)))


def _gradients(params: ModelParams, dataset, terms) -> tuple[np.ndarray, np.ndarray]:
    g, target = endpoint_gradients(params, dataset, terms, retain=False)
    return g.data, target


def linearization_gap(params: ModelParams, x_i, x_j, output: int = 0) -> tuple[float, float]:
    """First-order Taylor remainder of one logit between two inputs.

    Returns ``(|f(x_j) - f(x_i) - grad f(x_i).(x_j - x_i)|, |x_j - x_i|)``.
    An affine model (identity activations throughout) has no remainder, so
    its gap is reported as exactly 0 instead of a rounding residue.
    """
    x_i = np.asarray(x_i, dtype=np.float64)
    x_j = np.asarray(x_j, dtype=np.float64)
    step = x_j - x_i
    if all(a == "identity" for a in params.activations) or not np.any(step):
        return 0.0, float(np.linalg.norm(step))
    x = DiffValue(x_i, requires_grad=True)
    f_i = take(logits(params, x), output)
    (g,) = grad(f_i, [x])
    f_j = predict_logits(params, x_j)[output]
    gap = abs(f_j - f_i.item() - float(np.dot(g.data, step)))
    return float(gap), float(np.linalg.norm(step))


def pair_linearization_gap(params: ModelParams, dataset, pair: CounterfactualPair, config: GsConfig = GsConfig()):
    """:func:`linearization_gap` from endpoint ``a`` to ``b`` on the pair's supervised logit."""
    terms, _ = build_terms(dataset.Y, [pair], config)
    return linearization_gap(params, dataset.X[pair.a], dataset.X[pair.b], int(terms.cls[0]))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def expected_random_ap(n: int, n_pos: int, draws: int = 2000, seed: int = 0) -> float:
    """Expected AP of a uniformly random ranking of ``n`` items with ``n_pos`` positives.

    Enveloped AP has no closed form, so this is a seeded Monte-Carlo
    average (deterministic for fixed arguments).  For large ``n`` it
    approaches the positive rate; for small splits it is well above it.
    """
    if not 0 < n_pos <= n:
        raise ValueError("need 0 < n_pos <= n")
    if n_pos == n:
        return 1.0
    rng = np.random.default_rng(seed)
    ranks = np.sort(rng.random((draws, n)).argsort(axis=1)[:, :n_pos], axis=1) + 1
    precision = np.arange(1, n_pos + 1) / ranks
    envelope = np.maximum.accumulate(precision[:, ::-1], axis=1)[:, ::-1]
    return float(envelope.mean())


def chance_level(reference, dataset, task: str = "auto") -> float:
    """Score of a predictor that carries no information about the inputs.

    Accuracy: the share of ``dataset`` carrying the reference's most
    frequent label (lowest index on ties), i.e. what a constant predictor
    fitted to the reference scores.  mAP: the mean over classes with
    positives of :func:`expected_random_ap`.
    """
    task = resolve_task(task, dataset)
    y = dataset.Y
    if task == "multilabel":
        counts = y.sum(axis=0)
        return float(np.mean([expected_random_ap(len(y), int(p)) for p in counts if p > 0]))
    ref = reference.Y
    if ref.shape[1] == 1:
        majority = int(ref[:, 0].mean() > 0.5)
        return float(np.mean(y[:, 0] == majority))
    majority = int(np.argmax(np.bincount(np.argmax(ref, axis=1), minlength=ref.shape[1])))
    return float(np.mean(np.argmax(y, axis=1) == majority))


@dataclass
class Report:
    metric: str
    rows: list[dict] = field(default_factory=list)
    alignment: dict[str, float] = field(default_factory=dict)
    skipped_classes: dict[str, list[int]] = field(default_factory=dict)
    n_models: int = 1

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "metric": self.metric,
            "ap_definition": AP_DEFINITION if self.metric == "mAP" else None,
            "n_models": self.n_models,
            "rows": self.rows,
            "alignment": self.alignment,
            "skipped_classes": self.skipped_classes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_text(self) -> str:
        header = ["split", "n", self.metric, "chance"]
        body = [
            [r["split"], str(r["n"]), f"{100 * r['value']:.2f}", "" if r["chance"] is None else f"{100 * r['chance']:.2f}"]
            for r in self.rows
        ]
        widths = [max(len(row[k]) for row in [header, *body]) for k in range(len(header))]
        lines = ["  ".join(c.ljust(w) if k == 0 else c.rjust(w) for k, (c, w) in enumerate(zip(row, widths))) for row in [header, *body]]
        lines.insert(1, "  ".join("-" * w for w in widths))
        if self.metric == "mAP":
            lines.insert(0, f"# {AP_DEFINITION}")
        for name, value in self.alignment.items():
            lines.append(f"gradient alignment ({name}): {value:.4f}")
        for name, classes in self.skipped_classes.items():
            lines.append(f"classes without positives in {name}: {classes}")
        return "\n".join(lines) + "\n"


def evaluate_suite(
    model,
    splits: Mapping[str, object],
    pair_sets: Mapping[str, tuple[object, Sequence[CounterfactualPair]]] | None = None,
    reference=None,
    chance_model=None,
    task: str = "auto",
    gs_config: GsConfig = GsConfig(),
) -> Report:
    """Score ``model`` (or an ensemble) on every split, in the given order.

    Each row carries the analytic chance level computed against
    ``reference`` (the training data), and, when ``chance_model`` is given
    (say, a model trained on shuffled labels), a ``"chance_model"`` row
    with that model's scores.  ``pair_sets`` maps names to
    ``(dataset, pairs)`` for alignment diagnostics.
    """
    names = list(splits)
    if not names:
        raise ValueError("no splits to evaluate")
    first = splits[names[0]]
    report = Report(metric_name(first, task), n_models=len(_members(model)))
    for name in names:
        ds = splits[name]
        report.rows.append(_row(name, model, ds, reference, task, report))
    if chance_model is not None:
        for name in names:
            ds = splits[name]
            row = _row(f"{name} (chance model)", chance_model, ds, reference, task, None)
            report.rows.append(row)
    for name, (ds, pairs) in (pair_sets or {}).items():
        if pairs:
            report.alignment[name] = gradient_alignment(model, pairs, ds, gs_config)
    return report


def _row(name, model, ds, reference, task, report) -> dict:
    if resolve_task(task, ds) == "multilabel":
        res = dataset_map(model, ds, details=True)
        value = res.value
        if res.skipped and report is not None:
            report.skipped_classes[name] = list(res.skipped)
    else:
        value = accuracy(model, ds, task)
    chance = chance_level(reference, ds, task) if reference is not None else None
    return {"split": name, "n": len(ds), "value": value, "chance": chance}
