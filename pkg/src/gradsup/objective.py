"""Gradient supervision from counterfactual pairs.

For a pair of examples whose labels differ, the vector between them is a
target direction for the model's input-gradient.  The supervision loss is
the cosine distance between the two, added to the usual task loss with
weight ``lam``.
"""

from __future__ import annotations

import warnings
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .autodiff import DiffValue, grad, maximum, no_grad, sqrt, take
from .models import ModelParams, encode_batch, logits

PER_CLASS = "per-class"
LOWEST_INDEX = "lowest-index"


class DegeneratePairError(ValueError):
    """A pair whose endpoints coincide (or whose labels agree) carries no direction."""


@dataclass(frozen=True, eq=False)
class CounterfactualPair:
    """Undirected link between two examples, stored as dataset indices.

    ``a`` is the endpoint that receives the supervision term when the loss
    is applied at one endpoint only.
    """

    a: int
    b: int

    def __post_init__(self):
        if self.a == self.b:
            raise DegeneratePairError(f"example {self.a} cannot be its own counterfactual")

    def key(self) -> frozenset:
        return frozenset((self.a, self.b))

    def __eq__(self, other) -> bool:
        if not isinstance(other, CounterfactualPair):
            return NotImplemented
        return self.key() == other.key()

    def __hash__(self) -> int:
        return hash(self.key())

    def __iter__(self):
        return iter((self.a, self.b))


@dataclass(frozen=True)
class GsConfig:
    lam: float = 1.0
    norm_eps: float = 1e-8
    bidirectional: bool = True
    multi_class: str = PER_CLASS

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.norm_eps <= 0:
            raise ValueError("norm epsilon must be positive")
        if self.multi_class not in (PER_CLASS, LOWEST_INDEX):
            raise ValueError(f"multi_class must be {PER_CLASS!r} or {LOWEST_INDEX!r}")


def target_gradient(x_from, x_to) -> np.ndarray:
    """``x_to - x_from``: the input-space move that turns one example into its partner."""
    x_from = np.asarray(x_from, dtype=np.float64)
    x_to = np.asarray(x_to, dtype=np.float64)
    if x_from.shape != x_to.shape:
        raise ValueError(f"endpoint shapes differ: {x_from.shape} vs {x_to.shape}")
    diff = x_to - x_from
    if not np.any(diff):
        raise DegeneratePairError("degenerate pair: endpoints are identical")
    return diff


def gs_loss(g, g_hat, norm_eps: float = 1e-8):
    """Cosine distance ``1 - g.g_hat / (max(|g|, eps) |g_hat|)`` along the last axis.

    ``g`` may be a :class:`DiffValue` (the result stays differentiable) or
    an array (a float or array is returned).  Rows of 2-D inputs are
    independent terms.
    """
    if norm_eps <= 0:
        raise ValueError("norm epsilon must be positive")
    g_hat = np.asarray(g_hat.data if isinstance(g_hat, DiffValue) else g_hat, dtype=np.float64)
    target_norm = np.sqrt(np.sum(g_hat * g_hat, axis=-1))
    if np.any(target_norm == 0):
        raise DegeneratePairError("target gradient is zero (degenerate pair)")
    if isinstance(g, DiffValue):
        sq = (g * g).sum(axis=-1)
        guarded = sqrt(maximum(sq, norm_eps * norm_eps))
        return 1.0 - (g * g_hat).sum(axis=-1) / (guarded * target_norm)
    g = np.asarray(g, dtype=np.float64)
    if g.shape != g_hat.shape:
        raise ValueError(f"gradient shape {g.shape} != target shape {g_hat.shape}")
    guarded = np.maximum(np.sqrt(np.sum(g * g, axis=-1)), norm_eps)
    out = 1.0 - np.sum(g * g_hat, axis=-1) / (guarded * target_norm)
    return float(out) if np.ndim(out) == 0 else out


def differing_classes(y_i, y_j) -> list[int]:
    y_i = np.asarray(y_i).reshape(-1)
    y_j = np.asarray(y_j).reshape(-1)
    if y_i.shape != y_j.shape:
        raise ValueError("label vectors have different lengths")
    return [int(c) for c in np.flatnonzero(y_i != y_j)]


def supervised_classes(y_i, y_j, multi_class: str | None = PER_CLASS) -> list[int]:
    """Classes whose logit gradient a pair supervises.

    A class qualifies when it is positive on exactly one side.  With
    several such classes, ``"per-class"`` keeps all of them,
    ``"lowest-index"`` keeps the first, and ``None`` refuses to choose.
    """
    classes = differing_classes(y_i, y_j)
    if not classes:
        raise DegeneratePairError("labels are identical; no class differs")
    if len(classes) > 1:
        if multi_class is None:
            raise ValueError(f"classes {classes} all differ and no tie-break is configured")
        if multi_class == LOWEST_INDEX:
            return classes[:1]
    return classes


def select_supervised_output(logit_vector: DiffValue, y_i, y_j, tie_break: str | None = None) -> DiffValue:
    """The logit whose input-gradient the pair supervises.

    Single-logit models return their only logit.  The target direction for
    the chosen class points from the example where it is negative toward
    the example where it is positive (see :func:`oriented_target`).
    """
    classes = supervised_classes(y_i, y_j, tie_break)
    if logit_vector.shape[-1] == 1:
        return take(logit_vector, 0)
    if len(classes) > 1:
        raise ValueError(f"classes {classes} all differ; pick one with tie_break={LOWEST_INDEX!r}")
    return take(logit_vector, classes[0])


def oriented_target(x_i, x_j, y_i, y_j, cls: int) -> np.ndarray:
    """Target direction for class ``cls``: from its negative endpoint to its positive one."""
    y_i = np.asarray(y_i).reshape(-1)
    if y_i[cls]:
        return target_gradient(x_j, x_i)
    return target_gradient(x_i, x_j)


def combined_loss(main, gs, lam: float):
    """``main + lam * gs``."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return main + lam * gs


@dataclass(frozen=True)
class GsTerms:
    """Flattened supervision terms, one row per (endpoint, class)."""

    endpoint: np.ndarray
    partner: np.ndarray
    cls: np.ndarray
    sign: np.ndarray

    def __len__(self) -> int:
        return len(self.endpoint)

    def subset(self, rows) -> "GsTerms":
        return GsTerms(self.endpoint[rows], self.partner[rows], self.cls[rows], self.sign[rows])


def build_terms(labels: np.ndarray, pairs: Sequence[CounterfactualPair], config: GsConfig) -> tuple[GsTerms, np.ndarray]:
    """Expand pairs into supervision terms.

    Returns the terms plus, for each term, the index of the pair it came
    from.  The term at endpoint ``e`` supervises ``sign * logit[cls]`` where
    ``sign`` is +1 if the partner is the positive side for ``cls``; its
    target is ``x_partner - x_e``.  With ``bidirectional`` both endpoints of
    a pair get a term, against opposite target vectors.
    """
    labels = np.asarray(labels)
    n = len(labels)
    endpoint, partner, cls, sign, owner = [], [], [], [], []
    for k, pair in enumerate(pairs):
        if not (0 <= pair.a < n and 0 <= pair.b < n):
            raise IndexError(f"pair ({pair.a}, {pair.b}) does not resolve in a dataset of {n} examples")
        ends = ((pair.a, pair.b), (pair.b, pair.a)) if config.bidirectional else ((pair.a, pair.b),)
        for c in supervised_classes(labels[pair.a], labels[pair.b], config.multi_class):
            for e, p in ends:
                endpoint.append(e)
                partner.append(p)
                cls.append(c)
                sign.append(1.0 if labels[p][c] else -1.0)
                owner.append(k)
    terms = GsTerms(
        np.asarray(endpoint, dtype=np.int64),
        np.asarray(partner, dtype=np.int64),
        np.asarray(cls, dtype=np.int64),
        np.asarray(sign, dtype=np.float64),
    )
    return terms, np.asarray(owner, dtype=np.int64)


def _model_inputs(params: ModelParams, dataset, idx: np.ndarray, values) -> DiffValue:
    if params.uses_tokens:
        embedding = values[-1] if values is not None else DiffValue(params.embedding)
        return encode_batch(embedding, [dataset.tokens[i] for i in idx], params.max_tokens)
    return DiffValue(dataset.X[idx], requires_grad=True)


def endpoint_gradients(
    params: ModelParams,
    dataset,
    terms: GsTerms,
    values: Sequence[DiffValue] | None = None,
    retain: bool = True,
) -> tuple[DiffValue, np.ndarray]:
    """Input-gradients of the signed supervised logits and their targets, one row per term.

    Token models are differentiated with respect to the encoded input
    vector; the partner's encoding is treated as a constant.
    """
    x_end = _model_inputs(params, dataset, terms.endpoint, values)
    if not x_end.requires_grad:
        x_end = DiffValue(x_end.data, requires_grad=True)
    if params.uses_tokens:
        with no_grad():
            x_partner = _model_inputs(params, dataset, terms.partner, values).data
    else:
        x_partner = dataset.X[terms.partner]
    target = x_partner - x_end.data
    z = logits(params, x_end, values)
    selected = (take(z, (np.arange(len(terms)), terms.cls)) * terms.sign).sum()
    (g,) = grad(selected, [x_end], create_graph=retain)
    return g, target


def terms_gs_loss(
    params: ModelParams,
    dataset,
    terms: GsTerms,
    config: GsConfig,
    values: Sequence[DiffValue] | None = None,
    retain: bool = True,
) -> DiffValue:
    """Per-term cosine distances (a vector), differentiable w.r.t. ``values`` when ``retain``."""
    if len(terms) == 0:
        return DiffValue(np.zeros(0))
    g, target = endpoint_gradients(params, dataset, terms, values, retain)
    return gs_loss(g, target, config.norm_eps)


def batch_gs_loss(
    params: ModelParams,
    dataset,
    pairs: Sequence[CounterfactualPair],
    config: GsConfig = GsConfig(),
    values: Sequence[DiffValue] | None = None,
    retain: bool = True,
) -> DiffValue:
    """Mean cosine distance over every supervised endpoint of ``pairs``.

    An empty pair list gives 0 and a :class:`RuntimeWarning`, so the
    combined objective reduces to the task loss.
    """
    if not pairs:
        warnings.warn("no counterfactual pairs: gradient supervision loss is 0", RuntimeWarning, stacklevel=2)
        return DiffValue(0.0)
    terms, _ = build_terms(dataset.Y, pairs, config)
    return terms_gs_loss(params, dataset, terms, config, values, retain).mean()
