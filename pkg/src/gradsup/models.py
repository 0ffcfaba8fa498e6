"""Classifier families: linear/MLP heads, a bag-of-words encoder, and ensembles.

All models emit logits.  Probability heads live in the loss functions, and
gradient supervision differentiates the logits directly.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ACTIVATIONS, DiffValue, affine, matmul, no_grad, take

CHECKPOINT_FORMAT = "gradsup-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Immutable snapshot of an MLP (a linear model is the one-layer case).

    ``activations[k]`` is applied after layer ``k``; the last entry is always
    ``"identity"`` so the output is a logit vector.  When ``embedding`` is
    set the model consumes token sequences, averaged into an input vector
    by :func:`encode_batch` before the first layer.
    """

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    activations: tuple[str, ...]
    seed: int | None = None
    embedding: np.ndarray | None = None
    max_tokens: int | None = None

    def __post_init__(self):
        if not self.weights or len({len(self.weights), len(self.biases), len(self.activations)}) != 1:
            raise ValueError("need one (weight, bias, activation) triple per layer")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ValueError(f"layer {k}: weight {W.shape} and bias {b.shape} do not match")
            if k and W.shape[1] != self.weights[k - 1].shape[0]:
                raise ValueError(f"layer {k} input width {W.shape[1]} != previous output {self.weights[k - 1].shape[0]}")
        for tag in self.activations:
            if tag not in ACTIVATIONS:
                raise ValueError(f"unknown activation {tag!r}")
        if self.embedding is not None and self.embedding.shape[1] != self.input_width:
            raise ValueError("embedding width must equal the first layer's input width")
        if not all(np.all(np.isfinite(a)) for a in self.arrays()):
            raise ValueError("model parameters must be finite")

    @property
    def input_width(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_outputs(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.input_width,) + tuple(W.shape[0] for W in self.weights)

    @property
    def uses_tokens(self) -> bool:
        return self.embedding is not None

    def arrays(self) -> list[np.ndarray]:
        """Flat parameter list: W0, b0, W1, b1, ..., then the embedding if any."""
        out: list[np.ndarray] = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        if self.embedding is not None:
            out.append(self.embedding)
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "ModelParams":
        n = len(self.weights)
        embedding = arrays[2 * n] if self.embedding is not None else None
        return ModelParams(
            weights=tuple(np.array(a, dtype=np.float64) for a in arrays[0 : 2 * n : 2]),
            biases=tuple(np.array(a, dtype=np.float64) for a in arrays[1 : 2 * n : 2]),
            activations=self.activations,
            seed=self.seed,
            embedding=None if embedding is None else np.array(embedding, dtype=np.float64),
            max_tokens=self.max_tokens,
        )

    def diff_values(self) -> list[DiffValue]:
        """Fresh differentiable leaves, in :meth:`arrays` order."""
        return [DiffValue(a, requires_grad=True) for a in self.arrays()]

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelParams):
            return NotImplemented
        mine, theirs = self.arrays(), other.arrays()
        return (
            self.activations == other.activations
            and self.max_tokens == other.max_tokens
            and len(mine) == len(theirs)
            and all(a.shape == b.shape and np.array_equal(a, b) for a, b in zip(mine, theirs))
        )

    __hash__ = None


def init_model(
    layer_sizes: Sequence[int],
    activation: str = "relu",
    seed: int = 0,
    *,
    vocab_size: int | None = None,
    max_tokens: int | None = None,
) -> ModelParams:
    """Glorot-uniform weights, zero biases, fully determined by ``seed``.

    ``layer_sizes`` lists the input width followed by each layer's width, so
    ``(2, 1)`` is a linear scorer and ``(2048, 64, 64, 64, 80)`` a 3-hidden-
    layer MLP with 80 outputs.  Passing ``vocab_size`` adds a trainable word
    embedding table whose width is ``layer_sizes[0]``.
    """
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or min(sizes) < 1:
        raise ValueError("layer_sizes needs an input width and at least one positive layer width")
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    activations = (activation,) * (len(sizes) - 2) + ("identity",)
    embedding = None
    if vocab_size is not None:
        embedding = rng.normal(0.0, 1.0, size=(int(vocab_size), sizes[0]))
        if max_tokens is None:
            max_tokens = 32
    return ModelParams(tuple(weights), tuple(biases), activations, seed, embedding, max_tokens)


def logits(params: ModelParams, x, values: Sequence[DiffValue] | None = None) -> DiffValue:
    """Graph-building forward pass over input vectors (rows of ``x``).

    ``values`` substitutes differentiable leaves for the stored arrays; it
    must follow :meth:`ModelParams.arrays` order.
    """
    if values is None:
        values = [DiffValue(a) for a in params.arrays()]
    h = x if isinstance(x, DiffValue) else DiffValue(x)
    if h.shape[-1] != params.input_width:
        raise ValueError(f"input width {h.shape[-1]} != model input width {params.input_width}")
    for k, tag in enumerate(params.activations):
        h = ACTIVATIONS[tag](affine(h, values[2 * k], values[2 * k + 1]))
    return h


def forward(params: ModelParams, x) -> np.ndarray:
    """Logits as a plain array; ``x`` is one input vector or a matrix of rows.

    Token models accept a token sequence or a list of sequences instead.
    """
    with no_grad():
        if params.uses_tokens:
            single = len(x) == 0 or np.isscalar(x[0])
            batch = [x] if single else x
            h = encode_batch(DiffValue(params.embedding), batch, params.max_tokens)
            out = logits(params, h).data
            return out[0] if single else out
        return logits(params, np.asarray(x, dtype=np.float64)).data


def ensemble_logits(models: Sequence[ModelParams], x) -> np.ndarray:
    """Arithmetic mean of the members' logits."""
    if not models:
        raise ValueError("an ensemble needs at least one member")
    arity = {m.n_outputs for m in models}
    if len(arity) != 1:
        raise ValueError(f"ensemble members disagree on output arity: {sorted(arity)}")
    total = forward(models[0], x)
    for m in models[1:]:
        total = total + forward(m, x)
    return total / len(models)


def predict_logits(model, x) -> np.ndarray:
    """Logits for a single model or an ensemble (list/tuple of models)."""
    if isinstance(model, ModelParams):
        return forward(model, x)
    return ensemble_logits(list(model), x)


def output_arity(model) -> int:
    return model.n_outputs if isinstance(model, ModelParams) else model[0].n_outputs


# ---------------------------------------------------------------------------
# Bag-of-words text encoding
# ---------------------------------------------------------------------------


@dataclass
class BowEncoderConfig:
    vocab_size: int = 20000
    embed_dim: int = 50
    max_tokens: int = 32
    embeddings: np.ndarray | None = None

    def __post_init__(self):
        if self.vocab_size <= 0 or self.max_tokens <= 0:
            raise ValueError("vocab_size and max_tokens must be positive")
        if self.embeddings is None:
            self.embeddings = np.zeros((self.vocab_size, self.embed_dim))
        elif self.embeddings.shape != (self.vocab_size, self.embed_dim):
            raise ValueError(f"embedding table must be {self.vocab_size}x{self.embed_dim}")


def _kept_tokens(tokens: Iterable[int], vocab_size: int, max_tokens: int) -> list[int]:
    kept = [int(t) for t in tokens if 0 <= int(t) < vocab_size]
    return kept[:max_tokens]


def encode_bag_of_words(tokens: Sequence[int], config: BowEncoderConfig) -> np.ndarray:
    """Mean embedding of the first ``max_tokens`` in-vocabulary ids.

    Out-of-vocabulary ids are skipped; the divisor is the number of tokens
    that contributed, so padding never dilutes the mean.  Empty input maps
    to the zero vector.
    """
    kept = _kept_tokens(tokens, config.vocab_size, config.max_tokens)
    if not kept:
        return np.zeros(config.embed_dim)
    return config.embeddings[kept].mean(axis=0)


def encode_batch(embedding: DiffValue, batch: Sequence[Sequence[int]], max_tokens: int) -> DiffValue:
    """Differentiable batch version of :func:`encode_bag_of_words`."""
    vocab_size = embedding.shape[0]
    rows = [_kept_tokens(tokens, vocab_size, max_tokens) for tokens in batch]
    flat = [t for row in rows for t in row]
    if not flat:
        return DiffValue(np.zeros((len(rows), embedding.shape[1])))
    averaging = np.zeros((len(rows), len(flat)))
    col = 0
    for i, row in enumerate(rows):
        if row:
            averaging[i, col : col + len(row)] = 1.0 / len(row)
            col += len(row)
    return matmul(DiffValue(averaging), take(embedding, np.asarray(flat)))


def build_vocabulary(token_lists: Iterable[Sequence[str]], max_size: int = 20000) -> dict[str, int]:
    """Most frequent words first; ties keep first-occurrence order."""
    counts: Counter[str] = Counter()
    first_seen: dict[str, int] = {}
    for tokens in token_lists:
        for word in tokens:
            counts[word] += 1
            first_seen.setdefault(word, len(first_seen))
    ranked = sorted(counts, key=lambda w: (-counts[w], first_seen[w]))
    return {word: i for i, word in enumerate(ranked[:max_size])}


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params: ModelParams, path) -> None:
    """JSON checkpoint; floats are written with ``repr`` so doubles round-trip exactly."""
    record = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "seed": params.seed,
        "activations": list(params.activations),
        "layers": [
            {"weight_shape": list(W.shape), "weight": W.reshape(-1).tolist(), "bias": b.tolist()}
            for W, b in zip(params.weights, params.biases)
        ],
        "embedding": None
        if params.embedding is None
        else {"shape": list(params.embedding.shape), "values": params.embedding.reshape(-1).tolist()},
        "max_tokens": params.max_tokens,
    }
    Path(path).write_text(json.dumps(record, separators=(",", ":")) + "\n")


def load_checkpoint(path) -> ModelParams:
    path = Path(path)
    try:
        record = json.loads(path.read_text())
        if record.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a gradsup checkpoint")
        if record.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {record.get('version')}")
        weights = tuple(
            np.array(layer["weight"], dtype=np.float64).reshape(layer["weight_shape"]) for layer in record["layers"]
        )
        biases = tuple(np.array(layer["bias"], dtype=np.float64) for layer in record["layers"])
        embedding = None
        if record.get("embedding") is not None:
            emb = record["embedding"]
            embedding = np.array(emb["values"], dtype=np.float64).reshape(emb["shape"])
        return ModelParams(
            weights, biases, tuple(record["activations"]), record.get("seed"), embedding, record.get("max_tokens")
        )
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"cannot load checkpoint {path}: {exc}") from exc
