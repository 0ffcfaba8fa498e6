"""Datasets of examples with counterfactual links, plus synthetic generators."""

from __future__ import annotations

import json
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .models import build_vocabulary
from .objective import CounterfactualPair

SPLITS = ("train", "val", "test", "test_ood", "test_original", "test_edited", "test_hard_edited")
RECORD_KEYS = ("id", "features", "tokens", "labels", "counterfactual_of", "split")


class DatasetError(ValueError):
    """Invalid dataset contents.  ``ids`` names the offending examples."""

    def __init__(self, message: str, ids: Sequence[str] = ()):
        super().__init__(message)
        self.ids = tuple(ids)


@dataclass(frozen=True, eq=False)
class Example:
    id: str
    labels: np.ndarray
    features: np.ndarray | None = None
    tokens: tuple[int, ...] | None = None
    counterfactual_of: str | None = None
    split: str = "train"

    def __post_init__(self):
        labels = np.atleast_1d(np.asarray(self.labels))
        if labels.ndim != 1 or labels.size == 0 or not np.isin(labels, (0, 1)).all():
            raise DatasetError(f"example {self.id!r}: labels must be a non-empty 0/1 vector", [self.id])
        object.__setattr__(self, "labels", labels.astype(np.int64))
        if (self.features is None) == (self.tokens is None):
            raise DatasetError(f"example {self.id!r}: exactly one of features/tokens is required", [self.id])
        if self.features is not None:
            feats = np.asarray(self.features, dtype=np.float64)
            if feats.ndim != 1 or not np.isfinite(feats).all():
                raise DatasetError(f"example {self.id!r}: features must be a finite vector", [self.id])
            object.__setattr__(self, "features", feats)
        else:
            object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Example):
            return NotImplemented
        same_features = (self.features is None and other.features is None) or (
            self.features is not None
            and other.features is not None
            and np.array_equal(self.features, other.features)
        )
        return (
            self.id == other.id
            and np.array_equal(self.labels, other.labels)
            and same_features
            and self.tokens == other.tokens
            and self.counterfactual_of == other.counterfactual_of
            and self.split == other.split
        )

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "features": None if self.features is None else [float(v) for v in self.features],
            "tokens": None if self.tokens is None else list(self.tokens),
            "labels": [int(v) for v in self.labels],
            "counterfactual_of": self.counterfactual_of,
            "split": self.split,
        }

    @classmethod
    def from_record(cls, record: dict) -> "Example":
        missing = [k for k in ("id", "labels") if k not in record]
        if missing:
            raise DatasetError(f"record is missing {missing}", [str(record.get("id", "?"))])
        return cls(
            id=str(record["id"]),
            labels=record["labels"],
            features=record.get("features"),
            tokens=record.get("tokens"),
            counterfactual_of=record.get("counterfactual_of"),
            split=record.get("split", "train"),
        )


class Dataset:
    """An ordered, validated collection of :class:`Example`.

    Links must resolve inside the dataset and join examples with different
    labels.  Every example shares the same label arity and input kind.
    """

    def __init__(self, examples: Iterable[Example], name: str = ""):
        self.examples: list[Example] = list(examples)
        self.name = name
        self._index = {}
        for i, ex in enumerate(self.examples):
            if ex.id in self._index:
                raise DatasetError(f"duplicate id {ex.id!r}", [ex.id])
            self._index[ex.id] = i
        self._validate()
        self._X = None
        self._Y = None

    def _validate(self) -> None:
        if not self.examples:
            return
        first = self.examples[0]
        for ex in self.examples:
            if ex.labels.shape != first.labels.shape:
                raise DatasetError(f"example {ex.id!r} has {ex.labels.size} labels, expected {first.labels.size}", [ex.id])
            if (ex.features is None) != (first.features is None):
                raise DatasetError(f"example {ex.id!r} mixes feature and token inputs", [ex.id])
            if ex.features is not None and ex.features.shape != first.features.shape:
                raise DatasetError(f"example {ex.id!r} has feature width {ex.features.size}", [ex.id])
            if ex.counterfactual_of is None:
                continue
            other = self._index.get(ex.counterfactual_of)
            if other is None:
                raise DatasetError(
                    f"example {ex.id!r} links to missing id {ex.counterfactual_of!r}", [ex.id, ex.counterfactual_of]
                )
            if other == self._index[ex.id]:
                raise DatasetError(f"example {ex.id!r} links to itself", [ex.id])
            if np.array_equal(self.examples[other].labels, ex.labels):
                raise DatasetError(
                    f"counterfactual {ex.id!r} has the same labels as {ex.counterfactual_of!r}",
                    [ex.id, ex.counterfactual_of],
                )

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, i: int) -> Example:
        return self.examples[i]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.examples == other.examples

    def __repr__(self) -> str:
        return f"Dataset({self.name or 'unnamed'}, n={len(self)}, pairs={len(pair_index(self))})"

    def index_of(self, example_id: str) -> int:
        try:
            return self._index[example_id]
        except KeyError:
            raise KeyError(f"no example with id {example_id!r}") from None

    @property
    def ids(self) -> list[str]:
        return [ex.id for ex in self.examples]

    @property
    def is_text(self) -> bool:
        return bool(self.examples) and self.examples[0].tokens is not None

    @property
    def n_labels(self) -> int:
        return int(self.examples[0].labels.size) if self.examples else 0

    @property
    def feature_width(self) -> int:
        if not self.examples or self.is_text:
            return 0
        return int(self.examples[0].features.size)

    @property
    def X(self) -> np.ndarray:
        if self.is_text:
            raise TypeError("token dataset has no feature matrix; encode its tokens instead")
        if self._X is None:
            width = self.feature_width
            self._X = np.array([ex.features for ex in self.examples]).reshape(len(self), width)
            self._X.setflags(write=False)
        return self._X

    @property
    def Y(self) -> np.ndarray:
        if self._Y is None:
            self._Y = np.array([ex.labels for ex in self.examples], dtype=np.int64).reshape(len(self), self.n_labels)
            self._Y.setflags(write=False)
        return self._Y

    @property
    def tokens(self) -> list[tuple[int, ...]]:
        return [ex.tokens for ex in self.examples]

    def inputs(self):
        """Feature matrix, or the token lists of a text dataset."""
        return self.tokens if self.is_text else self.X

    def subset(self, indices: Iterable[int], name: str = "") -> "Dataset":
        """Examples at ``indices``; links leaving the subset are dropped."""
        chosen = [self.examples[i] for i in indices]
        kept = {ex.id for ex in chosen}
        out = [
            ex if ex.counterfactual_of is None or ex.counterfactual_of in kept else replace(ex, counterfactual_of=None)
            for ex in chosen
        ]
        return Dataset(out, name or self.name)

    def originals(self) -> "Dataset":
        """Drop every example that is a counterfactual of another one."""
        return self.subset([i for i, ex in enumerate(self.examples) if ex.counterfactual_of is None], self.name)

    def with_split(self, split: str) -> "Dataset":
        return Dataset([replace(ex, split=split) for ex in self.examples], self.name)


def pair_index(dataset: Dataset) -> list[CounterfactualPair]:
    """Undirected pairs from the links, one per pair, in dataset order.

    A link stated from both sides still yields a single pair.  The linking
    example (the counterfactual) is endpoint ``a``.
    """
    seen = set()
    pairs = []
    for i, ex in enumerate(dataset.examples):
        if ex.counterfactual_of is None:
            continue
        pair = CounterfactualPair(i, dataset.index_of(ex.counterfactual_of))
        if pair not in seen:
            seen.add(pair)
            pairs.append(pair)
    return pairs


def load_jsonl(path) -> Dataset:
    path = Path(path)
    examples = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(record, dict):
                raise DatasetError(f"{path}:{lineno}: expected a JSON object")
            try:
                examples.append(Example.from_record(record))
            except DatasetError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}", exc.ids) from None
    try:
        return Dataset(examples, path.stem)
    except DatasetError as exc:
        raise DatasetError(f"{path}: {exc}", exc.ids) from None


def save_jsonl(dataset: Dataset, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for ex in dataset:
            fh.write(json.dumps(ex.to_record()) + "\n")


def mask_features(x, mask_indices: Sequence[int]) -> np.ndarray:
    """Copy of ``x`` with the given feature columns set to zero."""
    x = np.array(x, dtype=np.float64, copy=True)
    width = x.shape[-1]
    idx = np.asarray(list(mask_indices), dtype=np.int64)
    bad = idx[(idx < 0) | (idx >= width)]
    if bad.size:
        raise IndexError(f"mask index {int(bad[0])} out of range for {width} features")
    x[..., idx] = 0.0
    return x


def split(dataset: Dataset, fractions: Sequence[float], seed: int = 0, names: Sequence[str] | None = None) -> list[Dataset]:
    """Random partition that keeps each counterfactual with its original.

    Linked examples form connected groups that are assigned as a unit, so
    part sizes follow ``fractions`` only up to group granularity.
    """
    fractions = np.asarray(fractions, dtype=np.float64)
    if fractions.ndim != 1 or fractions.size == 0 or (fractions < 0).any() or not np.isclose(fractions.sum(), 1.0):
        raise ValueError("fractions must be non-negative and sum to 1")
    parent = list(range(len(dataset)))

    def root(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for pair in pair_index(dataset):
        ra, rb = root(pair.a), root(pair.b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    groups: dict[int, list[int]] = {}
    for i in range(len(dataset)):
        groups.setdefault(root(i), []).append(i)
    order = list(groups.values())
    np.random.default_rng(seed).shuffle(order)

    bounds = np.cumsum(fractions) * len(dataset)
    parts: list[list[int]] = [[] for _ in fractions]
    placed = 0
    for group in order:
        k = min(int(np.searchsorted(bounds, placed, side="right")), len(parts) - 1)
        parts[k].extend(group)
        placed += len(group)
    names = list(names) if names is not None else [dataset.name] * len(parts)
    return [dataset.subset(sorted(p), names[k]) for k, p in enumerate(parts)]


# ---------------------------------------------------------------------------
# Spurious-correlation benchmark
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpuriousSpec:
    """Feature layout: column 0 is the core signal, column 1 the spurious cue."""

    d: int = 10
    noise: float = 0.1
    rho: float = 0.95
    label_noise: float = 0.2
    cf_fraction: float = 0.25
    spurious_scale: float = 2.0

    CORE = 0
    SPURIOUS = 1

    def __post_init__(self):
        if self.d < 3:
            raise ValueError("need at least 3 features (core, spurious, distractors)")
        if not 0.5 < self.rho <= 1.0:
            raise ValueError("rho must lie in (0.5, 1]")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if not 0.0 <= self.label_noise < 0.5:
            raise ValueError("label_noise must lie in [0, 0.5)")
        if not 0.0 <= self.cf_fraction <= 1.0:
            raise ValueError("cf_fraction must lie in [0, 1]")
        if self.spurious_scale <= 0:
            raise ValueError("spurious_scale must be positive")


def _spurious_block(rng: np.random.Generator, m: int, spec: SpuriousSpec, p_match: float):
    latent = rng.integers(0, 2, size=m)
    x = np.empty((m, spec.d))
    x[:, spec.CORE] = (2 * latent - 1) + rng.normal(0.0, spec.noise, size=m)
    y = np.where(rng.random(m) < spec.label_noise, 1 - latent, latent)
    agree = rng.random(m) < p_match
    x[:, spec.SPURIOUS] = spec.spurious_scale * np.where(agree, 2 * y - 1, 1 - 2 * y)
    x[:, 2:] = rng.normal(0.0, 1.0, size=(m, spec.d - 2))
    return x, y, latent


def _examples(prefix: str, x: np.ndarray, y: np.ndarray, split_name: str) -> list[Example]:
    return [Example(f"{prefix}-{i:05d}", np.array([y[i]]), x[i], split=split_name) for i in range(len(y))]


def gen_spurious_ood(
    n: int = 2000,
    d: int = 10,
    noise: float = 0.1,
    rho: float = 0.95,
    seed: int = 0,
    *,
    label_noise: float = 0.2,
    cf_fraction: float = 0.25,
    spurious_scale: float = 2.0,
    n_val: int | None = None,
    n_test: int | None = None,
) -> tuple[Dataset, Dataset, Dataset]:
    """Binary task with one causal and one spurious feature.

    The label is the sign of the core coordinate, flipped with probability
    ``label_noise``.  In train and val the spurious coordinate agrees with
    the label with probability ``rho``; in the OOD test split it agrees with
    probability ``1 - rho``.  A ``cf_fraction`` share of training examples
    gets a counterfactual partner whose core coordinate is negated and whose
    label is flipped, with everything else held fixed.  Partners are only
    made for correctly labelled originals, so every edit flips the true label.
    """
    spec = SpuriousSpec(d, noise, rho, label_noise, cf_fraction, spurious_scale)
    if n < 1:
        raise ValueError("n must be positive")
    n_val = n // 4 if n_val is None else n_val
    n_test = n if n_test is None else n_test
    rng = np.random.default_rng(seed)

    x_tr, y_tr, latent = _spurious_block(rng, n, spec, rho)
    train = _examples("tr", x_tr, y_tr, "train")
    # an edit that negates the core flips the true label, so only originals
    # whose observed label is the true one get a partner
    clean = np.flatnonzero(y_tr == latent)
    for i in clean[: int(round(cf_fraction * n))]:
        x_cf = x_tr[i].copy()
        x_cf[spec.CORE] = -x_cf[spec.CORE]
        train.append(Example(f"tr-{i:05d}-cf", np.array([1 - y_tr[i]]), x_cf, counterfactual_of=f"tr-{i:05d}"))

    x_va, y_va, _ = _spurious_block(rng, n_val, spec, rho)
    x_te, y_te, _ = _spurious_block(rng, n_test, spec, 1.0 - rho)
    return (
        Dataset(train, "train"),
        Dataset(_examples("va", x_va, y_va, "val"), "val"),
        Dataset(_examples("te", x_te, y_te, "test_ood"), "test_ood"),
    )


# ---------------------------------------------------------------------------
# Masked multi-label benchmark
# ---------------------------------------------------------------------------


def default_cooccurrence(n_classes: int, within: float = 0.9, across: float = 0.05) -> np.ndarray:
    """Classes come in adjacent pairs (0-1, 2-3, ...) that nearly always appear together."""
    m = np.full((n_classes, n_classes), across)
    for c in range(0, n_classes - 1, 2):
        m[c, c + 1] = m[c + 1, c] = within
    np.fill_diagonal(m, 1.0)
    return m


@dataclass
class MultilabelBenchmark:
    train: Dataset
    test_original: Dataset
    test_edited: Dataset
    test_hard_edited: Dataset
    val: Dataset
    prototypes: np.ndarray = field(repr=False)

    def __iter__(self):
        return iter((self.train, self.test_original, self.test_edited, self.test_hard_edited))


def gen_masked_multilabel(
    n: int = 2000,
    n_classes: int = 10,
    cooccurrence: np.ndarray | None = None,
    prototype_dim: int = 64,
    seed: int = 0,
    *,
    noise: float = 0.3,
    cf_fraction: float = 0.25,
    n_val: int | None = None,
    n_test: int | None = None,
    clear_all: bool = False,
) -> MultilabelBenchmark:
    """Multi-label task where removing an object's prototype removes its label.

    Each example picks a primary class uniformly, then adds every other
    class ``c`` with probability ``cooccurrence[primary, c]``.  Features are
    the sum of the present classes' prototypes plus Gaussian noise.  An edit
    subtracts the prototype of one present class and clears its label;
    with ``clear_all`` the training counterfactuals remove every present
    class instead (test edits always remove one).  The hard split keeps the
    edited test examples whose label pattern never occurs in training.
    A separate validation sample (no edits) is drawn for model selection.
    """
    if n < 1 or n_classes < 2 or prototype_dim < 1:
        raise ValueError("n, n_classes and prototype_dim must be positive (n_classes >= 2)")
    if not 0.0 <= cf_fraction <= 1.0:
        raise ValueError("cf_fraction must lie in [0, 1]")
    m = default_cooccurrence(n_classes) if cooccurrence is None else np.asarray(cooccurrence, dtype=np.float64)
    if m.shape != (n_classes, n_classes):
        raise ValueError(f"co-occurrence matrix must be {n_classes}x{n_classes}")
    if not np.allclose(m, m.T) or (m < 0).any() or (m > 1).any():
        raise ValueError("co-occurrence matrix must be symmetric with entries in [0, 1]")
    n_val = n // 4 if n_val is None else n_val
    n_test = n if n_test is None else n_test
    rng = np.random.default_rng(seed)
    prototypes = rng.normal(0.0, 1.0, size=(n_classes, prototype_dim)) / np.sqrt(prototype_dim)

    def sample(count: int):
        primary = rng.integers(0, n_classes, size=count)
        y = (rng.random((count, n_classes)) < m[primary]).astype(np.int64)
        y[np.arange(count), primary] = 1
        x = y @ prototypes + rng.normal(0.0, noise, size=(count, prototype_dim))
        return x, y

    def edit(x: np.ndarray, y: np.ndarray, everything: bool = False):
        present = np.flatnonzero(y)
        removed = present if everything else present[[rng.integers(len(present))]]
        y_new = y.copy()
        y_new[removed] = 0
        return x - prototypes[removed].sum(axis=0), y_new

    x_tr, y_tr = sample(n)
    train = [Example(f"tr-{i:05d}", y_tr[i], x_tr[i]) for i in range(n)]
    for i in range(int(round(cf_fraction * n))):
        x_cf, y_cf = edit(x_tr[i], y_tr[i], clear_all)
        train.append(Example(f"tr-{i:05d}-cf", y_cf, x_cf, counterfactual_of=f"tr-{i:05d}"))

    x_va, y_va = sample(n_val)
    val = [Example(f"va-{i:05d}", y_va[i], x_va[i], split="val") for i in range(n_val)]
    x_te, y_te = sample(n_test)
    originals = [Example(f"te-{i:05d}", y_te[i], x_te[i], split="test_original") for i in range(n_test)]
    edited = []
    for i in range(n_test):
        x_ed, y_ed = edit(x_te[i], y_te[i])
        edited.append(Example(f"te-{i:05d}-ed", y_ed, x_ed, split="test_edited"))

    seen = {tuple(ex.labels) for ex in train}
    hard = [replace(ex, split="test_hard_edited") for ex in edited if tuple(ex.labels) not in seen]
    if not hard:
        raise ValueError("co-occurrence model leaves no unseen label patterns for the hard split")
    return MultilabelBenchmark(
        Dataset(train, "train"),
        Dataset(originals, "test_original"),
        Dataset(edited, "test_edited"),
        Dataset(hard, "test_hard_edited"),
        Dataset(val, "val"),
        prototypes,
    )


# ---------------------------------------------------------------------------
# Paired text benchmark
# ---------------------------------------------------------------------------

POSITIVE_WORDS = ("good", "great", "superb", "lovely", "brilliant", "moving", "clever", "fun")
NEGATIVE_WORDS = ("bad", "awful", "dreadful", "ugly", "dull", "flat", "stupid", "boring")
GENRE_WORDS = (("comedy", "romance", "musical"), ("horror", "thriller", "war"))
FILLER_WORDS = tuple(
    "the a film movie plot actor scene story script cast it was very quite and but with this that".split()
)


@dataclass
class TextBenchmark:
    train: Dataset
    val: Dataset
    test_original: Dataset
    test_edited: Dataset
    vocabulary: dict[str, int]

    def __iter__(self):
        return iter((self.train, self.val, self.test_original, self.test_edited))


def gen_paired_text(
    n: int = 1000,
    rho: float = 0.9,
    seed: int = 0,
    *,
    length: int = 12,
    sentiment_words: int = 2,
    cf_fraction: float = 0.5,
) -> TextBenchmark:
    """Sentiment-like reviews with a genre word that tracks the label.

    A review with label 1 contains positive sentiment words; the genre word
    comes from the first genre group with probability ``rho`` when the
    label is 1 (and from the second group when it is 0).  The edit of a
    review swaps each sentiment word for its antonym and flips the label.
    The test split breaks the genre correlation (probability ``1 - rho``).
    The vocabulary is built from the training reviews by frequency; words
    never seen in training get an out-of-range id.
    """
    if not 0.5 <= rho <= 1.0:
        raise ValueError("rho must lie in [0.5, 1]")
    if length < sentiment_words + 1:
        raise ValueError("length must leave room for sentiment and genre words")
    rng = np.random.default_rng(seed)
    antonym = dict(zip(POSITIVE_WORDS, NEGATIVE_WORDS)) | dict(zip(NEGATIVE_WORDS, POSITIVE_WORDS))

    def review(label: int, p_match: float) -> list[str]:
        words = list(rng.choice(FILLER_WORDS, size=length - sentiment_words - 1))
        pool = POSITIVE_WORDS if label else NEGATIVE_WORDS
        matching = rng.random() < p_match
        group = GENRE_WORDS[0] if matching == bool(label) else GENRE_WORDS[1]
        for w in list(rng.choice(pool, size=sentiment_words)) + [rng.choice(group)]:
            words.insert(int(rng.integers(len(words) + 1)), str(w))
        return [str(w) for w in words]

    def block(count: int, p_match: float):
        labels = rng.integers(0, 2, size=count)
        return [review(int(y), p_match) for y in labels], labels

    tr_words, tr_y = block(n, rho)
    va_words, va_y = block(max(1, n // 4), rho)
    te_words, te_y = block(n, 1.0 - rho)
    n_cf = int(round(cf_fraction * n))
    cf_words = [[antonym.get(w, w) for w in words] for words in tr_words[:n_cf]]
    ed_words = [[antonym.get(w, w) for w in words] for words in te_words]

    vocabulary = build_vocabulary(tr_words + cf_words)
    unknown = len(vocabulary)  # out of range, so encoders skip it

    def encode(words):
        return tuple(vocabulary.get(w, unknown) for w in words)

    train = [Example(f"tr-{i:05d}", [tr_y[i]], tokens=encode(w)) for i, w in enumerate(tr_words)]
    train += [
        Example(f"tr-{i:05d}-cf", [1 - tr_y[i]], tokens=encode(w), counterfactual_of=f"tr-{i:05d}")
        for i, w in enumerate(cf_words)
    ]
    val = [Example(f"va-{i:05d}", [va_y[i]], tokens=encode(w), split="val") for i, w in enumerate(va_words)]
    test = [Example(f"te-{i:05d}", [te_y[i]], tokens=encode(w), split="test_original") for i, w in enumerate(te_words)]
    edited = [
        Example(f"te-{i:05d}-ed", [1 - te_y[i]], tokens=encode(w), split="test_edited") for i, w in enumerate(ed_words)
    ]
    return TextBenchmark(
        Dataset(train, "train"),
        Dataset(val, "val"),
        Dataset(test, "test_original"),
        Dataset(edited, "test_edited"),
        vocabulary,
    )


def label_pattern_counts(dataset: Dataset) -> Counter:
    return Counter(tuple(int(v) for v in ex.labels) for ex in dataset)
