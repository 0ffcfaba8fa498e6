"""Acceptance gate: each test checks one criterion at its stated tolerance.

Training-based criteria share cached runs (module fixtures) so the whole
battery stays within a few minutes on one CPU.
"""

import time
from fractions import Fraction

import numpy as np
import pytest

from gradsup.autodiff import finite_difference_check
from gradsup.data import Dataset, Example, gen_masked_multilabel, gen_paired_text, gen_spurious_ood, pair_index
from gradsup.evaluation import (
    accuracy,
    chance_level,
    dataset_map,
    gradient_alignment,
    linearization_gap,
    mean_average_precision,
    validation_metric,
)
from gradsup.models import init_model, logits
from gradsup.objective import GsConfig, batch_gs_loss, combined_loss, gs_loss
from gradsup.training import TrainConfig, main_loss, randomize_relations, shuffle_labels, train

pytestmark = pytest.mark.slow

SEEDS = range(10)
SPURIOUS_LAM = 10.0
MULTILABEL_LAM = 1.0
SPURIOUS_MODELS = {"linear": (10, 1), "mlp": (10, 16, 1)}


def config(seed: int, lam: float = 0.0) -> TrainConfig:
    return TrainConfig(batch_size=32, max_epochs=20, patience=10, seed=seed, gs=GsConfig(lam=lam))


def test_gs_loss_exactness(criterion):
    start = time.perf_counter()
    cases = [((1, 0), (3, 0), 0.0), ((1, 0), (0, 1), 1.0), ((1, 0), (-2, 0), 2.0), ((1, 2), (2, 1), 0.2)]
    errors = [abs(gs_loss(np.array(g, float), np.array(h, float)) - want) for g, h, want in cases]
    elapsed = time.perf_counter() - start
    criterion(
        "GS loss exactness",
        max(errors) < 1e-12 and elapsed < 1.0,
        f"max error {max(errors):.1e} (tol 1e-12), {elapsed:.3f}s (limit 1s)",
    )


def _fd_trial(seed: int) -> float:
    rng = np.random.default_rng(seed)
    d = 4
    params = init_model((d, 5, 1), "sigmoid", seed)
    X = rng.normal(size=(6, d))
    first = rng.integers(0, 2, size=3)
    examples = []
    for k in range(3):
        examples.append(Example(f"o{k}", [first[k]], X[2 * k]))
        examples.append(Example(f"c{k}", [1 - first[k]], X[2 * k + 1], counterfactual_of=f"o{k}"))
    ds = Dataset(examples)
    pairs = pair_index(ds)
    gs_cfg = GsConfig(lam=float(rng.uniform(0.5, 5.0)))

    def loss_fn(values):
        main = main_loss(logits(params, ds.X, values), ds.Y, "binary")
        return combined_loss(main, batch_gs_loss(params, ds, pairs, gs_cfg, values), gs_cfg.lam)

    return finite_difference_check(loss_fn, params.arrays(), eps=1e-5)


def test_second_order_gradients(criterion):
    start = time.perf_counter()
    worst = max(_fd_trial(seed) for seed in range(100))
    elapsed = time.perf_counter() - start
    criterion(
        "second-order gradient correctness",
        worst < 1e-4 and elapsed < 30,
        f"max relative error {worst:.2e} over 100 trials (tol 1e-4), {elapsed:.1f}s (limit 30s)",
    )


def test_gs_loss_scale_and_symmetry(criterion):
    rng = np.random.default_rng(0)
    n = 10_000
    dims = rng.integers(2, 12, size=n)
    worst_scale = worst_sym = 0.0
    in_range = True
    for d in np.unique(dims):
        m = int(np.sum(dims == d))
        g = rng.normal(size=(m, d))
        h = rng.normal(size=(m, d))
        c = np.exp(rng.uniform(-5, 5, size=(m, 1)))
        base = gs_loss(g, h)
        worst_scale = max(worst_scale, np.max(np.abs(gs_loss(c * g, h) - base)), np.max(np.abs(gs_loss(g, c * h) - base)))
        worst_sym = max(worst_sym, np.max(np.abs(gs_loss(h, g) - base)))
        in_range &= bool(np.all((base >= -1e-10) & (base <= 2 + 1e-10)))
    passed = worst_scale < 1e-10 and worst_sym < 1e-10 and in_range
    criterion(
        "GS loss scale/symmetry/range",
        passed,
        f"{n} pairs: scale dev {worst_scale:.1e}, symmetry dev {worst_sym:.1e}, range ok={in_range} (tol 1e-10)",
    )


def oracle_ap(scores, labels):
    """Exhaustive rational AP: interpolated precision from every prefix of the ranking."""
    n = len(scores)
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    rel = [int(labels[i]) for i in order]
    n_pos = sum(rel)
    if n_pos == 0:
        return None
    precision, recall, tp = [], [], 0
    for k in range(n):
        tp += rel[k]
        precision.append(Fraction(tp, k + 1))
        recall.append(Fraction(tp, n_pos))
    total = sum(max(precision[m] for m in range(n) if recall[m] >= recall[k]) for k in range(n) if rel[k])
    return total / n_pos


def test_map_oracle_equivalence(criterion):
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    checked = mismatches = 0
    while checked < 500:
        n, C = int(rng.integers(1, 9)), int(rng.integers(1, 4))
        # half the instances use small integer scores to exercise tie-breaking
        scores = rng.integers(0, 4, size=(n, C)).astype(float) if checked % 2 else rng.normal(size=(n, C))
        labels = rng.integers(0, 2, size=(n, C))
        aps = [oracle_ap(list(scores[:, c]), list(labels[:, c])) for c in range(C)]
        aps = [a for a in aps if a is not None]
        if not aps:
            continue
        checked += 1
        mismatches += mean_average_precision(scores, labels) != float(sum(aps) / len(aps))
    elapsed = time.perf_counter() - start
    criterion(
        "mAP oracle equivalence",
        mismatches == 0 and elapsed < 30,
        f"{mismatches} mismatches in {checked} instances (n<=8, C<=3), {elapsed:.1f}s (limit 30s)",
    )


# ---------------------------------------------------------------------------
# Spurious benchmark runs (shared by the ablation and alignment criteria)
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def spurious_runs():
    acc = {fam: {k: [] for k in ("no_cf", "aug", "gs", "random")} for fam in SPURIOUS_MODELS}
    align = {fam: {k: [] for k in ("init", "aug", "gs")} for fam in SPURIOUS_MODELS}
    seconds = {k: 0.0 for k in ("no_cf", "aug", "gs", "random")}
    for seed in SEEDS:
        train_set, val, test = gen_spurious_ood(2000, 10, 0.1, 0.95, seed)
        pairs = pair_index(train_set)
        random_pairs = randomize_relations(pairs, train_set, seed)
        for fam, sizes in SPURIOUS_MODELS.items():
            init = init_model(sizes, "relu", seed)
            align[fam]["init"].append(gradient_alignment(init, pairs, train_set))
            runs = {
                "no_cf": (train_set.originals(), [], 0.0),
                "aug": (train_set, [], 0.0),
                "gs": (train_set, pairs, SPURIOUS_LAM),
                "random": (train_set, random_pairs, SPURIOUS_LAM),
            }
            for kind, (data, kind_pairs, lam) in runs.items():
                start = time.perf_counter()
                model, _ = train(init, data, kind_pairs, val, config(seed, lam))
                seconds[kind] += time.perf_counter() - start
                acc[fam][kind].append(accuracy(model, test))
                if kind in align[fam]:
                    align[fam][kind].append(gradient_alignment(model, pairs, train_set))
    return acc, align, seconds


def _pct(values) -> float:
    return 100 * float(np.mean(values))


def test_ablation_ordering(criterion, spurious_runs):
    acc, _, seconds = spurious_runs
    elapsed = seconds["no_cf"] + seconds["aug"] + seconds["gs"]
    parts, passed = [], elapsed < 300
    for fam in SPURIOUS_MODELS:
        no_cf, aug, gs = (_pct(acc[fam][k]) for k in ("no_cf", "aug", "gs"))
        passed &= gs >= aug + 5 and aug >= no_cf
        parts.append(f"{fam}: no-cf {no_cf:.1f} <= aug {aug:.1f}, gs {gs:.1f} (margin {gs - aug:+.1f}, need >= +5)")
    criterion("ablation ordering (OOD accuracy)", passed, "; ".join(parts) + f"; {elapsed:.0f}s (limit 300s)")


def test_random_relations_ablation(criterion, spurious_runs):
    acc, _, seconds = spurious_runs
    elapsed = seconds["random"] + seconds["aug"]
    parts, passed = [], elapsed < 300
    for fam in SPURIOUS_MODELS:
        aug, rand = _pct(acc[fam]["aug"]), _pct(acc[fam]["random"])
        passed &= rand <= aug + 1
        parts.append(f"{fam}: random {rand:.1f} vs aug {aug:.1f} (need <= aug + 1)")
    criterion("random-relations ablation", passed, "; ".join(parts) + f"; {elapsed:.0f}s (limit 300s)")


def test_gradient_alignment_improves(criterion, spurious_runs):
    _, align, _ = spurious_runs
    parts, passed = [], True
    for fam in SPURIOUS_MODELS:
        init, aug, gs = (float(np.mean(align[fam][k])) for k in ("init", "aug", "gs"))
        passed &= gs >= init + 0.5 and gs > aug
        parts.append(f"{fam}: init {init:+.3f} -> gs {gs:+.3f} (gain {gs - init:+.3f}, need >= 0.5), lambda=0 {aug:+.3f}")
    criterion("gradient alignment improves", passed, "; ".join(parts))


def test_taylor_remainder(criterion):
    rng = np.random.default_rng(0)
    ratios = []
    for seed in range(100):
        d = int(rng.integers(2, 8))
        model = init_model((d, int(rng.integers(2, 12)), 1), "sigmoid", seed)
        x_i = rng.normal(size=d)
        x_j = x_i + rng.normal(size=d) * 0.5
        full, _ = linearization_gap(model, x_i, x_j)
        half, _ = linearization_gap(model, x_i, x_i + 0.5 * (x_j - x_i))
        ratios.append(half / full)
    median = float(np.median(ratios))
    linear = init_model((6, 1), "relu", 3)
    linear_gaps = [linearization_gap(linear, rng.normal(size=6), rng.normal(size=6))[0] for _ in range(100)]
    passed = 0.2 <= median <= 0.3 and all(g == 0.0 for g in linear_gaps)
    criterion(
        "Taylor remainder scaling",
        passed,
        f"median half/full gap ratio {median:.4f} over 100 sigmoid MLPs (need [0.2, 0.3]); "
        f"linear max gap {max(linear_gaps)!r}",
    )


# ---------------------------------------------------------------------------
# Chance baseline on every synthetic benchmark
# ---------------------------------------------------------------------------


def _chance_runs(make, build, splits):
    model_scores = {name: [] for name in splits}
    chance = {name: [] for name in splits}
    for seed in SEEDS:
        parts = make(seed)
        train_set, val = parts["train"], parts["val"]
        shuffled_train = shuffle_labels(train_set, seed)
        shuffled_val = shuffle_labels(val, seed + 1)
        model, _ = train(build(seed), shuffled_train, [], shuffled_val, config(seed))
        for name in splits:
            model_scores[name].append(validation_metric(model, parts[name]))
            chance[name].append(chance_level(train_set, parts[name]))
    return {name: (_pct(model_scores[name]), _pct(chance[name])) for name in splits}


def _spurious_parts(seed):
    train_set, val, test = gen_spurious_ood(seed=seed)
    return {"train": train_set, "val": val, "test_ood": test}


def _multilabel_parts(seed):
    b = gen_masked_multilabel(seed=seed)
    return {
        "train": b.train,
        "val": b.val,
        "test_original": b.test_original,
        "test_edited": b.test_edited,
        "test_hard_edited": b.test_hard_edited,
    }


def _text_parts(seed):
    b = gen_paired_text(seed=seed)
    return {"train": b.train, "val": b.val, "test_original": b.test_original, "test_edited": b.test_edited}


TEXT_VOCAB = len(gen_paired_text(seed=0).vocabulary)


def test_chance_baseline(criterion):
    results = {
        "spurious": _chance_runs(_spurious_parts, lambda s: init_model((10, 16, 1), "relu", s), ["test_ood"]),
        "multilabel": _chance_runs(
            _multilabel_parts,
            lambda s: init_model((64, 64, 10), "relu", s),
            ["test_original", "test_edited", "test_hard_edited"],
        ),
        "text": _chance_runs(
            _text_parts,
            lambda s: init_model((50, 1), "relu", s, vocab_size=TEXT_VOCAB, max_tokens=32),
            ["test_original", "test_edited"],
        ),
    }
    parts, passed = [], True
    for bench, rows in results.items():
        for split, (score, chance) in rows.items():
            passed &= abs(score - chance) <= 3
            parts.append(f"{bench}/{split} {score:.1f} vs chance {chance:.1f}")
    criterion("chance baseline (within 3 points)", passed, "; ".join(parts))


def test_lambda_zero_identity(criterion):
    train_set, val, _ = gen_spurious_ood(600, seed=4)
    init = init_model((10, 16, 1), "relu", 4)
    cfg = TrainConfig(batch_size=32, max_epochs=8, patience=8, seed=4, gs=GsConfig(lam=0.0))
    baseline, base_hist = train(init, train_set, [], val, cfg)
    with_gs, gs_hist = train(init, train_set, pair_index(train_set), val, cfg)
    same = all(np.array_equal(a, b) for a, b in zip(baseline.arrays(), with_gs.arrays()))
    same &= base_hist.main_loss == gs_hist.main_loss and base_hist.val_metric == gs_hist.val_metric
    criterion("lambda=0 identity", same, f"parameters and loss/metric trajectories bit-identical: {same}")


@pytest.fixture(scope="module")
def multilabel_runs():
    hard = {"aug": [], "gs": []}
    for seed in SEEDS:
        b = gen_masked_multilabel(seed=seed)
        init = init_model((64, 64, 10), "relu", seed)
        for kind, pairs, lam in (("aug", [], 0.0), ("gs", pair_index(b.train), MULTILABEL_LAM)):
            model, _ = train(init, b.train, pairs, b.val, config(seed, lam))
            hard[kind].append(dataset_map(model, b.test_hard_edited))
    return hard


def test_hard_edited_map(criterion, multilabel_runs):
    diffs = np.array(multilabel_runs["gs"]) - np.array(multilabel_runs["aug"])
    margin = 100 * float(diffs.mean())
    criterion(
        "hard-edited mAP gain",
        margin > 0,
        f"aug {_pct(multilabel_runs['aug']):.2f} -> gs {_pct(multilabel_runs['gs']):.2f} "
        f"(mean gain {margin:+.2f} points over {len(diffs)} seeds, need > 0)",
    )
