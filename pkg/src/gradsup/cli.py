"""Command-line interface: ``gradsup gen | train | eval | plot-boundary``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from functools import partial
from pathlib import Path


from . import __version__
from .boundary import boundary_grid, render_svg, write_grid_csv
from .data import (
    Dataset,
    DatasetError,
    gen_masked_multilabel,
    gen_paired_text,
    gen_spurious_ood,
    load_jsonl,
    pair_index,
    save_jsonl,
)
from .evaluation import evaluate_suite
from .models import CheckpointError, init_model, load_checkpoint, save_checkpoint
from .training import (
    TrainConfig,
    TrainingDivergedError,
    config_to_dict,
    load_train_config,
    randomize_relations,
    shuffle_labels,
    train_ensemble,
)

ABLATIONS = ("none", "random-relations", "no-cf-data", "shuffled-labels")
MANIFEST = "manifest.json"


class CliError(Exception):
    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


def _require(path: Path, kind: str = "path") -> Path:
    if not path.exists():
        raise CliError(f"{kind} not found: {path}", code=2)
    return path


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    out = Path(args.out)
    params = {"kind": args.kind, "seed": args.seed, "n": args.n}
    try:
        if args.kind == "spurious":
            params.update(d=args.d, noise=args.noise, rho=args.rho, label_noise=args.label_noise,
                          cf_fraction=args.cf_fraction, spurious_scale=args.spurious_scale)
            train, val, test = gen_spurious_ood(
                args.n, args.d, args.noise, args.rho, args.seed, label_noise=args.label_noise,
                cf_fraction=args.cf_fraction, spurious_scale=args.spurious_scale,
            )
            files = {"train": train, "val": val, "test_ood": test}
        elif args.kind == "multilabel":
            params.update(n_classes=args.classes, prototype_dim=args.prototype_dim, noise=args.noise,
                          cf_fraction=args.cf_fraction, clear_all=args.clear_all)
            bench = gen_masked_multilabel(
                args.n, args.classes, None, args.prototype_dim, args.seed, noise=args.noise,
                cf_fraction=args.cf_fraction, clear_all=args.clear_all,
            )
            files = {
                "train": bench.train,
                "val": bench.val,
                "test_original": bench.test_original,
                "test_edited": bench.test_edited,
                "test_hard_edited": bench.test_hard_edited,
            }
        else:
            params.update(rho=args.rho, cf_fraction=args.cf_fraction)
            bench = gen_paired_text(args.n, args.rho, args.seed, cf_fraction=args.cf_fraction)
            params["vocabulary"] = bench.vocabulary
            files = {
                "train": bench.train,
                "val": bench.val,
                "test_original": bench.test_original,
                "test_edited": bench.test_edited,
            }
    except ValueError as exc:
        raise CliError(f"invalid parameters: {exc}", code=2) from None
    out.mkdir(parents=True, exist_ok=True)
    for name, ds in files.items():
        save_jsonl(ds, out / f"{name}.jsonl")
    params["files"] = {name: f"{name}.jsonl" for name in files}
    params["sizes"] = {name: len(ds) for name, ds in files.items()}
    _write_json(out / MANIFEST, {"generator": "gradsup", "version": __version__, "params": params})
    print(f"wrote {len(files)} splits to {out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _load_split(data: Path, name: str, required: bool = True) -> Dataset | None:
    path = data / f"{name}.jsonl"
    if not path.exists():
        if required:
            raise CliError(f"data file not found: {path}", code=2)
        return None
    return load_jsonl(path)


def _vocab_size(data: Path, datasets) -> int:
    manifest = data / MANIFEST
    if manifest.exists():
        vocab = json.loads(manifest.read_text(encoding="utf-8")).get("params", {}).get("vocabulary")
        if vocab:
            return len(vocab)
    return 1 + max((max(t) for ds in datasets if ds is not None for t in ds.tokens if t), default=0)


def _member_paths(out: Path, k: int) -> list[Path]:
    if k == 1:
        return [out]
    return [out.with_name(f"{out.stem}-{i}{out.suffix}") for i in range(k)]


def cmd_train(args) -> int:
    data = _require(Path(args.data), "data directory")
    config, extra = load_train_config(_require(Path(args.config), "config file")) if args.config else (TrainConfig(), {})
    overrides = {
        k: v
        for k, v in {
            "seed": args.seed,
            "max_epochs": args.epochs,
            "batch_size": args.batch_size,
            "ensemble_size": args.ensemble,
            "optimizer": args.optimizer,
        }.items()
        if v is not None
    }
    config = replace(config, **overrides)
    if args.lam is not None:
        config = config.with_lam(args.lam)

    train_set = _load_split(data, "train")
    val_set = _load_split(data, "val", required=False)
    pairs = pair_index(train_set)
    make_pairs = None
    if args.ablation == "no-cf-data":
        train_set = train_set.originals()
        pairs = []
    elif args.ablation == "random-relations":
        make_pairs = partial(randomize_relations, pairs, train_set)
    elif args.ablation == "shuffled-labels":
        # model selection must not see real labels either
        train_set = shuffle_labels(train_set, config.seed)
        if val_set is not None:
            val_set = shuffle_labels(val_set, config.seed + 1)
        pairs = []

    hidden = extra.get("hidden", args.hidden if args.hidden is not None else [])
    activation = extra.get("activation", args.activation)
    if train_set.is_text:
        embed_dim = extra.get("embed_dim", args.embed_dim)
        sizes = (embed_dim, *hidden, train_set.n_labels)
        template = init_model(sizes, activation, config.seed, vocab_size=_vocab_size(data, [train_set, val_set]),
                              max_tokens=extra.get("max_tokens", args.max_tokens))
    else:
        sizes = (train_set.feature_width, *hidden, train_set.n_labels)
        template = init_model(sizes, activation, config.seed)

    results = train_ensemble(template, train_set, pairs, val_set, config, make_pairs=make_pairs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    for path, (params, history) in zip(_member_paths(out, len(results)), results):
        save_checkpoint(params, path)
        history.to_csv(path.with_suffix(".history.csv"))
    _write_json(
        out.with_suffix(".run.json"),
        {"ablation": args.ablation, "config": config_to_dict(config), "layer_sizes": list(sizes),
         "activation": activation, "members": [p.name for p in _member_paths(out, len(results))]},
    )
    print(f"trained {len(results)} model(s); checkpoint(s) at {out}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

EVAL_ORDER = ("train", "val", "test", "test_ood", "test_original", "test_edited", "test_hard_edited")


def cmd_eval(args) -> int:
    data = _require(Path(args.data), "data directory")
    models = []
    for path in args.model:
        path = _require(Path(path), "checkpoint")
        try:
            models.append(load_checkpoint(path))
        except CheckpointError as exc:
            raise CliError(str(exc)) from None
    if len({m.n_outputs for m in models}) != 1:
        raise CliError("checkpoints disagree on output arity")
    splits = {name: _load_split(data, name, required=False) for name in EVAL_ORDER}
    splits = {name: ds for name, ds in splits.items() if ds is not None and len(ds)}
    train_set = splits.pop("train", None)
    if not splits:
        raise CliError(f"no evaluation splits in {data}", code=2)
    for name, ds in splits.items():
        if ds.n_labels != models[0].n_outputs:
            raise CliError(f"model has {models[0].n_outputs} outputs but {name} has {ds.n_labels} labels")
    pair_sets = {"train": (train_set, pair_index(train_set))} if train_set is not None else {}
    chance_model = None
    if args.chance_model:
        chance_model = load_checkpoint(_require(Path(args.chance_model), "checkpoint"))
    model = models[0] if len(models) == 1 else models
    report = evaluate_suite(model, splits, pair_sets, reference=train_set, chance_model=chance_model)
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json(), encoding="utf-8")
    out.with_suffix(".txt").write_text(report.to_text(), encoding="utf-8")
    sys.stdout.write(report.to_text())
    return 0


# ---------------------------------------------------------------------------
# plot-boundary
# ---------------------------------------------------------------------------


def cmd_plot_boundary(args) -> int:
    model_path = _require(Path(args.model), "checkpoint")
    data_path = _require(Path(args.data), "data")
    if data_path.is_dir():
        data_path = _require(data_path / "train.jsonl", "data file")
    try:
        model = load_checkpoint(model_path)
    except CheckpointError as exc:
        raise CliError(str(exc)) from None
    ds = load_jsonl(data_path)
    try:
        grid = boundary_grid(model, ds.X, args.res, args.dims, args.output)
    except (ValueError, TypeError) as exc:
        raise CliError(str(exc)) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    labels = ds.Y[:, args.output] if ds.n_labels > args.output else ds.Y[:, 0]
    out.write_text(render_svg(grid, ds.X, labels, [tuple(p) for p in pair_index(ds)]), encoding="utf-8")
    write_grid_csv(grid, out.with_suffix(".csv"))
    print(f"wrote {out} and {out.with_suffix('.csv')}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _rho(text: str) -> float:
    value = float(text)
    if not 0.5 < value <= 1.0:
        raise argparse.ArgumentTypeError(f"rho must exceed 0.5 and be at most 1 (got {text})")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradsup", description="Gradient supervision with counterfactual pairs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic benchmark")
    gen.add_argument("kind", choices=("spurious", "multilabel", "text"))
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--n", type=int, default=2000)
    gen.add_argument("--d", type=int, default=10)
    gen.add_argument("--noise", type=float, default=None, help="core noise (spurious) or feature noise (multilabel)")
    gen.add_argument("--rho", type=_rho, default=None)
    gen.add_argument("--label-noise", type=float, default=0.2)
    gen.add_argument("--cf-fraction", type=float, default=None)
    gen.add_argument("--spurious-scale", type=float, default=2.0)
    gen.add_argument("--classes", type=int, default=10)
    gen.add_argument("--prototype-dim", type=int, default=64)
    gen.add_argument("--clear-all", action="store_true", help="training edits remove every present class")
    gen.set_defaults(func=cmd_gen)

    tr = sub.add_parser("train", help="train a model (or ensemble)")
    tr.add_argument("--data", required=True, help="directory with train.jsonl (and val.jsonl)")
    tr.add_argument("--lambda", dest="lam", type=float, default=None)
    tr.add_argument("--config", default=None, help="JSON experiment config")
    tr.add_argument("--out", required=True, help="checkpoint path")
    tr.add_argument("--ablation", choices=ABLATIONS, default="none")
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--epochs", type=int, default=None)
    tr.add_argument("--batch-size", type=int, default=None)
    tr.add_argument("--ensemble", type=int, default=None)
    tr.add_argument("--optimizer", choices=("adadelta", "sgd"), default=None)
    tr.add_argument("--hidden", type=int, nargs="*", default=None, help="hidden layer widths")
    tr.add_argument("--activation", default="relu", choices=("relu", "sigmoid", "tanh"))
    tr.add_argument("--embed-dim", type=int, default=50)
    tr.add_argument("--max-tokens", type=int, default=32)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate checkpoints on every split of a data directory")
    ev.add_argument("--model", required=True, nargs="+", help="one checkpoint, or several for an ensemble")
    ev.add_argument("--data", required=True)
    ev.add_argument("--report", required=True, help="JSON report path (a .txt table is written alongside)")
    ev.add_argument("--chance-model", default=None, help="checkpoint trained on shuffled labels")
    ev.set_defaults(func=cmd_eval)

    pb = sub.add_parser("plot-boundary", help="score grid of a 2-D view as SVG and CSV")
    pb.add_argument("--model", required=True)
    pb.add_argument("--data", required=True, help="JSONL file, or a directory holding train.jsonl")
    pb.add_argument("--res", type=int, default=50)
    pb.add_argument("--out", required=True, help="SVG path (the CSV grid is written alongside)")
    pb.add_argument("--dims", type=int, nargs=2, default=None, metavar=("I", "J"))
    pb.add_argument("--output", type=int, default=0, help="logit index for multi-output models")
    pb.set_defaults(func=cmd_plot_boundary)
    return parser


_GEN_DEFAULTS = {
    "spurious": {"noise": 0.1, "rho": 0.95, "cf_fraction": 0.25},
    "multilabel": {"noise": 0.3, "rho": None, "cf_fraction": 0.25},
    "text": {"noise": None, "rho": 0.9, "cf_fraction": 0.5},
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "gen":
        for key, value in _GEN_DEFAULTS[args.kind].items():
            if getattr(args, key) is None:
                setattr(args, key, value)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"gradsup: error: {exc}", file=sys.stderr)
        return exc.code
    except (DatasetError, CheckpointError, TrainingDivergedError, ValueError, OSError) as exc:
        print(f"gradsup: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
