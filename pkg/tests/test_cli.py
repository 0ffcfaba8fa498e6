import json
import subprocess
import sys

import pytest

from gradsup.cli import main
from gradsup.data import load_jsonl
from gradsup.models import load_checkpoint


@pytest.fixture(scope="module")
def spurious_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("spurious")
    assert main(["gen", "spurious", "--n", "200", "--seed", "1", "--out", str(out)]) == 0
    return out


def train_args(data, out, *extra):
    return ["train", "--data", str(data), "--out", str(out), "--epochs", "2", *extra]


def test_gen_writes_splits_and_manifest(spurious_dir):
    names = sorted(p.name for p in spurious_dir.iterdir())
    assert names == ["manifest.json", "test_ood.jsonl", "train.jsonl", "val.jsonl"]
    manifest = json.loads((spurious_dir / "manifest.json").read_text())
    assert manifest["params"]["seed"] == 1 and manifest["params"]["rho"] == 0.95
    assert manifest["params"]["sizes"]["train"] == len(load_jsonl(spurious_dir / "train.jsonl"))


def test_gen_is_byte_identical(tmp_path, spurious_dir):
    again = tmp_path / "again"
    assert main(["gen", "spurious", "--n", "200", "--seed", "1", "--out", str(again)]) == 0
    for path in spurious_dir.iterdir():
        assert (again / path.name).read_bytes() == path.read_bytes()


@pytest.mark.parametrize("kind", ["multilabel", "text"])
def test_gen_other_kinds(tmp_path, kind):
    assert main(["gen", kind, "--n", "120", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "test_edited.jsonl").exists()


def test_gen_rejects_small_rho(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["gen", "spurious", "--rho", "0.3", "--out", str(tmp_path)])
    assert info.value.code == 2
    assert "rho must exceed 0.5" in capsys.readouterr().err


def test_train_missing_data_dir(tmp_path, capsys):
    missing = tmp_path / "nowhere"
    assert main(train_args(missing, tmp_path / "m.json")) == 2
    assert str(missing) in capsys.readouterr().err


@pytest.mark.parametrize("ablation", ["none", "no-cf-data", "random-relations", "shuffled-labels"])
def test_train_ablations(spurious_dir, tmp_path, ablation):
    out = tmp_path / "m.json"
    assert main(train_args(spurious_dir, out, "--ablation", ablation, "--lambda", "1")) == 0
    model = load_checkpoint(out)
    assert model.layer_sizes == (10, 1)
    run = json.loads(out.with_suffix(".run.json").read_text())
    assert run["ablation"] == ablation and run["config"]["gs"]["lambda"] == 1.0
    header = out.with_suffix(".history.csv").read_text().splitlines()[0]
    assert header == "epoch,main_loss,gs_loss,val_metric"


def test_lambda_zero_equals_plain_augmentation(spurious_dir, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(train_args(spurious_dir, a, "--lambda", "0")) == 0
    assert main(train_args(spurious_dir, b, "--lambda", "0", "--ablation", "none")) == 0
    assert a.read_bytes() == b.read_bytes()


def test_train_with_config_file(spurious_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"lambda": 2.0, "batch_size": 16, "hidden": [5], "activation": "tanh"}))
    out = tmp_path / "m.json"
    assert main(train_args(spurious_dir, out, "--config", str(cfg))) == 0
    model = load_checkpoint(out)
    assert model.layer_sizes == (10, 5, 1) and model.activations == ("tanh", "identity")
    assert json.loads(out.with_suffix(".run.json").read_text())["config"]["batch_size"] == 16


def test_eval_single_and_ensemble(spurious_dir, tmp_path):
    single = tmp_path / "single.json"
    assert main(train_args(spurious_dir, single, "--lambda", "1")) == 0
    report = tmp_path / "r.json"
    assert main(["eval", "--model", str(single), "--data", str(spurious_dir), "--report", str(report)]) == 0
    body = json.loads(report.read_text())
    assert body["n_models"] == 1 and [r["split"] for r in body["rows"]] == ["val", "test_ood"]
    assert "train" in body["alignment"] and report.with_suffix(".txt").exists()

    ens = tmp_path / "ens.json"
    assert main(train_args(spurious_dir, ens, "--ensemble", "3")) == 0
    members = [str(tmp_path / f"ens-{i}.json") for i in range(3)]
    assert main(["eval", "--model", *members, "--data", str(spurious_dir), "--report", str(report)]) == 0
    assert json.loads(report.read_text())["n_models"] == 3


def test_eval_report_is_deterministic(spurious_dir, tmp_path):
    model = tmp_path / "m.json"
    assert main(train_args(spurious_dir, model)) == 0
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for path in (a, b):
        assert main(["eval", "--model", str(model), "--data", str(spurious_dir), "--report", str(path)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_eval_with_chance_model(spurious_dir, tmp_path):
    model, chance = tmp_path / "m.json", tmp_path / "chance.json"
    assert main(train_args(spurious_dir, model)) == 0
    assert main(train_args(spurious_dir, chance, "--ablation", "shuffled-labels")) == 0
    report = tmp_path / "r.json"
    args = ["eval", "--model", str(model), "--data", str(spurious_dir), "--report", str(report)]
    assert main([*args, "--chance-model", str(chance)]) == 0
    rows = json.loads(report.read_text())["rows"]
    assert rows[-1]["split"] == "test_ood (chance model)"


def test_eval_corrupt_checkpoint(spurious_dir, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("garbage")
    assert main(["eval", "--model", str(bad), "--data", str(spurious_dir), "--report", str(tmp_path / "r.json")]) != 0
    assert "bad.json" in capsys.readouterr().err


def test_eval_arity_mismatch(tmp_path, spurious_dir):
    ml = tmp_path / "ml"
    assert main(["gen", "multilabel", "--n", "120", "--out", str(ml)]) == 0
    model = tmp_path / "m.json"
    assert main(train_args(spurious_dir, model)) == 0
    assert main(["eval", "--model", str(model), "--data", str(ml), "--report", str(tmp_path / "r.json")]) != 0


def test_plot_boundary(spurious_dir, tmp_path, capsys):
    model = tmp_path / "m.json"
    assert main(train_args(spurious_dir, model)) == 0
    svg = tmp_path / "plot.svg"
    base = ["plot-boundary", "--model", str(model), "--data", str(spurious_dir), "--res", "3", "--out", str(svg)]
    assert main(base) == 1
    assert "projection" in capsys.readouterr().err
    assert main([*base, "--dims", "0", "1"]) == 0
    assert svg.read_text().startswith("<svg") and '<g id="pairs"' in svg.read_text()
    assert len(svg.with_suffix(".csv").read_text().splitlines()) == 1 + 9


def test_module_entry_point(tmp_path):
    result = subprocess.run(
        [sys.executable, "-m", "gradsup", "gen", "spurious", "--n", "20", "--out", str(tmp_path)],
        capture_output=True,
        text=True,
    )
    assert result.returncode == 0 and (tmp_path / "train.jsonl").exists()
