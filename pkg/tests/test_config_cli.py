import csv
import json

import pytest
import yaml

from decaug import cli
from decaug.config import (
    PRESETS,
    ConfigError,
    config_hash,
    load_config,
    load_preset,
    parse_spec,
    run_id,
    sweep_cells,
    with_overrides,
)

FAST = ["--set", "train.epochs=3", "--set", "dataset.n_train=300", "--set", "dataset.n_test=50"]


@pytest.mark.parametrize("name", PRESETS)
def test_presets_parse_and_round_trip(name):
    spec = load_preset(name)
    again = parse_spec(yaml.safe_load(spec.dump()))
    assert again == spec
    assert config_hash(again) == config_hash(spec)


def test_minimal_file_fills_defaults(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("name: tiny\n")
    spec = load_config(path)
    assert spec.seeds == [0] and spec.train.lr == 0.1 and spec.train.epochs == 500
    assert spec.train.weights.lambda_orth == 0.01 and spec.dataset.kind == "colored_mnist"


def test_misspelled_key_named(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("name: x\ntrain:\n  weights:\n    lamda_orth: 0.1\n")
    with pytest.raises(ConfigError, match="lamda_orth") as info:
        load_config(path)
    assert info.value.field == "train.weights.lamda_orth"


def test_missing_name_and_bad_values(tmp_path):
    with pytest.raises(ConfigError, match="name"):
        parse_spec({"train": {}})
    with pytest.raises(ConfigError):
        parse_spec({"name": "x", "train": {"weights": {"lambda1": -1}}})
    with pytest.raises(ConfigError, match="test_env.p_match"):
        parse_spec({"name": "x", "dataset": {"test_env": {"name": "t", "size": 3}}})
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "missing.yaml")


def test_sweep_grid_and_unique_ids():
    spec = with_overrides(load_preset("twofactor_decaug"), {})
    spec.sweep = {"lambda_orth": [0, 0.0005, 0.001, 0.01], "epsilon": [1, 2]}
    spec.seeds = [0, 1, 2]
    cells = sweep_cells(spec)
    assert len(cells) == 8
    ids = {run_id(cell, s) for _, cell in cells for s in spec.seeds}
    assert len(ids) == 8 * 3
    assert cells[0][1].train.weights.lambda_orth == 0
    assert cells[0][0] == "twofactor_decaug[lambda_orth=0,epsilon=1]"


def test_run_id_ignores_seeds_and_output():
    a = load_preset("twofactor_erm")
    b = load_preset("twofactor_erm")
    b.output_dir, b.seeds = "elsewhere", [5]
    assert run_id(a, 1) == run_id(b, 1)
    c = with_overrides(a, {"lr": 0.2})
    assert run_id(a, 1) != run_id(c, 1)


def test_unknown_axis():
    with pytest.raises(ConfigError):
        with_overrides(load_preset("twofactor_erm"), {"seeds": [1]})


def test_cli_train_evaluate_report(tmp_path, capsys):
    out = str(tmp_path)
    assert cli.run_command(["train", "--preset", "twofactor_decaug", "--out", out, "--seed", "1", *FAST]) == 0
    runs = list((tmp_path / "runs").iterdir())
    assert len(runs) == 1
    run = runs[0]
    for name in ("config.snapshot", "metrics.jsonl", "checkpoint", "record.json"):
        assert (run / name).exists()
    assert len((run / "metrics.jsonl").read_text().splitlines()) == 3
    record = json.loads((run / "record.json").read_text())
    assert record["seed"] == 1 and run.name.endswith("-s1")

    # a rerun is skipped and leaves files untouched
    stamp = (run / "metrics.jsonl").stat().st_mtime_ns
    assert cli.run_command(["train", "--preset", "twofactor_decaug", "--out", out, "--seed", "1", *FAST]) == 0
    assert (run / "metrics.jsonl").stat().st_mtime_ns == stamp

    capsys.readouterr()
    assert cli.run_command(["evaluate", "--run", str(run)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [ln.split("\t")[0] for ln in lines] == ["train", "test"]
    assert float(lines[1].split("\t")[1]) == pytest.approx(record["test_accuracy"])

    assert cli.run_command(["saliency", "--run", str(run), "--n", "3"]) == 0
    assert (run / "saliency.png").exists()

    assert cli.run_command(["report", "--dir", out]) == 0
    rows = list(csv.DictReader((tmp_path / "report" / "summary.csv").open()))
    assert rows[0]["method"] == "twofactor_decaug" and rows[0]["n_seeds"] == "1"
    first = (tmp_path / "report" / "summary.txt").read_text()
    assert cli.run_command(["report", "--dir", out]) == 0
    assert (tmp_path / "report" / "summary.txt").read_text() == first


def test_cli_sweep(tmp_path, capsys):
    rc = cli.run_command(["sweep", "--preset", "twofactor_decaug", "--out", str(tmp_path), "--seeds", "0,1",
                          "--axis", "lambda_orth=0,0.01", *FAST])
    assert rc == 0
    assert len(list((tmp_path / "runs").iterdir())) == 4
    out = capsys.readouterr().out
    assert "4 runs (2 cells x 2 seeds)" in out and "lambda_orth=0.01" in out


def test_cli_gen_data(tmp_path):
    dest = tmp_path / "bundle"
    assert cli.run_command(["gen-data", "--preset", "twofactor_erm", "--dest", str(dest), *FAST]) == 0
    assert (dest / "meta.json").exists() and (dest / "env0.bin").exists()


def test_cli_env_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("DECAUG_OUTPUT_DIR", str(tmp_path / "envout"))
    monkeypatch.setenv("DECAUG_NUM_THREADS", "1")
    assert cli.run_command(["train", "--preset", "twofactor_erm", *FAST]) == 0
    assert len(list((tmp_path / "envout" / "runs").iterdir())) == 3


def test_cli_report_empty(tmp_path, capsys):
    assert cli.run_command(["report", "--dir", str(tmp_path)]) == 1
    assert "no run records found" in capsys.readouterr().err


def test_cli_config_error_exit_code(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("name: x\ntrain:\n  lamda: 1\n")
    assert cli.run_command(["train", "--config", str(path)]) == 1
    assert "train.lamda" in capsys.readouterr().err
    assert cli.run_command(["train", "--preset", "nope"]) == 1


def test_cli_usage_error_exits_2():
    with pytest.raises(SystemExit) as info:
        cli.run_command(["train", "--bogus-flag"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        cli.run_command([])
    assert info.value.code == 2
