"""Command-line interface: subcommands, exit codes, artifacts."""

import json
from pathlib import Path

import pytest

from eventqa.cli import main as cli_main
from tests.test_pipeline import tiny_experiment


@pytest.fixture(scope="module")
def config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "experiment.json"
    path.write_text(json.dumps(tiny_experiment().to_json(), indent=2))
    return path


def test_generate_data_writes_dataset_and_provenance(config_path, tmp_path):
    out = tmp_path / "data"
    rc = cli_main(["generate-data", "--config", str(config_path),
                   "--out", str(out)])
    assert rc == 0
    assert (out / "dataset.jsonl").exists()
    assert (out / "schema.json").exists()
    prov = json.loads((out / "provenance.json").read_text())
    assert "rules" in prov and "config_hash" in prov
    lines = (out / "dataset.jsonl").read_text().splitlines()
    assert len(lines) == 30


def test_generate_data_rerun_identical(config_path, tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    cli_main(["generate-data", "--config", str(config_path), "--out", str(out_a)])
    cli_main(["generate-data", "--config", str(config_path), "--out", str(out_b)])
    assert (out_a / "dataset.jsonl").read_bytes() == \
        (out_b / "dataset.jsonl").read_bytes()


def test_malformed_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"generator": {"n_clients": 4}}))  # missing fields
    rc = cli_main(["generate-data", "--config", str(bad),
                   "--out", str(tmp_path / "o")])
    assert rc == 2
    assert "config error" in capsys.readouterr().err


def test_full_cli_workflow(config_path, tmp_path, capsys):
    out = tmp_path / "run"
    for cmd in (["fit-codec"], ["pretrain-encoder"], ["warmup-lm"], ["train"]):
        rc = cli_main(cmd + ["--config", str(config_path), "--out", str(out)])
        assert rc == 0, f"{cmd} failed"
    assert (out / "codec.json").exists()
    assert (out / "pipeline.bin").exists()

    rc = cli_main(["eval", "--out", str(out),
                   "--report", str(out / "report.json")])
    assert rc == 0
    report = json.loads((out / "report.json").read_text())
    assert {t["task"] for t in report["tasks"]} == \
        {"last_category", "mode_category"}
    captured = capsys.readouterr().out
    assert "baseline" in captured

    # zero-shot guard: trained task rejected (exit 2), held-out accepted
    rc = cli_main(["eval", "--out", str(out), "--tasks", "last_category",
                   "--zero-shot"])
    assert rc == 2
    rc = cli_main(["eval", "--out", str(out), "--tasks", "least_category",
                   "--zero-shot"])
    assert rc == 0

    # ask on one exported sequence
    data_dir = tmp_path / "data"
    cli_main(["generate-data", "--config", str(config_path),
              "--out", str(data_dir)])
    first_line = (data_dir / "dataset.jsonl").read_text().splitlines()[0]
    one = tmp_path / "one.jsonl"
    one.write_text(first_line + "\n")
    rc = cli_main(["ask", "--out", str(out), "--sequence", str(one),
                   "--question",
                   "What is the category of the last event?"])
    assert rc == 0
    assert "generation:" in capsys.readouterr().out

    rc = cli_main(["ask", "--out", str(out), "--sequence", str(one),
                   "--question", "Why is the sky blue?"])
    assert rc == 2
    assert "Known templates" in capsys.readouterr().err


def test_baseline_command(config_path, capsys):
    rc = cli_main(["baseline", "--config", str(config_path)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "last_category" in out and "mode" in out


def test_set_overrides(config_path, tmp_path):
    out = tmp_path / "data"
    rc = cli_main(["generate-data", "--config", str(config_path),
                   "--set", "generator.n_clients=5", "--out", str(out)])
    assert rc == 0
    assert len((out / "dataset.jsonl").read_text().splitlines()) == 5


def test_divergence_exits_4_with_step_number(config_path, tmp_path, capsys):
    out = tmp_path / "run"
    assert cli_main(["fit-codec", "--config", str(config_path),
                     "--out", str(out)]) == 0
    rc = cli_main(["pretrain-encoder", "--config", str(config_path),
                   "--out", str(out),
                   "--set", "pretrain.peak_lr=1e18",
                   "--set", "optimizer.clip_norm=0",
                   "--set", "pretrain.epochs=30"])
    assert rc == 4
    err = capsys.readouterr().err
    assert "Diverged at step" in err


def test_seed_override_changes_data(config_path, tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    cli_main(["generate-data", "--config", str(config_path),
              "--seed", "100", "--out", str(out_a)])
    cli_main(["generate-data", "--config", str(config_path),
              "--seed", "101", "--out", str(out_b)])
    assert (out_a / "dataset.jsonl").read_bytes() != \
        (out_b / "dataset.jsonl").read_bytes()
