import json
import socket
from pathlib import Path

import pytest
from typer.testing import CliRunner

import src.main as main_module
from src import datagen
from src.manifest import MANIFEST_NAME, read_manifest

runner = CliRunner()


@pytest.fixture
def scenario_json(tmp_path: Path, small_scenario) -> Path:
    path = tmp_path / "scenario.json"
    path.write_text(small_scenario.model_dump_json())
    return path


@pytest.fixture
def dataset(tmp_path: Path, scenario_json: Path) -> Path:
    out = tmp_path / "data.csv"
    result = runner.invoke(
        main_module.app,
        [
            "--out-dir", str(tmp_path / "gen"),
            "datagen", "--config", str(scenario_json), "--out", str(out),
        ],
    )
    assert result.exit_code == 0, result.output
    return out


def test_datagen_writes_csv_and_manifest(tmp_path: Path, scenario_json: Path) -> None:
    out_dir = tmp_path / "run"
    result = runner.invoke(
        main_module.app,
        [
            "--out-dir", str(out_dir), "--seed", "9",
            "datagen", "--config", str(scenario_json), "--dirty-fraction", "0.05",
        ],
    )
    assert result.exit_code == 0, result.output
    assert "600 samples (30 dirty)" in result.output
    assert len(datagen.read_csv(out_dir / "dataset.csv")) == 600

    manifest = read_manifest(out_dir)
    assert manifest.command == "datagen"
    assert manifest.seeds == {"scenario": 9}
    assert manifest.config_paths == {"scenario": str(scenario_json)}


def test_datagen_seed_changes_stream(tmp_path: Path, scenario_json: Path) -> None:
    texts = []
    for seed in ("1", "1", "2"):
        out = tmp_path / f"d{len(texts)}.csv"
        args = ["--out-dir", str(tmp_path), "--seed", seed, "datagen"]
        args += ["--config", str(scenario_json), "--out", str(out)]
        assert runner.invoke(main_module.app, args).exit_code == 0
        texts.append(out.read_text())
    assert texts[0] == texts[1]
    assert texts[0] != texts[2]


def test_bad_config_is_usage_error(tmp_path: Path) -> None:
    missing = runner.invoke(main_module.app, ["datagen", "--config", str(tmp_path / "nope.json")])
    assert missing.exit_code == 2

    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    assert runner.invoke(main_module.app, ["datagen", "--config", str(broken)]).exit_code == 2

    invalid = tmp_path / "invalid.json"
    invalid.write_text(json.dumps({"duration_s": -5}))
    assert runner.invoke(main_module.app, ["datagen", "--config", str(invalid)]).exit_code == 2


def test_unknown_log_level(tmp_path: Path) -> None:
    result = runner.invoke(
        main_module.app, ["--log-level", "LOUD", "--out-dir", str(tmp_path), "datagen"]
    )
    assert result.exit_code == 2
    assert not (tmp_path / MANIFEST_NAME).exists()


def test_train_unknown_model(tmp_path: Path, dataset: Path) -> None:
    result = runner.invoke(
        main_module.app, ["--out-dir", str(tmp_path), "train", "svm", "--data", str(dataset)]
    )
    assert result.exit_code == 2


def test_train_missing_data(tmp_path: Path) -> None:
    result = runner.invoke(
        main_module.app,
        ["--out-dir", str(tmp_path), "train", "gbdt", "--data", str(tmp_path / "missing.csv")],
    )
    assert result.exit_code == 2


def test_train_then_eval_gbdt(tmp_path: Path, dataset: Path) -> None:
    params = tmp_path / "gbdt.json"
    params.write_text(json.dumps({"n_trees": 5, "max_depth": 3}))
    run_dir = tmp_path / "run"

    trained = runner.invoke(
        main_module.app,
        [
            "--out-dir", str(run_dir), "train", "gbdt",
            "--data", str(dataset), "--window", "5", "--config", str(params),
        ],
    )
    assert trained.exit_code == 0, trained.output
    assert "GBDT held-out metrics" in trained.output
    assert (run_dir / "metrics_gbdt.csv").read_text().splitlines()[0] == (
        "appliance,accuracy,recall,precision,f1"
    )
    assert len(list(run_dir.glob("gbdt_*.json"))) == 1

    evaluated = runner.invoke(
        main_module.app, ["--out-dir", str(run_dir), "eval", "--data", str(dataset)]
    )
    assert evaluated.exit_code == 0, evaluated.output
    assert (run_dir / "eval_gbdt.csv").exists()
    assert read_manifest(run_dir).command == "eval"
    assert read_manifest(run_dir).model_versions["model"].startswith("gbdt-")


def test_eval_without_model_is_usage_error(tmp_path: Path, dataset: Path) -> None:
    result = runner.invoke(
        main_module.app, ["--out-dir", str(tmp_path / "empty"), "eval", "--data", str(dataset)]
    )
    assert result.exit_code == 2
    result = runner.invoke(
        main_module.app,
        [
            "--out-dir", str(tmp_path), "eval",
            "--data", str(dataset), "--model", str(tmp_path / "gbdt_x.json"),
        ],
    )
    assert result.exit_code == 2


def test_bench_usage_and_runtime_errors(tmp_path: Path) -> None:
    profile = tmp_path / "profile.json"
    profile.write_text(json.dumps({"levels": [1], "think_time_s": 0, "repetitions": 1}))
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        dead = f"127.0.0.1:{s.getsockname()[1]}"

    base = ["--out-dir", str(tmp_path), "bench"]
    bad_format = runner.invoke(
        main_module.app,
        base + ["run", "--target", dead, "--profile", str(profile), "--format", "xml"],
    )
    assert bad_format.exit_code == 2
    unreachable = runner.invoke(
        main_module.app, base + ["run", "--target", dead, "--profile", str(profile)]
    )
    assert unreachable.exit_code == 1
    bad_range = runner.invoke(
        main_module.app, base + ["saturate", "--target", dead, "--start", "10", "--max", "5"]
    )
    assert bad_range.exit_code == 2


def test_demo_rejects_worker_count(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    called = []
    monkeypatch.setattr(main_module.orchestrator, "run_demo", lambda *a, **kw: called.append(a))
    result = runner.invoke(main_module.app, ["--out-dir", str(tmp_path), "demo", "--workers", "9"])
    assert result.exit_code == 2
    assert called == []
