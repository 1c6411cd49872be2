import socket
from pathlib import Path

import pytest

from src import datagen, orchestrator
from src.errors import StateError
from src.models import (
    CloudConfig,
    DemoConfig,
    GbdtTrainParams,
    LoadProfile,
    S2PDims,
    S2PTrainConfig,
)
from src.preprocess import validity_mask
from src.result_store import ResultStore
from src.worker import InferenceService, WorkerServer


@pytest.fixture
def synthetic_worker(tmp_path: Path):
    cfg = CloudConfig(
        synthetic_service_ms=0.0,
        results_dir=tmp_path / "results",
        listen="127.0.0.1:0",
        consume=False,
    )
    server = WorkerServer(InferenceService(cfg, ResultStore(cfg.results_dir)), cfg.listen)
    server.start()
    try:
        yield server
    finally:
        server.stop()


def _dead_address() -> str:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return f"127.0.0.1:{s.getsockname()[1]}"


def test_expected_windows_counts_clean_samples(small_scenario) -> None:
    demo = DemoConfig(scenario=small_scenario, window=5)
    assert orchestrator.expected_windows(demo) == 600 - 5 + 1

    dirty = small_scenario.model_copy(update={"dirty_fraction": 0.05})
    stream, _ = datagen.inject_dirty(datagen.generate_scenario(dirty), 0.05, dirty.seed)
    demo = DemoConfig(scenario=dirty, window=5)
    assert orchestrator.expected_windows(demo) == int(validity_mask(stream).sum()) - 4


def test_sample_window(tmp_path: Path, scenario_frame) -> None:
    dataset = datagen.write_csv(scenario_frame, tmp_path / "data.csv")
    window = orchestrator.sample_window(dataset, 5)
    assert len(window) == 5
    assert all(len(row) == 2 for row in window)
    with pytest.raises(StateError):
        orchestrator.sample_window(dataset, 10_000)


def test_write_config_round_trips(tmp_path: Path) -> None:
    cfg = CloudConfig(synthetic_service_ms=3.0, consume=False, worker_name="w-7")
    path = orchestrator.write_config(tmp_path / "nested" / "w.json", cfg)
    assert CloudConfig.model_validate_json(path.read_text()) == cfg


def test_child_command_carries_global_options(tmp_path: Path) -> None:
    sup = orchestrator.Supervisor(tmp_path, log_level="DEBUG")
    cmd = sup.command("broker", ["broker", "--listen", "127.0.0.1:1"])
    assert cmd[1:3] == ["-m", "src.main"]
    assert cmd[cmd.index("--log-level") + 1] == "DEBUG"
    assert cmd[cmd.index("--out-dir") + 1] == str(tmp_path / "broker")
    assert cmd[-3:] == ["broker", "--listen", "127.0.0.1:1"]


def test_readiness_checks(synthetic_worker) -> None:
    dead = _dead_address()
    assert not orchestrator.port_open(dead)
    assert not orchestrator.http_ready(dead)
    assert orchestrator.port_open(synthetic_worker.address)
    assert orchestrator.http_ready(synthetic_worker.address)


def test_drain_times_out_without_results(synthetic_worker) -> None:
    assert orchestrator.drain(synthetic_worker.address, "house-1", 0, timeout=1.0) == []
    with pytest.raises(StateError):
        orchestrator.drain(synthetic_worker.address, "house-1", 1, timeout=0.3, poll=0.1)


def test_supervisor_reports_dead_child(tmp_path: Path) -> None:
    with orchestrator.Supervisor(tmp_path / "logs") as sup:
        with pytest.raises(StateError):
            sup.run_to_completion("bad", ["no-such-command"], timeout=60)
    assert (tmp_path / "logs" / "bad.log").exists()


@pytest.mark.slow
def test_demo_end_to_end(tmp_path: Path, small_scenario) -> None:
    quick = LoadProfile(levels=[1, 2], think_time_s=0.0, repetitions=1)
    demo = DemoConfig(
        scenario=small_scenario.model_copy(update={"duration_s": 4000.0}),
        training_scenario=small_scenario,
        window=31,
        batch_threshold=16,
        workers=2,
        gbdt=GbdtTrainParams(n_trees=3, max_depth=2),
        s2p=S2PTrainConfig(epochs=1, batch_size=64, window=31),
        s2p_dims=S2PDims(kernel=3, channels=2, conv_layers=1, d_model=4, heads=2, ffn_hidden=4),
        profile=quick,
        scaling_workers=[1],
        scaling_service_ms=1.0,
        scaling_profile=LoadProfile(levels=[1], think_time_s=0.0, repetitions=1),
        saturation_start=2,
        saturation_step=4,
        saturation_max=6,
        drain_timeout_s=60.0,
    )
    result = orchestrator.run_demo(demo, tmp_path, seed=0)

    # 2000 samples, W=31
    assert result.cloud_results == orchestrator.expected_windows(demo) == 1970
    assert result.cloud_ts == sorted(set(result.cloud_ts))
    start = small_scenario.start_ts_ms
    assert result.cloud_ts[0] == start + 15 * 2000
    assert result.cloud_ts[-1] == start + 1984 * 2000
    assert set(result.models) == {"gbdt", "s2p"}
    assert set(result.reports) == {"cloud-infer", "edge-lookup", "scaling-1", "saturation"}
    assert all(path.exists() for path in result.reports.values())
    assert result.comparison is not None and result.comparison.exists()
    assert [s.error_count for s in result.scaling[1].levels] == [0]
    assert set(result.saturation) == {"balancer-1", "bare-worker"}
    assert all(threshold >= 2 for threshold in result.saturation.values())
    assert (tmp_path / "reports" / "metrics_gbdt.csv").exists()
