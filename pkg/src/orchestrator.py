"""
Process supervision and the end-to-end demo.

Every service runs as a child ``python -m src.main`` process with its own log
file; children are stopped with SIGTERM (then SIGKILL) on teardown.
"""

from __future__ import annotations

import logging
import socket
import subprocess
import sys
import time
from contextlib import closing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import requests

from config import settings

from . import bench, datagen, training
from .errors import StateError
from .metrics import write_report_csv
from .models import (
    BalancerConfig,
    CloudConfig,
    DemoConfig,
    EdgeAgentConfig,
    LatencyReport,
    LoadProfile,
)
from .preprocess import validity_mask

log = logging.getLogger(__name__)

ROOT = Path(__file__).resolve().parent.parent
STOP_TIMEOUT = 10.0
HOUSEHOLD_ID = "house-1"


def free_port() -> int:
    with closing(socket.socket(socket.AF_INET, socket.SOCK_STREAM)) as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def local_address() -> str:
    return f"127.0.0.1:{free_port()}"


def port_open(address: str, timeout: float = 0.5) -> bool:
    host, _, port = address.rpartition(":")
    try:
        with socket.create_connection((host, int(port)), timeout=timeout):
            return True
    except OSError:
        return False


def http_ready(address: str, timeout: float = 0.5) -> bool:
    try:
        return requests.get(f"http://{address}/v1/health", timeout=timeout).ok
    except requests.RequestException:
        return False


@dataclass
class Child:
    name: str
    process: subprocess.Popen
    log_path: Path
    address: Optional[str] = None


@dataclass
class Supervisor:
    """Starts CLI subcommands as child processes and tears them all down."""

    log_dir: Path
    log_level: str = "INFO"
    children: Dict[str, Child] = field(default_factory=dict)

    def command(self, name: str, args: List[str]) -> List[str]:
        return [
            sys.executable, "-m", "src.main",
            "--log-level", self.log_level,
            "--out-dir", str(self.log_dir / name),
            *args,
        ]

    def spawn(self, name: str, args: List[str], address: Optional[str] = None) -> Child:
        self.log_dir.mkdir(parents=True, exist_ok=True)
        log_path = self.log_dir / f"{name}.log"
        with open(log_path, "ab") as out:
            process = subprocess.Popen(
                self.command(name, args), cwd=ROOT, stdout=out, stderr=subprocess.STDOUT
            )
        child = Child(name=name, process=process, log_path=log_path, address=address)
        self.children[name] = child
        log.info(f"Started {name} (pid {process.pid})")
        return child

    def wait_ready(self, child: Child, check, timeout: float) -> None:
        """Poll ``check(address)`` until it passes; the child dying is fatal."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if child.process.poll() is not None:
                raise StateError(
                    f"{child.name} exited with code {child.process.returncode}; "
                    f"see {child.log_path}"
                )
            if check(child.address):
                log.debug(f"{child.name} ready on {child.address}")
                return
            time.sleep(0.1)
        raise StateError(f"{child.name} not ready after {timeout:.0f}s; see {child.log_path}")

    def run_to_completion(self, name: str, args: List[str], timeout: float) -> None:
        child = self.spawn(name, args)
        try:
            code = child.process.wait(timeout=timeout)
        except subprocess.TimeoutExpired:
            raise StateError(f"{name} still running after {timeout:.0f}s")
        finally:
            self.children.pop(name, None)
        if code != 0:
            raise StateError(f"{name} exited with code {code}; see {child.log_path}")

    def stop(self, name: str) -> None:
        child = self.children.pop(name, None)
        if child is None or child.process.poll() is not None:
            return
        child.process.terminate()
        try:
            child.process.wait(timeout=STOP_TIMEOUT)
        except subprocess.TimeoutExpired:
            log.warning(f"{name} ignored SIGTERM, killing")
            child.process.kill()
            child.process.wait()

    def stop_all(self) -> None:
        # reverse start order: balancer before workers, workers before broker
        for name in reversed(list(self.children)):
            self.stop(name)

    def __enter__(self) -> "Supervisor":
        return self

    def __exit__(self, *exc) -> None:
        self.stop_all()


# ---------------------------------------------------------------- topology


def write_config(path: Path, cfg) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(cfg.model_dump_json(indent=2) + "\n")
    return path


def start_broker(sup: Supervisor, capacity: int, timeout: float) -> str:
    address = local_address()
    child = sup.spawn(
        "broker", ["broker", "--listen", address, "--default-capacity", str(capacity)], address
    )
    sup.wait_ready(child, port_open, timeout)
    return address


def start_workers(
    sup: Supervisor,
    config_dir: Path,
    count: int,
    base: CloudConfig,
    timeout: float,
    prefix: str = "worker",
) -> List[str]:
    """``count`` workers; only the first one consumes the broker queue."""
    addresses = []
    for i in range(1, count + 1):
        name = f"{prefix}-{i}"
        cfg = base.model_copy(
            update={
                "listen": local_address(),
                "worker_name": name,
                "consume": base.consume and i == 1,
            }
        )
        path = write_config(config_dir / f"{name}.json", cfg)
        child = sup.spawn(name, ["cloud-worker", "--config", str(path)], cfg.listen)
        sup.wait_ready(child, http_ready, timeout)
        addresses.append(cfg.listen)
    return addresses


def start_balancer(
    sup: Supervisor, config_dir: Path, workers: List[str], timeout: float, name: str = "balancer"
) -> str:
    cfg = BalancerConfig(listen=local_address(), workers=workers)
    path = write_config(config_dir / f"{name}.json", cfg)
    child = sup.spawn(name, ["balancer", "--config", str(path)], cfg.listen)
    sup.wait_ready(child, http_ready, timeout)
    return cfg.listen


def expected_windows(demo: DemoConfig) -> int:
    """Cloud results one household's clean live stream should produce."""
    stream = datagen.generate_scenario(demo.scenario)
    if demo.scenario.dirty_fraction:
        stream, _ = datagen.inject_dirty(stream, demo.scenario.dirty_fraction, demo.scenario.seed)
    return max(0, int(validity_mask(stream).sum()) - demo.window + 1)


def cloud_results(target: str, household_id: str, timeout: float) -> List[dict]:
    resp = requests.get(
        bench.target_url(target, "/v1/results"),
        params={"household_id": household_id},
        timeout=timeout,
    )
    resp.raise_for_status()
    return [r for r in resp.json()["records"] if r["producer"] == "cloud"]


def drain(target: str, household_id: str, expected: int, timeout: float, poll: float = 0.5) -> List[dict]:
    """Wait until ``expected`` cloud results are queryable through ``target``."""
    deadline = time.monotonic() + timeout
    seen = -1
    while True:
        try:
            records = cloud_results(target, household_id, timeout=poll * 4)
        except requests.RequestException as e:
            log.debug(f"Drain poll failed: {e}")
            records = []
        if len(records) != seen:
            seen = len(records)
            log.info(f"Drain: {seen}/{expected} cloud results")
        if seen >= expected:
            return records
        if time.monotonic() > deadline:
            raise StateError(f"only {seen} of {expected} cloud results after {timeout:.0f}s")
        time.sleep(poll)


def sample_window(dataset: Path, window: int) -> List[List[float]]:
    frame = training.load_dataset(dataset)
    values = frame[["active_power", "reactive_power"]].to_numpy(dtype=np.float64)
    if len(values) < window:
        raise StateError(f"dataset has fewer than {window} clean rows")
    return values[:window].tolist()


# ---------------------------------------------------------------- demo


@dataclass
class DemoResult:
    dataset: Path
    models: Dict[str, Path]
    cloud_results: int
    reports: Dict[str, Path]
    comparison: Optional[Path]
    scaling: Dict[int, LatencyReport]
    saturation: Dict[str, int] = field(default_factory=dict)
    cloud_ts: List[int] = field(default_factory=list)


def _profile(base: LoadProfile, body: dict) -> LoadProfile:
    return base.model_copy(update={"method": "POST", "path": "/v1/infer", "body": body})


def run_demo(demo: DemoConfig, out_dir: Path, seed: int = 0, log_level: str = "INFO") -> DemoResult:
    out_dir = Path(out_dir)
    config_dir = out_dir / "configs"
    report_dir = out_dir / "reports"
    results_dir = out_dir / "results"

    log.info("Demo step 1: generating training data")
    training_scenario = demo.training_scenario.model_copy(update={"seed": seed + demo.training_scenario.seed})
    stream = datagen.generate_scenario(training_scenario)
    if training_scenario.dirty_fraction:
        stream, _ = datagen.inject_dirty(stream, training_scenario.dirty_fraction, training_scenario.seed)
    dataset = datagen.write_csv(stream, out_dir / "dataset.csv")

    log.info("Demo step 2: training both models")
    models: Dict[str, Path] = {}
    model_dir = out_dir / "models"
    for kind in ("gbdt", "s2p"):
        outcome = training.train_and_evaluate(
            kind,
            dataset,
            model_dir,
            demo.window,
            seed=seed,
            gbdt_params=demo.gbdt,
            s2p_config=demo.s2p,
            s2p_dims=demo.s2p_dims,
        )
        write_report_csv(outcome.report, report_dir / f"metrics_{kind}.csv")
        models[kind] = outcome.model_path

    with Supervisor(out_dir / "logs", log_level) as sup:
        log.info("Demo step 3: starting broker, workers and balancer")
        broker = start_broker(sup, capacity=settings.broker_capacity, timeout=demo.startup_timeout_s)
        cloud = CloudConfig(
            broker_address=broker,
            batch_threshold=demo.batch_threshold,
            s2p_model_path=models["s2p"],
            results_dir=results_dir / "cloud",
        )
        workers = start_workers(sup, config_dir, demo.workers, cloud, demo.startup_timeout_s)
        balancer = start_balancer(sup, config_dir, workers, demo.startup_timeout_s)

        log.info("Demo step 4: streaming the live household through the edge agent")
        edge = EdgeAgentConfig(
            source="live",
            scenario=demo.scenario,
            broker_address=broker,
            household_id=HOUSEHOLD_ID,
            mode=demo.edge_mode,
            window=demo.window,
            gbdt_model_path=models["gbdt"] if demo.edge_mode == "edge-infer" else None,
            results_dir=results_dir / "edge-local",
        )
        edge_path = write_config(config_dir / "edge-agent.json", edge)
        sup.run_to_completion(
            "edge-agent", ["edge-agent", "--config", str(edge_path)], timeout=demo.drain_timeout_s
        )

        log.info("Demo step 5: draining the cloud consumer")
        records = drain(balancer, HOUSEHOLD_ID, expected_windows(demo), demo.drain_timeout_s)

        log.info("Demo step 6: benchmarking cloud-infer and edge-lookup")
        window = sample_window(dataset, demo.window)
        cloud_report = bench.run_load(
            _profile(demo.profile, {"household_id": HOUSEHOLD_ID, "mode": "cloud-infer", "window": window}),
            balancer,
            label="cloud-infer",
        )
        reports = {"cloud-infer": bench.emit_report(cloud_report, report_dir / "latency_cloud.csv")}
        if demo.edge_mode == "edge-infer":
            edge_report = bench.run_load(
                _profile(demo.profile, {"household_id": HOUSEHOLD_ID, "mode": "edge-lookup"}),
                balancer,
                label="edge-lookup",
            )
            reports["edge-lookup"] = bench.emit_report(edge_report, report_dir / "latency_edge.csv")
            comparison = bench.emit_comparison(
                bench.compare_reports(edge_report, cloud_report), report_dir / "edge_vs_cloud.csv"
            )
        else:
            comparison = None
        sup.stop_all()

    scaling: Dict[int, LatencyReport] = {}
    saturation: Dict[str, bench.SaturationResult] = {}
    for count in demo.scaling_workers:
        log.info(f"Demo step 7: worker scaling with {count} worker(s)")
        with Supervisor(out_dir / "logs", log_level) as sup:
            synthetic = CloudConfig(
                broker_address=None,
                consume=False,
                synthetic_service_ms=demo.scaling_service_ms,
                results_dir=results_dir / "scaling",
            )
            workers = start_workers(
                sup, config_dir, count, synthetic, demo.startup_timeout_s, prefix=f"scale{count}-worker"
            )
            balancer = start_balancer(
                sup, config_dir, workers, demo.startup_timeout_s, name=f"scale{count}-balancer"
            )
            infer = _profile(
                demo.scaling_profile,
                {"household_id": HOUSEHOLD_ID, "mode": "cloud-infer", "window": window},
            )
            report = bench.run_load(infer, balancer, label=f"{count}-workers")
            scaling[count] = report
            reports[f"scaling-{count}"] = bench.emit_report(
                report, report_dir / f"latency_{count}workers.csv"
            )

            targets = {f"balancer-{count}": balancer}
            if not saturation:
                targets["bare-worker"] = workers[0]
            for name, target in targets.items():
                log.info(f"Demo step 8: saturating {name}")
                saturation[name] = bench.saturate(
                    target,
                    demo.saturation_start,
                    demo.saturation_step,
                    demo.saturation_max,
                    profile=infer,
                )

    if saturation:
        reports["saturation"] = bench.emit_saturation(saturation, report_dir / "saturation.csv")

    return DemoResult(
        dataset=dataset,
        models=models,
        cloud_results=len(records),
        reports=reports,
        comparison=comparison,
        scaling=scaling,
        saturation={name: r.threshold for name, r in saturation.items()},
        cloud_ts=[r["ts_ms"] for r in records],
    )
