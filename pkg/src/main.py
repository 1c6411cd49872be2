"""
Main CLI for the edge/cloud NILM pipeline.
Data generation, training, evaluation, the three service tiers, benchmarks
and the orchestrated demo all run from here.

Exit codes: 0 success, 2 usage (bad flags, config or input), 1 runtime.
"""

import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Dict, Optional, Type, TypeVar

import typer
from pydantic import BaseModel, ValidationError

from config import settings

from . import bench, broker, datagen, orchestrator, training
from .balancer import serve as serve_balancer
from .edge_agent import EdgeAgent
from .errors import BenchError, NilmError, ParseError, RejectedInputError
from .manifest import build_manifest, write_manifest
from .metrics import report_to_frame, write_report_csv
from .model_finder import MODEL_KINDS, ModelFileFinder
from .models import (
    BalancerConfig,
    CloudConfig,
    DemoConfig,
    EdgeAgentConfig,
    GbdtTrainParams,
    LoadProfile,
    S2PDims,
    S2PTrainConfig,
    ScenarioConfig,
)
from .worker import run_worker

app = typer.Typer(help="Edge/cloud NILM pipeline")
bench_app = typer.Typer(help="HTTP latency benchmarks")
app.add_typer(bench_app, name="bench", help="Benchmark a worker or balancer")

log = logging.getLogger(__name__)

USAGE = 2
RUNTIME = 1

C = TypeVar("C", bound=BaseModel)


class RunContext(BaseModel):
    out_dir: Path
    seed: Optional[int]
    log_level: str


def _ctx(ctx: typer.Context) -> RunContext:
    return ctx.obj


@app.callback()
def cli(
    ctx: typer.Context,
    out_dir: Path = typer.Option(Path("out"), "--out-dir", help="Directory for every artifact"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Override config seeds"),
    log_level: str = typer.Option(settings.log_level, "--log-level", help="DEBUG, INFO, WARNING"),
):
    level = getattr(logging, log_level.upper(), None)
    if not isinstance(level, int):
        typer.echo(f"❌ Unknown log level: {log_level}", err=True)
        raise typer.Exit(USAGE)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(message)s")
    ctx.obj = RunContext(out_dir=out_dir, seed=seed, log_level=log_level.upper())


def _usage(message: str) -> typer.Exit:
    typer.echo(f"❌ {message}", err=True)
    return typer.Exit(USAGE)


def _runtime(message: str) -> typer.Exit:
    typer.echo(f"❌ {message}", err=True)
    return typer.Exit(RUNTIME)


def load_config(path: Optional[Path], model: Type[C], **defaults) -> C:
    """Validate a JSON config file; a missing or invalid file is a usage error."""
    if path is None:
        try:
            return model(**defaults)
        except ValidationError as e:
            raise _usage(f"Invalid {model.__name__}: {e}")
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise _usage(f"Config not found: {path}")
    except json.JSONDecodeError as e:
        raise _usage(f"Config {path} is not valid JSON: {e}")
    if not isinstance(raw, dict):
        raise _usage(f"Config {path} must be a JSON object")
    try:
        return model.model_validate({**defaults, **raw})
    except ValidationError as e:
        raise _usage(f"Invalid config {path}: {e}")


def _manifest(
    run: RunContext,
    command: str,
    configs: Optional[Dict[str, Optional[Path]]] = None,
    seeds: Optional[Dict[str, int]] = None,
    model_versions: Optional[Dict[str, str]] = None,
) -> None:
    write_manifest(build_manifest(command, run.out_dir, configs, seeds, model_versions))


def _banner(title: str) -> None:
    typer.echo("\n" + "=" * 60)
    typer.echo(title)
    typer.echo("=" * 60)


# ---------------------------------------------------------------- data + models


@app.command("datagen")
def cmd_datagen(
    ctx: typer.Context,
    config: Optional[Path] = typer.Option(None, "--config", help="ScenarioConfig JSON"),
    out: Optional[Path] = typer.Option(None, "--out", help="CSV path (default <out-dir>/dataset.csv)"),
    dirty_fraction: Optional[float] = typer.Option(
        None, "--dirty-fraction", help="Override the config's dirty fraction"
    ),
):
    """
    Generate a labeled synthetic household dataset as CSV.
    """
    run = _ctx(ctx)
    cfg = load_config(config, ScenarioConfig)
    overrides = {}
    if run.seed is not None:
        overrides["seed"] = run.seed
    if dirty_fraction is not None:
        overrides["dirty_fraction"] = dirty_fraction
    try:
        cfg = ScenarioConfig.model_validate({**cfg.model_dump(), **overrides})
    except ValidationError as e:
        raise _usage(f"Invalid scenario: {e}")
    out = out or run.out_dir / "dataset.csv"
    _manifest(run, "datagen", {"scenario": config}, {"scenario": cfg.seed})

    stream = datagen.generate_scenario(cfg)
    dirty = 0
    if cfg.dirty_fraction:
        stream, rows = datagen.inject_dirty(stream, cfg.dirty_fraction, cfg.seed)
        dirty = len(rows)
    datagen.write_csv(stream, out)
    typer.echo(f"✅ Wrote {len(stream)} samples ({dirty} dirty) to {out}")


@app.command("train")
def cmd_train(
    ctx: typer.Context,
    model: str = typer.Argument(..., help="gbdt or s2p"),
    data: Path = typer.Option(..., "--data", help="Labeled CSV dataset"),
    window: int = typer.Option(settings.window, "--window", help="Window length (odd)"),
    config: Optional[Path] = typer.Option(
        None, "--config", help="GbdtTrainParams or S2PTrainConfig JSON"
    ),
    dims: Optional[Path] = typer.Option(None, "--dims", help="S2PDims JSON (s2p only)"),
):
    """
    Train a model on the first 80% of the dataset and score the remaining 20%.
    """
    run = _ctx(ctx)
    if model not in MODEL_KINDS:
        raise _usage(f"Unknown model {model!r}; expected one of {', '.join(MODEL_KINDS)}")
    if window < 1:
        raise _usage("--window must be positive")
    seed = run.seed if run.seed is not None else 0
    gbdt_params = s2p_config = s2p_dims = None
    if model == "gbdt":
        gbdt_params = load_config(config, GbdtTrainParams)
    else:
        s2p_config = load_config(config, S2PTrainConfig, window=window, seed=seed)
        s2p_dims = load_config(dims, S2PDims)
    _manifest(run, "train", {"data": data, "config": config, "dims": dims}, {"model": seed})

    try:
        outcome = training.train_and_evaluate(
            model, data, run.out_dir, window, seed, gbdt_params, s2p_config, s2p_dims
        )
    except (RejectedInputError, ParseError, FileNotFoundError) as e:
        raise _usage(str(e))
    except NilmError as e:
        raise _runtime(str(e))

    metrics_path = write_report_csv(outcome.report, run.out_dir / f"metrics_{model}.csv")
    _banner(f"{model.upper()} held-out metrics ({outcome.test_rows} rows)")
    typer.echo(report_to_frame(outcome.report).to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    typer.echo(f"\n✅ Model:   {outcome.model_path}")
    typer.echo(f"✅ Metrics: {metrics_path}")


@app.command("eval")
def cmd_eval(
    ctx: typer.Context,
    data: Path = typer.Option(..., "--data", help="Labeled CSV dataset"),
    model_file: Optional[Path] = typer.Option(
        None, "--model", help="Model file (default: newest of --kind in <out-dir>)"
    ),
    kind: str = typer.Option("gbdt", "--kind", help="gbdt or s2p"),
    out: Optional[Path] = typer.Option(None, "--out", help="Metrics CSV path"),
):
    """
    Score a trained model on a labeled dataset.
    """
    run = _ctx(ctx)
    if model_file is None:
        if kind not in MODEL_KINDS:
            raise _usage(f"Unknown model kind {kind!r}")
        model_file = ModelFileFinder(run.out_dir).find_latest(kind)
        if model_file is None:
            raise _usage(f"No {kind} model in {run.out_dir}; pass --model")
    try:
        model = training.load_model(model_file)
    except FileNotFoundError:
        raise _usage(f"Model not found: {model_file}")
    except NilmError as e:
        raise _runtime(str(e))
    _manifest(run, "eval", {"data": data, "model": model_file}, model_versions={"model": model.version})

    try:
        report = training.evaluate(model, training.load_dataset(data))
    except (RejectedInputError, ParseError, FileNotFoundError) as e:
        raise _usage(str(e))
    out = out or run.out_dir / f"eval_{training.model_kind(model_file)}.csv"
    write_report_csv(report, out)
    _banner(f"Evaluation of {model_file.name}")
    typer.echo(report_to_frame(report).to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    typer.echo(f"\n✅ Metrics: {out}")


# ---------------------------------------------------------------- services


@app.command("broker")
def cmd_broker(
    ctx: typer.Context,
    listen: str = typer.Option(settings.broker_address, "--listen", help="host:port"),
    default_capacity: int = typer.Option(
        settings.broker_capacity, "--default-capacity", help="Capacity of implicitly sized queues"
    ),
):
    """
    Run the message broker until interrupted.
    """
    run = _ctx(ctx)
    if default_capacity < 1:
        raise _usage("--default-capacity must be positive")
    _manifest(run, "broker")
    try:
        broker.serve(listen, default_capacity)
    except ValueError as e:
        raise _usage(str(e))
    except OSError as e:
        raise _runtime(f"Cannot listen on {listen}: {e}")


@app.command("cloud-worker")
def cmd_cloud_worker(
    ctx: typer.Context,
    config: Path = typer.Option(..., "--config", help="CloudConfig JSON"),
):
    """
    Run one cloud inference worker (REST API plus optional consume loop).
    """
    run = _ctx(ctx)
    cfg = load_config(config, CloudConfig)
    _manifest(run, "cloud-worker", {"config": config})
    try:
        run_worker(cfg)
    except (RejectedInputError, ValueError) as e:
        raise _usage(str(e))
    except (NilmError, OSError) as e:
        raise _runtime(str(e))


@app.command("balancer")
def cmd_balancer(
    ctx: typer.Context,
    config: Path = typer.Option(..., "--config", help="BalancerConfig JSON"),
):
    """
    Run the round-robin balancer in front of the worker pool.
    """
    run = _ctx(ctx)
    cfg = load_config(config, BalancerConfig)
    _manifest(run, "balancer", {"config": config})
    try:
        serve_balancer(cfg)
    except ValueError as e:
        raise _usage(str(e))
    except OSError as e:
        raise _runtime(f"Cannot listen on {cfg.listen}: {e}")


@app.command("edge-agent")
def cmd_edge_agent(
    ctx: typer.Context,
    config: Path = typer.Option(..., "--config", help="EdgeAgentConfig JSON"),
):
    """
    Stream one household through the edge tier into the broker.
    """
    run = _ctx(ctx)
    cfg = load_config(config, EdgeAgentConfig)
    _manifest(run, "edge-agent", {"config": config})
    try:
        agent = EdgeAgent(cfg)
        stats = agent.run()
    except (RejectedInputError, ParseError) as e:
        raise _usage(str(e))
    except (NilmError, OSError) as e:
        raise _runtime(str(e))
    typer.echo(
        f"✅ {stats.published} samples published in {stats.envelopes} envelopes "
        f"({stats.rejected} rejected, {stats.local_results} edge results)"
    )


# ---------------------------------------------------------------- bench


@bench_app.command("run")
def bench_run(
    ctx: typer.Context,
    target: str = typer.Option(..., "--target", help="Base URL of a worker or balancer"),
    profile: Path = typer.Option(..., "--profile", help="LoadProfile JSON"),
    out: Optional[Path] = typer.Option(None, "--out", help="Report path"),
    fmt: str = typer.Option("csv", "--format", help="csv or markdown"),
    label: str = typer.Option("", "--label", help="Report label"),
):
    """
    Measure latency and throughput at each concurrency level of a profile.
    """
    run = _ctx(ctx)
    if fmt not in ("csv", "markdown"):
        raise _usage(f"Unknown format {fmt!r}; expected csv or markdown")
    load = load_config(profile, LoadProfile)
    out = out or run.out_dir / ("latency.csv" if fmt == "csv" else "latency.md")
    _manifest(run, "bench run", {"profile": profile})
    try:
        report = bench.run_load(load, target, label)
    except BenchError as e:
        raise _runtime(str(e))
    bench.emit_report(report, out, fmt)
    _banner(f"Latency report for {target}")
    typer.echo(bench.to_markdown(bench.report_frame(report)))
    typer.echo(f"✅ Report: {out}")


@bench_app.command("saturate")
def bench_saturate(
    ctx: typer.Context,
    target: str = typer.Option(..., "--target", help="Base URL of a worker or balancer"),
    start: int = typer.Option(50, "--start"),
    step: int = typer.Option(50, "--step"),
    maximum: int = typer.Option(600, "--max"),
    profile: Optional[Path] = typer.Option(None, "--profile", help="LoadProfile JSON"),
):
    """
    Raise concurrency until more than 1% of requests fail.
    """
    run = _ctx(ctx)
    load = load_config(profile, LoadProfile) if profile else None
    _manifest(run, "bench saturate", {"profile": profile})
    try:
        result = bench.saturate(target, start, step, maximum, load)
    except RejectedInputError as e:
        raise _usage(str(e))
    except BenchError as e:
        raise _runtime(str(e))
    for level, rate in result.error_rates:
        typer.echo(f"  {level:>5} users: {rate:.2%} errors")
    typer.echo(f"✅ Saturation threshold: {result.threshold}")


# ---------------------------------------------------------------- demo


@app.command("demo")
def cmd_demo(
    ctx: typer.Context,
    config: Optional[Path] = typer.Option(None, "--config", help="DemoConfig JSON"),
    workers: Optional[int] = typer.Option(None, "--workers", help="Cloud workers (1-4)"),
):
    """
    Run the whole pipeline: data, training, services, edge stream, drain,
    edge-vs-cloud benchmark, worker scaling and saturation, then tear
    everything down.
    """
    run = _ctx(ctx)
    demo = load_config(config, DemoConfig)
    if workers is not None:
        try:
            demo = DemoConfig.model_validate({**demo.model_dump(), "workers": workers})
        except ValidationError as e:
            raise _usage(f"Invalid --workers: {e}")
    seed = run.seed if run.seed is not None else 0
    _manifest(run, "demo", {"config": config}, {"demo": seed})

    _banner("NILM DEMO")
    typer.echo(f"Started at: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}\n")
    try:
        result = orchestrator.run_demo(demo, run.out_dir, seed, run.log_level)
    except (NilmError, OSError) as e:
        raise _runtime(f"Demo failed: {e}")

    typer.echo(f"✅ Dataset:        {result.dataset}")
    for kind, path in result.models.items():
        typer.echo(f"✅ {kind} model:{' ' * (10 - len(kind))}{path}")
    typer.echo(f"✅ Cloud results:  {result.cloud_results}")
    for name, path in result.reports.items():
        typer.echo(f"📄 {name}: {path}")
    if result.comparison is not None:
        typer.echo(f"📄 edge vs cloud: {result.comparison}")
    for name, threshold in result.saturation.items():
        typer.echo(f"📈 {name} saturates above {threshold} users")
    typer.echo("=" * 60)
    typer.echo(f"Completed at: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
    typer.echo("=" * 60)


def main() -> None:
    app()


if __name__ == "__main__":
    main()
