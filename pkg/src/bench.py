"""
Closed-loop HTTP load harness. Each concurrency level runs ``repetitions``
rounds; in a round, ``level`` virtual users start together and each sends
``requests_per_user`` requests with ``think_time_s`` between them. Samples
from all rounds are pooled per level.
"""

from __future__ import annotations

import logging
import math
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import requests

from .errors import BenchError, RejectedInputError
from .models import LatencyReport, LevelStats, LoadProfile

log = logging.getLogger(__name__)

REPORT_COLUMNS = [
    "concurrency",
    "average_ms",
    "median_ms",
    "p90_ms",
    "max_ms",
    "throughput_tps",
    "errors",
]
MAX_ERROR_RATE = 0.01


def percentile(samples, p: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest sample."""
    values = sorted(samples)
    if not values:
        raise RejectedInputError("percentile of an empty sample set")
    if not 0 < p <= 100:
        raise RejectedInputError(f"percentile must be in (0, 100], got {p}")
    rank = max(1, math.ceil(p / 100.0 * len(values)))
    return float(values[rank - 1])


@dataclass
class Sample:
    latency_ms: float
    ok: bool


class SampleSink:
    def __init__(self):
        self._lock = threading.Lock()
        self.samples: List[Sample] = []

    def add(self, sample: Sample) -> None:
        with self._lock:
            self.samples.append(sample)


def send_request(profile: LoadProfile, url: str) -> Sample:
    # no session: every request opens its own connection
    start = time.perf_counter()
    try:
        resp = requests.request(
            profile.method, url, json=profile.body, timeout=profile.timeout_s
        )
        ok = 200 <= resp.status_code < 300
    except requests.RequestException:
        ok = False
    return Sample(latency_ms=(time.perf_counter() - start) * 1000.0, ok=ok)


def _virtual_user(profile: LoadProfile, url: str, sink: SampleSink, gate: threading.Barrier) -> None:
    gate.wait()
    for i in range(profile.requests_per_user):
        if i and profile.think_time_s:
            time.sleep(profile.think_time_s)
        sink.add(send_request(profile, url))


def _run_round(profile: LoadProfile, url: str, level: int, sink: SampleSink) -> float:
    gate = threading.Barrier(level + 1)
    users = [
        threading.Thread(target=_virtual_user, args=(profile, url, sink, gate), daemon=True)
        for _ in range(level)
    ]
    for u in users:
        u.start()
    gate.wait()
    start = time.perf_counter()
    for u in users:
        u.join()
    return time.perf_counter() - start


def level_stats(level: int, samples: List[Sample], duration_s: float) -> LevelStats:
    latencies = np.array([s.latency_ms for s in samples])
    ok = sum(s.ok for s in samples)
    return LevelStats(
        concurrency=level,
        average_ms=float(latencies.mean()),
        median_ms=float(np.median(latencies)),
        p90_ms=percentile(latencies, 90),
        max_ms=float(latencies.max()),
        min_ms=float(latencies.min()),
        throughput_tps=ok / duration_s if duration_s > 0 else 0.0,
        error_count=len(samples) - ok,
        request_count=len(samples),
    )


def target_url(target: str, path: str) -> str:
    if not target.startswith(("http://", "https://")):
        target = f"http://{target}"
    return target.rstrip("/") + path


def check_reachable(target: str, timeout: float = 5.0) -> None:
    """Any HTTP answer counts as reachable."""
    try:
        requests.get(target_url(target, "/v1/health"), timeout=timeout)
    except requests.RequestException as e:
        raise BenchError(f"target {target} is unreachable: {e}")


def run_level(profile: LoadProfile, url: str, level: int) -> LevelStats:
    sink = SampleSink()
    duration = 0.0
    for rep in range(profile.repetitions):
        if rep and profile.think_time_s:
            time.sleep(profile.think_time_s)
        duration += _run_round(profile, url, level, sink)
    stats = level_stats(level, sink.samples, duration)
    log.info(
        f"level {level}: avg {stats.average_ms:.1f} ms, p90 {stats.p90_ms:.1f} ms, "
        f"{stats.throughput_tps:.1f} TPS, {stats.error_count} errors"
    )
    return stats


def run_load(profile: LoadProfile, target: str, label: str = "") -> LatencyReport:
    check_reachable(target, profile.timeout_s)
    url = target_url(target, profile.path)
    log.info(f"Benchmarking {url} at levels {profile.levels}")
    return LatencyReport(label=label, levels=[run_level(profile, url, lvl) for lvl in profile.levels])


@dataclass
class SaturationResult:
    threshold: int
    error_rates: List[Tuple[int, float]]


def saturate(
    target: str,
    start: int = 50,
    step: int = 50,
    maximum: int = 600,
    profile: Optional[LoadProfile] = None,
) -> SaturationResult:
    """
    Raise concurrency until a round's error rate exceeds 1%; the threshold is
    the highest level that stayed within it (0 if the first level failed).
    Without a profile every virtual user sends GET /v1/health.
    """
    if start < 1 or step < 1 or maximum < start:
        raise RejectedInputError("need 1 <= start <= max and step >= 1")
    profile = profile or LoadProfile(method="GET", path="/v1/health")
    profile = profile.model_copy(update={"think_time_s": 0.0, "repetitions": 1})
    check_reachable(target, profile.timeout_s)
    url = target_url(target, profile.path)
    threshold = 0
    rates = []
    for level in range(start, maximum + 1, step):
        stats = run_level(profile, url, level)
        rate = stats.error_count / stats.request_count
        rates.append((level, rate))
        if rate > MAX_ERROR_RATE:
            break
        threshold = level
    log.info(f"Saturation threshold for {target}: {threshold}")
    return SaturationResult(threshold=threshold, error_rates=rates)


# ---------------------------------------------------------------- reports


def compare_reports(edge: LatencyReport, cloud: LatencyReport) -> pd.DataFrame:
    """Per level: edge average / cloud average."""
    edge_levels = [s.concurrency for s in edge.levels]
    if edge_levels != [s.concurrency for s in cloud.levels]:
        raise RejectedInputError("reports cover different concurrency levels")
    rows = [
        {
            "concurrency": e.concurrency,
            "edge_average_ms": e.average_ms,
            "cloud_average_ms": c.average_ms,
            "ratio": e.average_ms / c.average_ms if c.average_ms else float("nan"),
        }
        for e, c in zip(edge.levels, cloud.levels)
    ]
    return pd.DataFrame(rows)


def report_frame(report: LatencyReport) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "concurrency": s.concurrency,
                "average_ms": f"{s.average_ms:.1f}",
                "median_ms": f"{s.median_ms:.1f}",
                "p90_ms": f"{s.p90_ms:.1f}",
                "max_ms": f"{s.max_ms:.1f}",
                "throughput_tps": f"{s.throughput_tps:.1f}",
                "errors": s.error_count,
            }
            for s in report.levels
        ],
        columns=REPORT_COLUMNS,
    )


def to_markdown(df: pd.DataFrame) -> str:
    cols = list(df.columns)
    lines = [
        "| " + " | ".join(cols) + " |",
        "|" + "|".join("---:" for _ in cols) + "|",
    ]
    for row in df.astype(str).itertuples(index=False):
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def emit_report(report: LatencyReport, path: Path, fmt: str = "csv") -> Path:
    df = report_frame(report)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        df.to_csv(path, index=False, lineterminator="\n")
    elif fmt == "markdown":
        path.write_text(to_markdown(df))
    else:
        raise RejectedInputError(f"unknown report format {fmt!r}")
    log.info(f"Wrote {len(df)}-level report to {path}")
    return path


def emit_comparison(table: pd.DataFrame, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False, float_format="%.3f", lineterminator="\n")
    return path


def emit_saturation(results: Dict[str, SaturationResult], path: Path) -> Path:
    """One row per topology: error-free threshold and the last level tried."""
    table = pd.DataFrame(
        [
            {
                "topology": name,
                "threshold": r.threshold,
                "last_level": r.error_rates[-1][0] if r.error_rates else 0,
                "last_error_rate": r.error_rates[-1][1] if r.error_rates else 0.0,
            }
            for name, r in results.items()
        ]
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False, float_format="%.3f", lineterminator="\n")
    return path
