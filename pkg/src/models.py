"""Typed records shared by every tier: domain values, wire payloads, configs."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List, Literal, NamedTuple, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from config import settings

FEATURES = ("active_power", "reactive_power")
MEASUREMENT_FIELDS = (
    "voltage",
    "frequency",
    "current",
    "active_power",
    "reactive_power",
    "apparent_power",
    "power_factor",
)
HOUSEHOLD_ID_PATTERN = r"^[A-Za-z0-9][A-Za-z0-9_.-]*$"
DEAD_LETTER_SUFFIX = ".dead"


def parse_address(address: str) -> tuple[str, int]:
    """Split ``host:port`` into its parts."""
    host, sep, port = address.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"Expected host:port, got {address!r}")
    return host or "127.0.0.1", int(port)


def dead_letter_queue(queue: str) -> str:
    return f"{queue}{DEAD_LETTER_SUFFIX}"


def is_dead_letter(queue) -> bool:
    """Dead-letter queues hold any JSON object, not only envelopes."""
    return isinstance(queue, str) and queue.endswith(DEAD_LETTER_SUFFIX)


# ---------------------------------------------------------------- catalog


class ApplianceEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    appliance_id: str
    display_name: str
    level_count: int = Field(ge=1)
    active_power: List[float]
    reactive_power: List[float]

    @model_validator(mode="after")
    def _check_levels(self) -> "ApplianceEntry":
        if len(self.active_power) != self.level_count:
            raise ValueError(f"{self.appliance_id}: need one active power per level")
        if len(self.reactive_power) != self.level_count:
            raise ValueError(f"{self.appliance_id}: need one reactive power per level")
        if any(p < 0 for p in self.active_power + self.reactive_power):
            raise ValueError(f"{self.appliance_id}: powers must be >= 0")
        return self


class ApplianceTarget(NamedTuple):
    target_id: str
    appliance_id: str
    level: int
    active_power: float
    reactive_power: float


class ApplianceCatalog(BaseModel):
    model_config = ConfigDict(frozen=True)

    entries: List[ApplianceEntry]

    @field_validator("entries")
    @classmethod
    def _unique_ids(cls, entries: List[ApplianceEntry]) -> List[ApplianceEntry]:
        ids = [e.appliance_id for e in entries]
        if len(set(ids)) != len(ids):
            raise ValueError("appliance ids must be unique")
        return entries

    def entry(self, appliance_id: str) -> ApplianceEntry:
        for e in self.entries:
            if e.appliance_id == appliance_id:
                return e
        raise KeyError(appliance_id)

    def targets(self) -> List[ApplianceTarget]:
        """One binary detection target per (appliance, level)."""
        out = []
        for e in self.entries:
            for level in range(e.level_count):
                tid = (
                    e.appliance_id
                    if e.level_count == 1
                    else f"{e.appliance_id}_{level + 1}"
                )
                out.append(
                    ApplianceTarget(
                        tid,
                        e.appliance_id,
                        level + 1,
                        e.active_power[level],
                        e.reactive_power[level],
                    )
                )
        return out

    def target_ids(self) -> List[str]:
        return [t.target_id for t in self.targets()]


# ---------------------------------------------------------------- samples


class TargetState(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str
    state: Literal[0, 1]


class ApplianceStateVector(BaseModel):
    model_config = ConfigDict(frozen=True)

    states: List[TargetState]

    @classmethod
    def from_pairs(cls, ids: List[str], states) -> "ApplianceStateVector":
        return cls(
            states=[TargetState(id=i, state=int(s)) for i, s in zip(ids, states)]
        )

    def as_dict(self) -> Dict[str, int]:
        return {s.id: s.state for s in self.states}

    def as_array(self) -> np.ndarray:
        return np.array([s.state for s in self.states], dtype=np.int8)


class PowerSample(BaseModel):
    """One timestamped mains measurement; ``None`` marks a missing field."""

    model_config = ConfigDict(frozen=True)

    ts_ms: Optional[int]
    voltage: Optional[float] = None
    frequency: Optional[float] = None
    current: Optional[float] = None
    active_power: Optional[float] = None
    reactive_power: Optional[float] = None
    apparent_power: Optional[float] = None
    power_factor: Optional[float] = None
    labels: Optional[ApplianceStateVector] = None

    def record(self) -> "SampleRecord":
        return SampleRecord(ts=self.ts_ms, p=self.active_power, q=self.reactive_power)


class NormStats(BaseModel):
    features: List[str]
    mean: List[float]
    std: List[float]

    @field_validator("std")
    @classmethod
    def _std_non_negative(cls, std: List[float]) -> List[float]:
        if any(s < 0 for s in std):
            raise ValueError("std must be >= 0")
        return std


class FeatureSchema(BaseModel):
    window: int = Field(ge=1)
    features: List[str] = Field(default_factory=lambda: list(FEATURES))
    norm: Optional[NormStats] = None


# ---------------------------------------------------------------- metrics


class ConfusionCounts(BaseModel):
    model_config = ConfigDict(frozen=True)

    tp: int = Field(ge=0)
    tn: int = Field(ge=0)
    fp: int = Field(ge=0)
    fn: int = Field(ge=0)

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


class MetricsRow(BaseModel):
    appliance: str
    accuracy: float = Field(ge=0, le=1)
    recall: float = Field(ge=0, le=1)
    precision: float = Field(ge=0, le=1)
    f1: float = Field(ge=0, le=1)


class MetricsReport(BaseModel):
    rows: List[MetricsRow]
    average: MetricsRow


# ---------------------------------------------------------------- datagen


class ApplianceProfile(BaseModel):
    """Behaviour of one catalog appliance; level powers come from the catalog."""

    appliance_id: str
    mean_on_s: float = Field(gt=0)
    mean_off_s: float = Field(gt=0)
    sigma: float = Field(default=0.0, ge=0)
    forced: Optional[Literal["on", "off"]] = None
    forced_level: int = Field(default=1, ge=1)


class ScenarioConfig(BaseModel):
    catalog: Optional[ApplianceCatalog] = None
    profiles: Optional[List[ApplianceProfile]] = None
    duration_s: float = Field(default=3600.0, gt=0)
    sample_period_s: float = Field(default=2.0, gt=0)
    seed: int = 0
    dirty_fraction: float = Field(default=0.0, ge=0, lt=1)
    household_id: str = "house-1"
    start_ts_ms: int = 1_700_000_000_000

    @model_validator(mode="after")
    def _duration_covers_period(self) -> "ScenarioConfig":
        if self.duration_s < self.sample_period_s:
            raise ValueError("duration_s must be >= sample_period_s")
        return self


# ---------------------------------------------------------------- wire


class SampleRecord(BaseModel):
    ts: int
    p: float
    q: float


class TargetPrediction(BaseModel):
    id: str
    prob: float = Field(ge=0, le=1)
    state: Literal[0, 1]


class EdgeResult(BaseModel):
    ts_ms: int
    targets: List[TargetPrediction]
    model_version: str


class MessageEnvelope(BaseModel):
    household_id: str = Field(pattern=HOUSEHOLD_ID_PATTERN)
    seq: int = Field(ge=0)
    sent_at_ms: int
    samples: List[SampleRecord] = Field(min_length=1)
    edge_results: Optional[List[EdgeResult]] = None

    def wire(self) -> dict:
        return self.model_dump(exclude_none=True)

    def canonical_json(self) -> str:
        return json.dumps(self.wire(), sort_keys=True, separators=(",", ":"))


class ResultRecord(BaseModel):
    household_id: str
    ts_ms: int
    targets: List[TargetPrediction]
    producer: Literal["edge", "cloud"]
    model_version: str


# ---------------------------------------------------------------- training


class GbdtTrainParams(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    n_trees: int = Field(default=30, ge=1)
    max_depth: int = Field(default=4, ge=1)
    learning_rate: float = Field(default=0.3, gt=0)
    reg_lambda: float = Field(default=1.0, ge=0, alias="lambda")
    gamma: float = Field(default=0.0, ge=0)
    min_child_hessian: float = Field(default=1e-3, ge=0)


class S2PDims(BaseModel):
    kernel: int = Field(default=5, ge=1)
    channels: int = Field(default=16, ge=1)
    conv_layers: int = Field(default=2, ge=1)
    d_model: int = Field(default=32, ge=1)
    heads: int = Field(default=2, ge=1)
    ffn_hidden: int = Field(default=64, ge=1)
    depth: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _heads_divide(self) -> "S2PDims":
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.kernel % 2 == 0:
            raise ValueError("kernel must be odd so positions stay centred")
        return self

    @property
    def shrink(self) -> int:
        """Timesteps lost on each side by the valid convolutions."""
        return self.conv_layers * (self.kernel - 1) // 2


class S2PTrainConfig(BaseModel):
    epochs: int = Field(default=20, ge=0)
    batch_size: int = Field(default=32, ge=1)
    learning_rate: float = Field(default=1e-3, ge=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    seed: int = 0
    window: int = Field(default=settings.window, ge=3)

    @field_validator("window")
    @classmethod
    def _odd_window(cls, w: int) -> int:
        if w % 2 == 0:
            raise ValueError("window must be odd so the midpoint is exact")
        return w


# ---------------------------------------------------------------- services


class EdgeAgentConfig(BaseModel):
    source: Literal["file", "live"] = "file"
    input_path: Optional[Path] = None
    scenario: Optional[ScenarioConfig] = None
    broker_address: str = settings.broker_address
    queue: str = "nilm.samples"
    household_id: str = Field(default="house-1", pattern=HOUSEHOLD_ID_PATTERN)
    mode: Literal["edge-infer", "forward-only"] = "forward-only"
    window: int = Field(default=settings.window, ge=1)
    gbdt_model_path: Optional[Path] = None
    results_dir: Path = settings.results_dir / "edge"
    envelope_size: int = Field(default=10, ge=1)
    realtime: bool = False
    connect_tries: int = Field(default=settings.connect_tries, ge=1)

    @model_validator(mode="after")
    def _mode_needs_model(self) -> "EdgeAgentConfig":
        if self.mode == "edge-infer" and self.gbdt_model_path is None:
            raise ValueError("mode=edge-infer requires gbdt_model_path")
        if self.source == "file" and self.input_path is None:
            raise ValueError("source=file requires input_path")
        return self


class CloudConfig(BaseModel):
    broker_address: Optional[str] = settings.broker_address
    queue: str = "nilm.samples"
    batch_threshold: int = Field(default=settings.batch_threshold, ge=1)
    s2p_model_path: Optional[Path] = None
    results_dir: Path = settings.results_dir / "cloud"
    listen: str = "127.0.0.1:8001"
    worker_name: str = "worker-1"
    consume: bool = True
    prefetch: int = Field(default=1000, ge=1)
    flush_after_s: float = Field(default=0.5, gt=0)
    max_inflight: int = Field(default=64, ge=1)
    backlog: int = Field(default=128, ge=1)
    synthetic_service_ms: Optional[float] = Field(default=None, ge=0)

    @model_validator(mode="after")
    def _needs_model(self) -> "CloudConfig":
        if self.synthetic_service_ms is None and self.s2p_model_path is None:
            raise ValueError("s2p_model_path is required without synthetic_service_ms")
        if self.consume and self.s2p_model_path is None:
            raise ValueError("consume=true requires s2p_model_path")
        return self


class BalancerConfig(BaseModel):
    listen: str = "127.0.0.1:8000"
    workers: List[str] = Field(min_length=1)
    health_period_s: float = Field(default=settings.health_period, gt=0)
    failure_threshold: int = Field(default=3, ge=1)


# ---------------------------------------------------------------- bench


class LoadProfile(BaseModel):
    levels: List[int] = Field(default_factory=lambda: [1, 3, 5, 10, 30, 50, 100])
    think_time_s: float = Field(default=2.0, ge=0)
    repetitions: int = Field(default=10, ge=1)
    requests_per_user: int = Field(default=1, ge=1)
    method: Literal["GET", "POST"] = "POST"
    path: str = "/v1/infer"
    body: Optional[dict] = None
    timeout_s: float = Field(default=settings.request_timeout, gt=0)

    @field_validator("levels")
    @classmethod
    def _ascending(cls, levels: List[int]) -> List[int]:
        if not levels or any(v <= 0 for v in levels):
            raise ValueError("levels must be positive")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError("levels must be strictly ascending")
        return levels


class LevelStats(BaseModel):
    concurrency: int
    average_ms: float
    median_ms: float
    p90_ms: float
    max_ms: float
    min_ms: float
    throughput_tps: float
    error_count: int
    request_count: int


class LatencyReport(BaseModel):
    label: str = ""
    levels: List[LevelStats]


class RunManifest(BaseModel):
    command: str
    argv: List[str]
    config_paths: Dict[str, str] = Field(default_factory=dict)
    seeds: Dict[str, int] = Field(default_factory=dict)
    out_dir: str
    started_at: str
    model_versions: Dict[str, str] = Field(default_factory=dict)
    package_version: str


# ---------------------------------------------------------------- demo


class DemoConfig(BaseModel):
    """Topology and workload of one orchestrated end-to-end run."""

    scenario: ScenarioConfig = Field(
        default_factory=lambda: ScenarioConfig(duration_s=4000.0, sample_period_s=2.0)
    )
    training_scenario: ScenarioConfig = Field(
        default_factory=lambda: ScenarioConfig(duration_s=20000.0, sample_period_s=2.0, seed=1)
    )
    window: int = Field(default=settings.window, ge=3)
    batch_threshold: int = Field(default=settings.batch_threshold, ge=1)
    workers: int = Field(default=2, ge=1, le=4)
    gbdt: GbdtTrainParams = Field(default_factory=GbdtTrainParams)
    s2p: S2PTrainConfig = Field(default_factory=lambda: S2PTrainConfig(epochs=3))
    s2p_dims: S2PDims = Field(default_factory=S2PDims)
    edge_mode: Literal["edge-infer", "forward-only"] = "edge-infer"
    profile: LoadProfile = Field(
        default_factory=lambda: LoadProfile(levels=[1, 10, 50, 100], repetitions=3)
    )
    scaling_workers: List[int] = Field(default_factory=lambda: [1, 2, 4])
    scaling_service_ms: float = Field(default=20.0, ge=0)
    scaling_profile: LoadProfile = Field(
        default_factory=lambda: LoadProfile(levels=[50], think_time_s=0.5, repetitions=3)
    )
    saturation_start: int = Field(default=20, ge=1)
    saturation_step: int = Field(default=40, ge=1)
    saturation_max: int = Field(default=300, ge=1)
    drain_timeout_s: float = Field(default=120.0, gt=0)
    startup_timeout_s: float = Field(default=30.0, gt=0)

    @field_validator("scaling_workers")
    @classmethod
    def _worker_counts(cls, counts: List[int]) -> List[int]:
        if any(not 1 <= c <= 4 for c in counts):
            raise ValueError("worker counts must be between 1 and 4")
        return counts

    @model_validator(mode="after")
    def _saturation_range(self) -> "DemoConfig":
        if self.saturation_max < self.saturation_start:
            raise ValueError("saturation_max must be >= saturation_start")
        return self
