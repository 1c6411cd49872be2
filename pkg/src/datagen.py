"""
Synthetic household load scenarios.

Each appliance runs a two-state ON/OFF chain with exponential dwell times;
an ON spell of a multi-level appliance draws one level, so at most one level
of an appliance is ON at any timestep. The aggregate active power is the sum
of the ON levels' catalog powers plus per-appliance gaussian noise.
"""

from __future__ import annotations

import io
import logging
import math
import re
from pathlib import Path
from typing import Dict, Iterator, List, Tuple

import numpy as np
import pandas as pd

from .catalog_loader import load_catalog, load_profiles
from .errors import ParseError, RejectedInputError
from .models import (
    MEASUREMENT_FIELDS,
    ApplianceCatalog,
    ApplianceProfile,
    ApplianceStateVector,
    PowerSample,
    ScenarioConfig,
)

log = logging.getLogger(__name__)

BASE_COLUMNS = ["ts_ms", *MEASUREMENT_FIELDS]
NEGATABLE_FIELDS = ("voltage", "frequency", "current", "active_power", "apparent_power")
NOMINAL_VOLTAGE = 220.0
VOLTAGE_SIGMA = 0.5
NOMINAL_FREQUENCY = 50.0


def _resolve(cfg: ScenarioConfig) -> Tuple[ApplianceCatalog, Dict[str, ApplianceProfile]]:
    catalog = cfg.catalog if cfg.catalog is not None else load_catalog()
    profiles = cfg.profiles if cfg.profiles is not None else load_profiles()
    return catalog, {p.appliance_id: p for p in profiles}


def sample_count(cfg: ScenarioConfig) -> int:
    return int(math.floor(cfg.duration_s / cfg.sample_period_s + 1e-9))


def _level_track(
    profile: ApplianceProfile, level_count: int, n: int, period: float, rng
) -> np.ndarray:
    """Per-timestep active level (0 = OFF)."""
    track = np.zeros(n, dtype=np.int64)
    if profile.forced == "off":
        return track
    if profile.forced == "on":
        if profile.forced_level > level_count:
            raise RejectedInputError(
                f"{profile.appliance_id}: forced_level {profile.forced_level} "
                f"exceeds {level_count} levels"
            )
        track[:] = profile.forced_level
        return track

    on = rng.random() < profile.mean_on_s / (profile.mean_on_s + profile.mean_off_s)
    t = 0
    while t < n:
        mean = profile.mean_on_s if on else profile.mean_off_s
        dwell = max(1, int(round(rng.exponential(mean) / period)))
        if on:
            track[t : t + dwell] = rng.integers(1, level_count + 1)
        t += dwell
        on = not on
    return track


def generate_scenario(cfg: ScenarioConfig) -> pd.DataFrame:
    """
    Simulate ``floor(duration / sample_period)`` samples with ground-truth
    label columns (one 0/1 column per catalog target).
    """
    catalog, profiles = _resolve(cfg)
    if not catalog.entries:
        raise RejectedInputError("scenario catalog is empty")

    n = sample_count(cfg)
    rng = np.random.default_rng(cfg.seed)
    period = cfg.sample_period_s

    p = np.zeros(n)
    q = np.zeros(n)
    labels: Dict[str, np.ndarray] = {}
    for entry in catalog.entries:
        profile = profiles.get(entry.appliance_id)
        if profile is None:
            log.warning(f"No profile for {entry.appliance_id}, leaving it OFF")
            profile = ApplianceProfile(
                appliance_id=entry.appliance_id,
                mean_on_s=1.0,
                mean_off_s=1.0,
                forced="off",
            )
        track = _level_track(profile, entry.level_count, n, period, rng)
        on = track > 0
        active = np.zeros(n)
        reactive = np.zeros(n)
        for level in range(1, entry.level_count + 1):
            at_level = track == level
            active[at_level] = entry.active_power[level - 1]
            reactive[at_level] = entry.reactive_power[level - 1]
            tid = (
                entry.appliance_id
                if entry.level_count == 1
                else f"{entry.appliance_id}_{level}"
            )
            labels[tid] = at_level.astype(np.int64)
        if profile.sigma > 0:
            noise = rng.normal(0.0, profile.sigma, n)
            active = np.where(on, np.maximum(active + noise, 0.0), 0.0)
        p += active
        q += reactive

    voltage = NOMINAL_VOLTAGE + rng.normal(0.0, VOLTAGE_SIGMA, n)
    apparent = np.hypot(p, q)
    with np.errstate(divide="ignore", invalid="ignore"):
        pf = np.where(apparent > 0, p / apparent, 1.0)
    ts = cfg.start_ts_ms + np.round(np.arange(n) * period * 1000).astype(np.int64)

    df = pd.DataFrame(
        {
            "ts_ms": ts,
            "voltage": voltage,
            "frequency": np.full(n, NOMINAL_FREQUENCY),
            "current": apparent / voltage,
            "active_power": p,
            "reactive_power": q,
            "apparent_power": apparent,
            "power_factor": pf,
        }
    )
    for tid in catalog.target_ids():
        df[tid] = labels[tid]
    log.info(f"Generated {n} samples for {len(labels)} targets (seed {cfg.seed})")
    return df


def inject_dirty(
    stream: pd.DataFrame, fraction: float, seed: int
) -> Tuple[pd.DataFrame, np.ndarray]:
    """
    Corrupt exactly ``round(fraction * n)`` rows, one field each: either a
    blanked measurement or a negated positive magnitude.
    """
    if not 0 <= fraction < 1:
        raise RejectedInputError(f"dirty fraction must be in [0, 1), got {fraction}")
    out = stream.reset_index(drop=True)
    n = len(out)
    k = int(round(fraction * n))
    rng = np.random.default_rng(seed)
    rows = np.sort(rng.choice(n, size=k, replace=False)) if k else np.array([], int)

    for row in rows:
        positive = [f for f in NEGATABLE_FIELDS if out.at[row, f] > 0]
        if positive and rng.random() < 0.5:
            field = positive[rng.integers(len(positive))]
            out.at[row, field] = -out.at[row, field]
        else:
            field = MEASUREMENT_FIELDS[rng.integers(len(MEASUREMENT_FIELDS))]
            out.at[row, field] = np.nan
    if k:
        log.info(f"Injected {k} dirty rows ({fraction:.4%})")
    return out, rows


def label_columns(stream: pd.DataFrame) -> List[str]:
    return [c for c in stream.columns if c not in BASE_COLUMNS]


def frame_to_samples(stream: pd.DataFrame) -> Iterator[PowerSample]:
    targets = label_columns(stream)
    for values in stream.to_dict("records"):
        measured = {
            f: None if pd.isna(values[f]) else float(values[f])
            for f in MEASUREMENT_FIELDS
        }
        labels = (
            ApplianceStateVector.from_pairs(targets, [values[t] for t in targets])
            if targets
            else None
        )
        ts = values["ts_ms"]
        yield PowerSample(
            ts_ms=None if pd.isna(ts) else int(ts), labels=labels, **measured
        )


def live_samples(cfg: ScenarioConfig) -> Iterator[PowerSample]:
    """The scenario (dirty rows included) one sample at a time."""
    stream = generate_scenario(cfg)
    if cfg.dirty_fraction:
        stream, _ = inject_dirty(stream, cfg.dirty_fraction, cfg.seed)
    yield from frame_to_samples(stream)


# ---------------------------------------------------------------- CSV codec


def _fmt_float(v) -> str:
    return "" if pd.isna(v) else repr(float(v))


def _fmt_int(v) -> str:
    return "" if pd.isna(v) else str(int(v))


def to_csv_text(stream: pd.DataFrame) -> str:
    out = pd.DataFrame(index=stream.index)
    for col in stream.columns:
        if col == "ts_ms" or col not in BASE_COLUMNS:
            out[col] = stream[col].map(_fmt_int)
        else:
            out[col] = stream[col].map(_fmt_float)
    buf = io.StringIO()
    out.to_csv(buf, index=False, lineterminator="\n")
    return buf.getvalue()


def write_csv(stream: pd.DataFrame, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(to_csv_text(stream))
    log.info(f"Wrote {len(stream)} samples to {path}")
    return path


def _parse_column(raw: pd.Series, parse) -> list:
    out = []
    for i, cell in enumerate(raw):
        try:
            out.append(parse(cell))
        except ValueError:
            # header is line 1
            raise ParseError(f"{raw.name}: cannot parse {cell!r}", line=i + 2)
    return out


def _parse_float(cell: str) -> float:
    return float(cell) if cell != "" else np.nan


def _parse_label(cell: str) -> int:
    value = int(cell)
    if value not in (0, 1):
        raise ValueError(cell)
    return value


def read_csv(path: Path) -> pd.DataFrame:
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise ParseError("file has no header", line=1)
    except pd.errors.ParserError as e:
        m = re.search(r"line (\d+)", str(e))
        raise ParseError(str(e), line=int(m.group(1)) if m else None)

    missing = [c for c in BASE_COLUMNS if c not in raw.columns]
    if missing:
        raise ParseError(f"missing columns: {', '.join(missing)}", line=1)

    df = pd.DataFrame(index=pd.RangeIndex(len(raw)))
    ts = _parse_column(raw["ts_ms"], _parse_float)
    ts_arr = np.array(ts, dtype=np.float64)
    df["ts_ms"] = ts_arr.astype(np.int64) if not np.isnan(ts_arr).any() else ts_arr
    for col in MEASUREMENT_FIELDS:
        df[col] = np.array(_parse_column(raw[col], _parse_float), dtype=np.float64)
    for col in label_columns(raw):
        df[col] = np.array(_parse_column(raw[col], _parse_label), dtype=np.int64)
    return df
