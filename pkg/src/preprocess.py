"""
Edge-side preprocessing: dirty-row filtering, z-score normalization and
sliding-window construction (batch slicing and a streaming FIFO queue).
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import Deque, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from .errors import RejectedInputError
from .models import (
    FEATURES,
    MEASUREMENT_FIELDS,
    ApplianceCatalog,
    ApplianceStateVector,
    NormStats,
    PowerSample,
)

log = logging.getLogger(__name__)

EPSILON = 1e-8
NON_NEGATIVE_FIELDS = ("active_power", "apparent_power", "current", "frequency", "voltage")
REQUIRED_FIELDS = ("ts_ms", *MEASUREMENT_FIELDS)


# ---------------------------------------------------------------- cleaning


def sample_is_valid(sample: PowerSample) -> bool:
    values = sample.model_dump(exclude={"labels"})
    if any(values[f] is None or pd.isna(values[f]) for f in REQUIRED_FIELDS):
        return False
    if any(values[f] < 0 for f in NON_NEGATIVE_FIELDS):
        return False
    return 0.0 <= values["power_factor"] <= 1.0


def validity_mask(stream: pd.DataFrame) -> pd.Series:
    ok = stream[list(REQUIRED_FIELDS)].notna().all(axis=1)
    for f in NON_NEGATIVE_FIELDS:
        ok &= ~(stream[f] < 0)
    ok &= stream["power_factor"].between(0.0, 1.0)
    return ok


def clean(stream: pd.DataFrame) -> Tuple[pd.DataFrame, int]:
    """Drop dirty rows; surviving rows keep their order."""
    ok = validity_mask(stream)
    rejected = int((~ok).sum())
    if rejected:
        log.info(f"Filtered {rejected} dirty rows out of {len(stream)}")
    return stream[ok].reset_index(drop=True), rejected


# ---------------------------------------------------------------- normalization


def normalize_fit(stream: pd.DataFrame, features: Sequence[str] = FEATURES) -> NormStats:
    if len(stream) < 2:
        raise RejectedInputError("normalization needs at least 2 rows")
    values = stream[list(features)].to_numpy(dtype=np.float64)
    return NormStats(
        features=list(features),
        mean=values.mean(axis=0).tolist(),
        std=values.std(axis=0).tolist(),
    )


def normalize_array(values: np.ndarray, stats: NormStats) -> np.ndarray:
    """Z-score the trailing feature axis of ``values``."""
    mean = np.asarray(stats.mean)
    std = np.maximum(np.asarray(stats.std), EPSILON)
    return (np.asarray(values, dtype=np.float64) - mean) / std


def normalize_apply(stream: pd.DataFrame, stats: NormStats) -> pd.DataFrame:
    out = stream.copy()
    out[stats.features] = normalize_array(
        stream[stats.features].to_numpy(dtype=np.float64), stats
    )
    return out


# ---------------------------------------------------------------- windows


@dataclass(frozen=True)
class WindowBatch:
    """A W×F slice of one household's cleaned stream."""

    matrix: np.ndarray
    start_ts_ms: int
    end_ts_ms: int
    mid_ts_ms: int
    household_id: str = ""
    labels: Optional[np.ndarray] = None

    @property
    def window(self) -> int:
        return self.matrix.shape[0]


def midpoint(window: int) -> int:
    return (window - 1) // 2


def _check_window_args(window: int, stride: int) -> None:
    if window < 1 or stride < 1:
        raise RejectedInputError(f"window ({window}) and stride ({stride}) must be >= 1")


def window_count(n: int, window: int, stride: int = 1) -> int:
    return 0 if n < window else (n - window) // stride + 1


def window_stream(
    stream: pd.DataFrame,
    window: int,
    stride: int = 1,
    household_id: str = "",
    features: Sequence[str] = FEATURES,
    targets: Optional[Sequence[str]] = None,
) -> List[WindowBatch]:
    """Batch slicing: windows start at 0, stride, 2*stride, ..."""
    _check_window_args(window, stride)
    values = stream[list(features)].to_numpy(dtype=np.float64)
    ts = stream["ts_ms"].to_numpy()
    labels = stream[list(targets)].to_numpy() if targets else None
    mid = midpoint(window)
    out = []
    for start in range(0, window_count(len(stream), window, stride) * stride, stride):
        end = start + window
        out.append(
            WindowBatch(
                matrix=values[start:end].copy(),
                start_ts_ms=int(ts[start]),
                end_ts_ms=int(ts[end - 1]),
                mid_ts_ms=int(ts[start + mid]),
                household_id=household_id,
                labels=None if labels is None else labels[start + mid].copy(),
            )
        )
    return out


class SlidingWindowQueue:
    """
    Streaming window for one household: a bounded FIFO where each push evicts
    the oldest sample once full. Emits a window every ``stride`` pushes after
    the first ``window`` samples, matching :func:`window_stream` exactly.
    """

    def __init__(self, window: int, stride: int = 1, household_id: str = ""):
        _check_window_args(window, stride)
        self.window = window
        self.stride = stride
        self.household_id = household_id
        self._values: Deque[np.ndarray] = deque(maxlen=window)
        self._ts: Deque[int] = deque(maxlen=window)
        self._labels: Deque[Optional[np.ndarray]] = deque(maxlen=window)
        self.pushed = 0

    def __len__(self) -> int:
        return len(self._values)

    def push(
        self, ts_ms: int, values: Sequence[float], labels: Optional[np.ndarray] = None
    ) -> Optional[WindowBatch]:
        self._values.append(np.asarray(values, dtype=np.float64))
        self._ts.append(int(ts_ms))
        self._labels.append(labels)
        self.pushed += 1
        if self.pushed < self.window or (self.pushed - self.window) % self.stride:
            return None
        mid = midpoint(self.window)
        mid_labels = self._labels[mid]
        return WindowBatch(
            matrix=np.stack(self._values),
            start_ts_ms=self._ts[0],
            end_ts_ms=self._ts[-1],
            mid_ts_ms=self._ts[mid],
            household_id=self.household_id,
            labels=None if mid_labels is None else np.asarray(mid_labels),
        )

    def push_sample(self, sample: PowerSample) -> Optional[WindowBatch]:
        labels = sample.labels.as_array() if sample.labels is not None else None
        return self.push(
            sample.ts_ms, [sample.active_power, sample.reactive_power], labels
        )


def build_training_set(
    stream: pd.DataFrame,
    window: int,
    target_ids: Sequence[str],
    stats: Optional[NormStats] = None,
    stride: int = 1,
    features: Sequence[str] = FEATURES,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Vectorised windows for training/evaluation.

    Returns ``X`` (N×W×F, normalized when ``stats`` is given), ``y`` (N×T
    labels at each window's midpoint) and the midpoint timestamps.
    """
    _check_window_args(window, stride)
    missing = [t for t in target_ids if t not in stream.columns]
    if missing:
        raise RejectedInputError(f"dataset has no label columns for {missing}")
    n = window_count(len(stream), window, stride)
    F = len(features)
    if n == 0:
        return np.empty((0, window, F)), np.empty((0, len(target_ids)), int), np.empty(0, int)

    values = stream[list(features)].to_numpy(dtype=np.float64)
    if stats is not None:
        values = normalize_array(values, stats)
    # sliding_window_view puts the window axis last: (n', F, W)
    X = sliding_window_view(values, window, axis=0)[::stride][:n]
    X = np.ascontiguousarray(X.transpose(0, 2, 1))
    idx = np.arange(n) * stride + midpoint(window)
    y = stream[list(target_ids)].to_numpy()[idx].astype(np.int64)
    mid_ts = stream["ts_ms"].to_numpy()[idx].astype(np.int64)
    return X, y, mid_ts


def chronological_split(
    stream: pd.DataFrame, train_fraction: float = 0.8
) -> Tuple[pd.DataFrame, pd.DataFrame]:
    cut = int(len(stream) * train_fraction)
    return (
        stream.iloc[:cut].reset_index(drop=True),
        stream.iloc[cut:].reset_index(drop=True),
    )


# ---------------------------------------------------------------- labels


def label_threshold(
    per_appliance_power: Mapping[str, float],
    catalog: ApplianceCatalog,
    theta_frac: float,
) -> ApplianceStateVector:
    """
    Relabel metered per-appliance power into (appliance, level) states.

    A level qualifies when power >= theta_frac * its catalog power; among
    qualifying levels of one appliance the closest in power is ON.
    """
    if not 0 < theta_frac < 1:
        raise RejectedInputError(f"theta_frac must be in (0, 1), got {theta_frac}")
    known = {e.appliance_id for e in catalog.entries}
    unknown = sorted(set(per_appliance_power) - known)
    if unknown:
        raise RejectedInputError(f"unknown appliance ids: {unknown}")

    ids, states = [], []
    for entry in catalog.entries:
        power = float(per_appliance_power.get(entry.appliance_id, 0.0))
        qualifying = [
            lvl
            for lvl, rated in enumerate(entry.active_power)
            if power >= theta_frac * rated and power > 0
        ]
        chosen = (
            min(qualifying, key=lambda lvl: (abs(entry.active_power[lvl] - power), lvl))
            if qualifying
            else None
        )
        for lvl in range(entry.level_count):
            ids.append(
                entry.appliance_id if entry.level_count == 1 else f"{entry.appliance_id}_{lvl + 1}"
            )
            states.append(1 if lvl == chosen else 0)
    return ApplianceStateVector.from_pairs(ids, states)
