"""
Train and evaluate either model on a labeled CSV dataset.

Both commands clean the dataset first; ``train`` splits it chronologically
and scores the held-out tail, ``eval`` scores the whole file.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from . import datagen, gbdt, seq2point
from .errors import FormatError, RejectedInputError
from .metrics import metrics_report
from .model_finder import ModelFileFinder
from .models import FEATURES, GbdtTrainParams, MetricsReport, S2PDims, S2PTrainConfig
from .preprocess import build_training_set, chronological_split, clean, normalize_fit

log = logging.getLogger(__name__)

Model = Union[gbdt.GbdtModel, seq2point.S2PModel]
TRAIN_FRACTION = 0.8


@dataclass
class TrainOutcome:
    kind: str
    model: Model
    model_path: Path
    report: MetricsReport
    train_rows: int
    test_rows: int


def load_dataset(path: Path) -> pd.DataFrame:
    """Parse and clean a dataset; an empty result is rejected."""
    frame, rejected = clean(datagen.read_csv(path))
    if rejected:
        log.info(f"Dropped {rejected} dirty rows from {path}")
    if frame.empty:
        raise RejectedInputError(f"dataset {path} has no usable rows")
    if not datagen.label_columns(frame):
        raise RejectedInputError(f"dataset {path} has no label columns")
    return frame


def _windows(frame: pd.DataFrame, window: int, targets: List[str]) -> Tuple[np.ndarray, np.ndarray]:
    X, y, _ = build_training_set(frame, window, targets)
    if len(X) == 0:
        raise RejectedInputError(f"{len(frame)} rows are too few for window {window}")
    return X, y


def fit(
    kind: str,
    frame: pd.DataFrame,
    window: int,
    seed: int = 0,
    gbdt_params: Optional[GbdtTrainParams] = None,
    s2p_config: Optional[S2PTrainConfig] = None,
    s2p_dims: Optional[S2PDims] = None,
) -> Model:
    targets = datagen.label_columns(frame)
    norm = normalize_fit(frame, FEATURES)
    X, y = _windows(frame, window, targets)
    if kind == "gbdt":
        return gbdt.fit_windows(X, y, gbdt_params or GbdtTrainParams(), targets, norm=norm)
    if kind == "s2p":
        cfg = (s2p_config or S2PTrainConfig(window=window, seed=seed)).model_copy(
            update={"window": window}
        )
        model = seq2point.init_model(window, targets, s2p_dims, seed=seed, norm=norm)
        return seq2point.train(model, (X, y), cfg).model
    raise RejectedInputError(f"unknown model {kind!r}; expected gbdt or s2p")


def model_window(model: Model) -> int:
    return model.schema.window if isinstance(model, gbdt.GbdtModel) else model.window


def model_targets(model: Model) -> List[str]:
    return model.target_ids if isinstance(model, gbdt.GbdtModel) else list(model.targets)


def predict(model: Model, X: np.ndarray) -> np.ndarray:
    """N×T probabilities for raw N×W×F windows."""
    if isinstance(model, gbdt.GbdtModel):
        return gbdt.predict_windows(model, X)
    return seq2point.predict_proba_batches(model, X)


def evaluate(model: Model, frame: pd.DataFrame) -> MetricsReport:
    targets = model_targets(model)
    missing = [t for t in targets if t not in frame.columns]
    if missing:
        raise RejectedInputError(f"dataset lacks the model's targets: {missing}")
    X, y = _windows(frame, model_window(model), targets)
    states = (predict(model, X) > 0.5).astype(np.int64)
    return metrics_report(states, y, targets)


def save_model(model: Model, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(model, gbdt.GbdtModel):
        return gbdt.save(model, path)
    return seq2point.save(model, path)


def model_kind(path: Path) -> str:
    match = ModelFileFinder.MODEL_PATTERN.match(Path(path).name)
    if match:
        return match.group(1)
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path} is not a model file: {e.msg}", offset=e.pos)
    if not isinstance(doc, dict):
        raise FormatError(f"{path} is not a model file")
    return "s2p" if "params" in doc else "gbdt"


def load_model(path: Path) -> Model:
    kind = model_kind(path)
    return gbdt.load(path) if kind == "gbdt" else seq2point.load(path)


def train_and_evaluate(
    kind: str,
    dataset: Path,
    out_dir: Path,
    window: int,
    seed: int = 0,
    gbdt_params: Optional[GbdtTrainParams] = None,
    s2p_config: Optional[S2PTrainConfig] = None,
    s2p_dims: Optional[S2PDims] = None,
) -> TrainOutcome:
    if kind not in ("gbdt", "s2p"):
        raise RejectedInputError(f"unknown model {kind!r}; expected gbdt or s2p")
    frame = load_dataset(dataset)
    train_frame, test_frame = chronological_split(frame, TRAIN_FRACTION)
    model = fit(kind, train_frame, window, seed, gbdt_params, s2p_config, s2p_dims)
    report = evaluate(model, test_frame)
    path = save_model(model, ModelFileFinder(out_dir).next_path(kind))
    log.info(f"Saved {kind} model {model.version} to {path}")
    return TrainOutcome(
        kind=kind,
        model=model,
        model_path=path,
        report=report,
        train_rows=len(train_frame),
        test_rows=len(test_frame),
    )
