"""
Cloud disaggregator: a sequence-to-point network.

Each input feature (active, reactive power) passes through its own stack of
valid 1-D convolutions; the stacks are concatenated, projected to
``d_model``, given a learned position embedding and run through
``depth`` attention blocks (multi-head self-attention and a ReLU
feed-forward layer, each with a residual connection and layer norm). The
representation at the window midpoint is read out to one sigmoid per target.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError

from .autograd import Tensor, binary_cross_entropy, concat, conv1d, layer_norm, no_grad, softmax
from .errors import FormatError, RejectedInputError
from .models import FEATURES, NormStats, S2PDims, S2PTrainConfig
from .preprocess import WindowBatch, midpoint, normalize_array

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass
class S2PModel:
    window: int
    features: List[str]
    targets: List[str]
    dims: S2PDims
    params: Dict[str, Tensor]
    norm: Optional[NormStats] = None
    version: str = ""

    @property
    def readout_index(self) -> int:
        """Midpoint position inside the convolved sequence."""
        return midpoint(self.window) - self.dims.shrink

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))


@dataclass
class TrainResult:
    model: S2PModel
    loss_history: List[float] = field(default_factory=list)


# ---------------------------------------------------------------- init


def _xavier(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def _quantize(params: Dict[str, Tensor]) -> None:
    """Round parameters to float32 so the model file reproduces them exactly."""
    for p in params.values():
        p.data = p.data.astype(np.float32).astype(np.float64)


def _fingerprint(params: Dict[str, Tensor]) -> str:
    digest = hashlib.sha256()
    for name in sorted(params):
        digest.update(name.encode())
        digest.update(params[name].data.astype("<f4").tobytes())
    return "s2p-" + digest.hexdigest()[:12]


def init_model(
    window: int,
    target_ids: Sequence[str],
    dims: Optional[S2PDims] = None,
    seed: int = 0,
    features: Sequence[str] = FEATURES,
    norm: Optional[NormStats] = None,
) -> S2PModel:
    dims = dims or S2PDims()
    if window % 2 == 0:
        raise RejectedInputError(f"window must be odd, got {window}")
    if window - 2 * dims.shrink < 1:
        raise RejectedInputError(
            f"window {window} is too short for {dims.conv_layers} convolutions "
            f"of kernel {dims.kernel}"
        )
    if not target_ids:
        raise RejectedInputError("at least one target is required")

    rng = np.random.default_rng(seed)
    C, K, d = dims.channels, dims.kernel, dims.d_model
    F, T = len(features), len(target_ids)
    raw: Dict[str, np.ndarray] = {}
    for f in range(F):
        c_in = 1
        for layer in range(dims.conv_layers):
            raw[f"conv{f}.{layer}.w"] = _xavier(rng, (C, c_in, K), c_in * K, C * K)
            raw[f"conv{f}.{layer}.b"] = np.zeros(C)
            c_in = C
    raw["proj.w"] = _xavier(rng, (F * C, d), F * C, d)
    raw["proj.b"] = np.zeros(d)
    raw["pos"] = _xavier(rng, (window, d), window, d)
    for i in range(dims.depth):
        for name in ("q", "k", "v", "o"):
            raw[f"attn{i}.{name}.w"] = _xavier(rng, (d, d), d, d)
            raw[f"attn{i}.{name}.b"] = np.zeros(d)
        raw[f"attn{i}.ln1.g"] = np.ones(d)
        raw[f"attn{i}.ln1.b"] = np.zeros(d)
        raw[f"attn{i}.ff1.w"] = _xavier(rng, (d, dims.ffn_hidden), d, dims.ffn_hidden)
        raw[f"attn{i}.ff1.b"] = np.zeros(dims.ffn_hidden)
        raw[f"attn{i}.ff2.w"] = _xavier(rng, (dims.ffn_hidden, d), dims.ffn_hidden, d)
        raw[f"attn{i}.ff2.b"] = np.zeros(d)
        raw[f"attn{i}.ln2.g"] = np.ones(d)
        raw[f"attn{i}.ln2.b"] = np.zeros(d)
    raw["out.w"] = _xavier(rng, (d, T), d, T)
    raw["out.b"] = np.zeros(T)

    params = {name: Tensor(value, requires_grad=True) for name, value in raw.items()}
    _quantize(params)
    model = S2PModel(
        window=window,
        features=list(features),
        targets=list(target_ids),
        dims=dims,
        params=params,
        norm=norm,
    )
    model.version = _fingerprint(params)
    return model


# ---------------------------------------------------------------- forward


def _as_array(model: S2PModel, batch) -> np.ndarray:
    if isinstance(batch, WindowBatch):
        batch = [batch]
    if isinstance(batch, (list, tuple)):
        if not batch:
            raise RejectedInputError("batch is empty")
        batch = np.stack([w.matrix if isinstance(w, WindowBatch) else w for w in batch])
    X = np.asarray(batch, dtype=np.float64)
    expected = (model.window, len(model.features))
    if X.ndim != 3 or X.shape[1:] != expected:
        raise RejectedInputError(
            f"batch shape {X.shape} does not match model window/features {expected}"
        )
    return X


def _attention_block(
    model: S2PModel, h: Tensor, i: int, trace: Optional[dict]
) -> Tensor:
    p = model.params
    B, L, d = h.shape
    H = model.dims.heads
    dh = d // H

    def heads(name: str) -> Tensor:
        x = h @ p[f"attn{i}.{name}.w"] + p[f"attn{i}.{name}.b"]
        return x.reshape(B, L, H, dh).permute(0, 2, 1, 3)

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
    attn = softmax(scores, axis=-1)
    ctx = (attn @ v).permute(0, 2, 1, 3).reshape(B, L, d)
    ctx = ctx @ p[f"attn{i}.o.w"] + p[f"attn{i}.o.b"]

    n1 = layer_norm(h + ctx)
    h = n1 * p[f"attn{i}.ln1.g"] + p[f"attn{i}.ln1.b"]
    ff = (h @ p[f"attn{i}.ff1.w"] + p[f"attn{i}.ff1.b"]).relu()
    ff = ff @ p[f"attn{i}.ff2.w"] + p[f"attn{i}.ff2.b"]
    n2 = layer_norm(h + ff)
    if trace is not None:
        trace.setdefault("attention", []).append(attn.data)
        trace.setdefault("layer_norm", []).extend([n1.data, n2.data])
    return n2 * p[f"attn{i}.ln2.g"] + p[f"attn{i}.ln2.b"]


def forward_tensor(model: S2PModel, X: np.ndarray, trace: Optional[dict] = None) -> Tensor:
    """B×T probability tensor for raw B×W×F windows, graph recorded."""
    p = model.params
    if model.norm is not None:
        X = normalize_array(X, model.norm)
    B = X.shape[0]
    encoded = []
    for f in range(len(model.features)):
        x = Tensor(X[:, :, f].reshape(B, 1, model.window))
        for layer in range(model.dims.conv_layers):
            x = conv1d(x, p[f"conv{f}.{layer}.w"], p[f"conv{f}.{layer}.b"]).relu()
        encoded.append(x)
    x = concat(encoded, axis=1).permute(0, 2, 1)  # (B, L, F*C)
    L = x.shape[1]
    shrink = model.dims.shrink
    h = x @ p["proj.w"] + p["proj.b"] + p["pos"][shrink : shrink + L]
    for i in range(model.dims.depth):
        h = _attention_block(model, h, i, trace)
    mid = h[:, model.readout_index, :]
    return (mid @ p["out.w"] + p["out.b"]).sigmoid()


def forward(
    model: S2PModel,
    batch: Union[np.ndarray, WindowBatch, Sequence[WindowBatch]],
    trace: Optional[dict] = None,
) -> np.ndarray:
    """B×T probabilities; each row belongs to its window's midpoint timestep."""
    X = _as_array(model, batch)
    with no_grad():
        return forward_tensor(model, X, trace).data


def predict_proba_batches(
    model: S2PModel, X: np.ndarray, batch_size: int = 256
) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        return np.empty((0, len(model.targets)))
    return np.concatenate(
        [forward(model, X[i : i + batch_size]) for i in range(0, len(X), batch_size)]
    )


def predict_states(model: S2PModel, batch, cutoff: float = 0.5) -> np.ndarray:
    return (forward(model, batch) > cutoff).astype(np.int8)


# ---------------------------------------------------------------- training


def loss_nll(probs: Union[Tensor, np.ndarray], truth: np.ndarray) -> Union[Tensor, float]:
    """Negative mean Bernoulli log-likelihood of ``truth`` under ``probs``."""
    if isinstance(probs, Tensor):
        return binary_cross_entropy(probs, truth)
    with no_grad():
        return float(binary_cross_entropy(Tensor(probs), truth).data)


def train(
    model: S2PModel,
    dataset: Tuple[np.ndarray, np.ndarray],
    cfg: S2PTrainConfig,
) -> TrainResult:
    """
    Minibatch gradient descent with momentum. ``dataset`` is raw windows
    (N×W×F) and midpoint labels (N×T). Records the mean batch loss per epoch.
    """
    X, y = dataset
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(X) == 0:
        raise RejectedInputError("training set is empty")
    X = _as_array(model, X)
    if y.shape != (len(X), len(model.targets)):
        raise RejectedInputError(
            f"labels shape {y.shape} does not match {len(X)} windows x "
            f"{len(model.targets)} targets"
        )

    rng = np.random.default_rng(cfg.seed)
    velocity = {name: np.zeros_like(t.data) for name, t in model.params.items()}
    history: List[float] = []
    log.info(
        f"Training Seq2Point: {len(X)} windows, {model.parameter_count()} parameters, "
        f"{cfg.epochs} epochs"
    )
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(X))
        losses = []
        for start in range(0, len(X), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            for t in model.params.values():
                t.zero_grad()
            loss = loss_nll(forward_tensor(model, X[idx]), y[idx])
            loss.backward()
            losses.append(float(loss.data))
            for name, t in model.params.items():
                grad = t.grad if t.grad is not None else 0.0
                velocity[name] = cfg.momentum * velocity[name] - cfg.learning_rate * grad
                t.data = t.data + velocity[name]
        history.append(float(np.mean(losses)))
        log.debug(f"epoch {epoch + 1}/{cfg.epochs}: loss {history[-1]:.5f}")

    for t in model.params.values():
        t.zero_grad()
    _quantize(model.params)
    model.version = _fingerprint(model.params)
    if history:
        log.info(f"Seq2Point loss {history[0]:.4f} -> {history[-1]:.4f}")
    return TrainResult(model=model, loss_history=history)


# ---------------------------------------------------------------- persistence


def save(model: S2PModel, path: Path) -> Path:
    doc = {
        "version": FORMAT_VERSION,
        "model_version": model.version or _fingerprint(model.params),
        "W": model.window,
        "F": len(model.features),
        "features": model.features,
        "targets": model.targets,
        "dims": model.dims.model_dump(),
        "norm": model.norm.model_dump() if model.norm is not None else None,
        "params": {
            name: {
                "shape": list(t.shape),
                "data": base64.b64encode(t.data.astype("<f4").tobytes()).decode("ascii"),
            }
            for name, t in model.params.items()
        },
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc))
    log.info(f"Saved Seq2Point model {doc['model_version']} to {path}")
    return path


def _decode_param(name: str, blob: dict) -> Tensor:
    shape = tuple(int(s) for s in blob["shape"])
    raw = base64.b64decode(blob["data"], validate=True)
    values = np.frombuffer(raw, dtype="<f4")
    if values.size != int(np.prod(shape)):
        raise FormatError(f"parameter {name}: {values.size} values for shape {shape}")
    return Tensor(values.astype(np.float64).reshape(shape), requires_grad=True)


def _check_layout(path: Path, params: Dict[str, Tensor], reference: S2PModel) -> None:
    """Parameter names and shapes must match a fresh model of the same dims."""
    missing = sorted(reference.params.keys() - params.keys())
    extra = sorted(params.keys() - reference.params.keys())
    if missing or extra:
        raise FormatError(f"{path}: missing parameters {missing}, unexpected {extra}")
    for name, ref in reference.params.items():
        if params[name].shape != ref.shape:
            raise FormatError(
                f"{path}: parameter {name} has shape {params[name].shape}, expected {ref.shape}"
            )


def load(path: Path) -> S2PModel:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not a Seq2Point model document: {e.msg}", offset=e.pos)
    try:
        if doc.get("version") != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported model version {doc.get('version')!r}")
        features = list(doc["features"])
        if len(features) != int(doc["F"]):
            raise FormatError(f"{path}: F={doc['F']} but {len(features)} feature names")
        params = {name: _decode_param(name, blob) for name, blob in doc["params"].items()}
        window, targets = int(doc["W"]), list(doc["targets"])
        dims = S2PDims.model_validate(doc["dims"])
        _check_layout(path, params, init_model(window, targets, dims, features=features))
        model = S2PModel(
            window=window,
            features=features,
            targets=targets,
            dims=dims,
            params=params,
            norm=NormStats.model_validate(doc["norm"]) if doc.get("norm") else None,
            version=str(doc.get("model_version", "")),
        )
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError, ValidationError) as e:
        raise FormatError(f"{path}: malformed Seq2Point model: {e}")
    return model
