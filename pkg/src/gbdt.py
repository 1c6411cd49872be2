"""
Edge disaggregator: regularized second-order gradient-boosted trees, one
binary logistic ensemble per (appliance, level) target.

Objective per target: sum of logistic losses plus, per tree,
``gamma * leaves + 0.5 * lambda * ||w||^2``. Leaves take the Newton weight
``-G / (H + lambda)``; splits are found by exact greedy search over sorted
unique feature values (left branch is ``x <= threshold``).
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from pydantic import ValidationError

from .errors import FormatError, RejectedInputError
from .models import (
    FEATURES,
    ApplianceStateVector,
    FeatureSchema,
    GbdtTrainParams,
    NormStats,
)
from .preprocess import WindowBatch, normalize_array

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAX_BACKTRACK = 40


@dataclass(frozen=True)
class Leaf:
    weight: float


@dataclass(frozen=True)
class Split:
    feature: int
    threshold: float
    left: "TreeNode"
    right: "TreeNode"


TreeNode = Union[Leaf, Split]


@dataclass
class TargetEnsemble:
    target_id: str
    base_score: float
    learning_rate: float
    trees: List[TreeNode] = field(default_factory=list)


@dataclass
class GbdtModel:
    schema: FeatureSchema
    targets: List[TargetEnsemble]
    version: str = ""
    # per-target training logistic loss after each round; not persisted
    training_loss: Dict[str, List[float]] = field(default_factory=dict, repr=False)

    @property
    def target_ids(self) -> List[str]:
        return [t.target_id for t in self.targets]


@dataclass(frozen=True)
class SplitCandidate:
    feature: int
    threshold: float
    gain: float


# ---------------------------------------------------------------- math


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logistic_loss(y: np.ndarray, margin: np.ndarray) -> float:
    return float(np.sum(np.logaddexp(0.0, margin) - y * margin))


def leaf_weight(G: float, H: float, reg_lambda: float) -> float:
    den = H + reg_lambda
    return -G / den if den > 0 else 0.0


def split_gain(GL, HL, GR, HR, reg_lambda: float, gamma: float):
    def score(G, H):
        return G * G / (H + reg_lambda)

    return 0.5 * (score(GL, HL) + score(GR, HR) - score(GL + GR, HL + HR)) - gamma


# ---------------------------------------------------------------- features


def window_features(matrix: np.ndarray) -> np.ndarray:
    """Flattened W×F window followed by per-feature mean, std, min, max, delta."""
    return features_from_windows(np.asarray(matrix)[None])[0]


def features_from_windows(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    N = X.shape[0]
    return np.concatenate(
        [
            X.reshape(N, -1),
            X.mean(axis=1),
            X.std(axis=1),
            X.min(axis=1),
            X.max(axis=1),
            X[:, -1, :] - X[:, 0, :],
        ],
        axis=1,
    )


def feature_count(schema: FeatureSchema) -> int:
    F = len(schema.features)
    return schema.window * F + 5 * F


# ---------------------------------------------------------------- tree growth


def find_best_split(
    X: np.ndarray, g: np.ndarray, h: np.ndarray, params: GbdtTrainParams
) -> Optional[SplitCandidate]:
    """
    Exact greedy split search. Ties go to the lower feature index, then the
    lower threshold. Returns None unless the best gain is strictly positive.
    """
    n = X.shape[0]
    if n < 2:
        return None
    order = np.argsort(X, axis=0, kind="stable")
    xs = np.take_along_axis(X, order, axis=0)
    gs = g[order]
    hs = h[order]
    GL = np.cumsum(gs, axis=0)[:-1]
    HL = np.cumsum(hs, axis=0)[:-1]
    G = g.sum()
    H = h.sum()
    GR = G - GL
    HR = H - HL

    valid = xs[:-1] < xs[1:]
    valid &= (HL >= params.min_child_hessian) & (HR >= params.min_child_hessian)
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = split_gain(GL, HL, GR, HR, params.reg_lambda, params.gamma)
    gain = np.where(valid & np.isfinite(gain), gain, -np.inf)

    best = gain.max()
    if not best > 0:
        return None
    pos, feats = np.nonzero(gain == best)
    f = int(feats.min())
    p = int(pos[feats == f].min())
    return SplitCandidate(feature=f, threshold=float(xs[p, f]), gain=float(best))


def _settle_leaf(
    w: float, y: np.ndarray, margin: np.ndarray, learning_rate: float
) -> float:
    """Halve the leaf step until it no longer raises the leaf's training loss."""
    before = logistic_loss(y, margin)
    step = learning_rate * w
    for _ in range(MAX_BACKTRACK):
        if logistic_loss(y, margin + step) <= before:
            return step / learning_rate
        step *= 0.5
    return 0.0


def build_tree(
    X: np.ndarray,
    g: np.ndarray,
    h: np.ndarray,
    y: np.ndarray,
    margin: np.ndarray,
    params: GbdtTrainParams,
    depth: int = 0,
) -> TreeNode:
    cand = None
    if depth < params.max_depth:
        cand = find_best_split(X, g, h, params)
    if cand is None:
        w = leaf_weight(float(g.sum()), float(h.sum()), params.reg_lambda)
        return Leaf(_settle_leaf(w, y, margin, params.learning_rate))

    left = X[:, cand.feature] <= cand.threshold
    right = ~left
    return Split(
        feature=cand.feature,
        threshold=cand.threshold,
        left=build_tree(X[left], g[left], h[left], y[left], margin[left], params, depth + 1),
        right=build_tree(
            X[right], g[right], h[right], y[right], margin[right], params, depth + 1
        ),
    )


def predict_tree(node: TreeNode, X: np.ndarray) -> np.ndarray:
    out = np.empty(len(X))

    def walk(node: TreeNode, idx: np.ndarray) -> None:
        if isinstance(node, Leaf):
            out[idx] = node.weight
            return
        go_left = X[idx, node.feature] <= node.threshold
        walk(node.left, idx[go_left])
        walk(node.right, idx[~go_left])

    walk(node, np.arange(len(X)))
    return out


def _predict_row(node: TreeNode, x: list) -> float:
    while isinstance(node, Split):
        node = node.left if x[node.feature] <= node.threshold else node.right
    return node.weight


def tree_depth(node: TreeNode) -> int:
    if isinstance(node, Leaf):
        return 0
    return 1 + max(tree_depth(node.left), tree_depth(node.right))


# ---------------------------------------------------------------- training


def _base_score(y: np.ndarray) -> float:
    rate = float(np.clip(y.mean(), 1e-6, 1 - 1e-6))
    return float(np.log(rate / (1 - rate)))


def _train_target(
    target_id: str, X: np.ndarray, y: np.ndarray, params: GbdtTrainParams
) -> tuple[TargetEnsemble, List[float]]:
    ens = TargetEnsemble(
        target_id=target_id, base_score=_base_score(y), learning_rate=params.learning_rate
    )
    margin = np.full(len(y), ens.base_score)
    losses = []
    for _ in range(params.n_trees):
        p = sigmoid(margin)
        g = p - y
        h = p * (1 - p)
        tree = build_tree(X, g, h, y, margin, params)
        ens.trees.append(tree)
        margin = margin + params.learning_rate * predict_tree(tree, X)
        losses.append(logistic_loss(y, margin))
    log.debug(f"{target_id}: {len(ens.trees)} trees, final loss {losses[-1]:.4f}")
    return ens, losses


def train(
    features: np.ndarray,
    labels: np.ndarray,
    params: GbdtTrainParams,
    target_ids: Sequence[str],
    schema: Optional[FeatureSchema] = None,
    n_jobs: int = 1,
) -> GbdtModel:
    """
    Fit one ensemble per label column. ``features`` is N×D; ``labels`` is
    N×T binary. Targets are independent and may train on ``n_jobs`` threads.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise RejectedInputError("feature matrix must be non-empty and 2-D")
    Y = np.asarray(labels, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape != (X.shape[0], len(target_ids)):
        raise RejectedInputError(
            f"labels shape {Y.shape} does not match {X.shape[0]} rows x "
            f"{len(target_ids)} targets"
        )
    if schema is None:
        schema = FeatureSchema(window=1, features=[f"x{i}" for i in range(X.shape[1])])

    log.info(
        f"Training GBDT: {X.shape[0]} samples, {X.shape[1]} features, "
        f"{len(target_ids)} targets, {params.n_trees} rounds"
    )
    jobs = [(tid, X, Y[:, j], params) for j, tid in enumerate(target_ids)]
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(lambda a: _train_target(*a), jobs))
    else:
        results = [_train_target(*a) for a in jobs]

    model = GbdtModel(
        schema=schema,
        targets=[ens for ens, _ in results],
        training_loss={ens.target_id: losses for ens, losses in results},
    )
    model.version = _fingerprint(model)
    return model


def fit_windows(
    X: np.ndarray,
    y: np.ndarray,
    params: GbdtTrainParams,
    target_ids: Sequence[str],
    norm: Optional[NormStats] = None,
    features: Optional[Sequence[str]] = None,
    n_jobs: int = 1,
) -> GbdtModel:
    """Train on raw N×W×F windows; the schema records W, F and ``norm``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or len(X) == 0:
        raise RejectedInputError("training windows must be a non-empty N×W×F array")
    if features is None:
        features = norm.features if norm is not None else FEATURES[: X.shape[2]]
    schema = FeatureSchema(window=X.shape[1], features=list(features), norm=norm)
    if norm is not None:
        X = normalize_array(X, norm)
    return train(features_from_windows(X), y, params, target_ids, schema, n_jobs)


# ---------------------------------------------------------------- inference


def _check_window(model: GbdtModel, matrix: np.ndarray) -> np.ndarray:
    expected = (model.schema.window, len(model.schema.features))
    if matrix.shape != expected:
        raise RejectedInputError(
            f"window shape {matrix.shape} does not match model schema {expected}"
        )
    if model.schema.norm is not None:
        matrix = normalize_array(matrix, model.schema.norm)
    return matrix


def predict_proba(model: GbdtModel, window: Union[WindowBatch, np.ndarray]) -> np.ndarray:
    """Per-target ON probability for one window, in target order."""
    matrix = window.matrix if isinstance(window, WindowBatch) else np.asarray(window)
    x = window_features(_check_window(model, matrix)).tolist()
    margins = []
    for ens in model.targets:
        total = 0.0
        for tree in ens.trees:
            total += _predict_row(tree, x)
        margins.append(ens.base_score + ens.learning_rate * total)
    return sigmoid(np.array(margins))


def predict_proba_matrix(model: GbdtModel, features: np.ndarray) -> np.ndarray:
    """N×T probabilities for an N×D feature matrix."""
    X = np.asarray(features, dtype=np.float64)
    out = np.empty((X.shape[0], len(model.targets)))
    for j, ens in enumerate(model.targets):
        margin = np.full(X.shape[0], ens.base_score)
        for tree in ens.trees:
            margin += ens.learning_rate * predict_tree(tree, X)
        out[:, j] = sigmoid(margin)
    return out


def predict_windows(model: GbdtModel, X: np.ndarray) -> np.ndarray:
    """N×T probabilities for raw (un-normalized) N×W×F windows."""
    X = np.asarray(X, dtype=np.float64)
    expected = (model.schema.window, len(model.schema.features))
    if X.shape[1:] != expected:
        raise RejectedInputError(
            f"window shape {X.shape[1:]} does not match model schema {expected}"
        )
    if model.schema.norm is not None:
        X = normalize_array(X, model.schema.norm)
    return predict_proba_matrix(model, features_from_windows(X))


def predict_states(
    model: GbdtModel, window: Union[WindowBatch, np.ndarray], cutoff: float = 0.5
) -> ApplianceStateVector:
    """ON iff probability > cutoff; a tie stays OFF."""
    states = predict_proba(model, window) > cutoff
    return ApplianceStateVector.from_pairs(model.target_ids, states.astype(int))


# ---------------------------------------------------------------- persistence


def _encode_node(node: TreeNode) -> dict:
    if isinstance(node, Leaf):
        return {"w": node.weight}
    return {
        "f": node.feature,
        "t": node.threshold,
        "l": _encode_node(node.left),
        "r": _encode_node(node.right),
    }


def _decode_node(doc: dict) -> TreeNode:
    if "w" in doc:
        return Leaf(float(doc["w"]))
    return Split(
        feature=int(doc["f"]),
        threshold=float(doc["t"]),
        left=_decode_node(doc["l"]),
        right=_decode_node(doc["r"]),
    )


def _targets_document(model: GbdtModel) -> list:
    return [
        {
            "appliance_id": ens.target_id,
            "base_score": ens.base_score,
            "learning_rate": ens.learning_rate,
            "trees": [_encode_node(t) for t in ens.trees],
        }
        for ens in model.targets
    ]


def _fingerprint(model: GbdtModel) -> str:
    body = json.dumps(_targets_document(model), sort_keys=True).encode()
    return "gbdt-" + hashlib.sha256(body).hexdigest()[:12]


def save(model: GbdtModel, path: Path) -> Path:
    # json writes floats with repr(), the shortest string that round-trips
    doc = {
        "version": FORMAT_VERSION,
        "model_version": model.version or _fingerprint(model),
        "schema": model.schema.model_dump(),
        "targets": _targets_document(model),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc))
    log.info(f"Saved GBDT model {doc['model_version']} to {path}")
    return path


def load(path: Path) -> GbdtModel:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not a GBDT model document: {e.msg}", offset=e.pos)
    try:
        if doc.get("version") != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported model version {doc.get('version')!r}")
        targets = [
            TargetEnsemble(
                target_id=str(t["appliance_id"]),
                base_score=float(t["base_score"]),
                learning_rate=float(t["learning_rate"]),
                trees=[_decode_node(n) for n in t["trees"]],
            )
            for t in doc["targets"]
        ]
        schema = FeatureSchema.model_validate(doc["schema"])
    except (KeyError, TypeError, ValueError, AttributeError, ValidationError) as e:
        if isinstance(e, FormatError):
            raise
        raise FormatError(f"{path}: malformed GBDT model: {e}")
    return GbdtModel(schema=schema, targets=targets, version=str(doc.get("model_version", "")))
