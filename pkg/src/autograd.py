"""
Minimal reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` records the operation that produced it together with a closure
that pushes its gradient to its parents. ``backward()`` walks the recorded
graph in reverse topological order and frees it afterwards.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import RejectedInputError, StateError

LN_EPS = 1e-9
PROB_EPS = 1e-12

_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording on the current thread."""
    previous = is_grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = previous


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _lift(value) -> "Tensor":
    return value if isinstance(value, Tensor) else Tensor(value)


class Tensor:
    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[], None]] = None
        self._op = ""

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        self.grad = grad.copy() if self.grad is None else self.grad + grad

    @staticmethod
    def _result(data, parents: Sequence["Tensor"], op: str) -> "Tensor":
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=track)
        if track:
            out._parents = tuple(parents)
            out._op = op
        return out

    # ------------------------------------------------------------ graph

    def _topo(self) -> list:
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if self._backward is None:
            raise StateError("backward() needs a recorded forward graph")
        order = self._topo()
        self.grad = np.ones_like(self.data) if grad is None else np.asarray(grad, float)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward()
        for node in order:
            node._backward = None
            node._parents = ()

    # ------------------------------------------------------------ arithmetic

    def __add__(self, other) -> "Tensor":
        other = _lift(other)
        out = Tensor._result(self.data + other.data, (self, other), "add")
        if out.requires_grad:

            def _backward():
                self._accumulate(_unbroadcast(out.grad, self.shape))
                other._accumulate(_unbroadcast(out.grad, other.shape))

            out._backward = _backward
        return out

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return self * -1.0

    def __sub__(self, other) -> "Tensor":
        return self + (-_lift(other))

    def __rsub__(self, other) -> "Tensor":
        return _lift(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = _lift(other)
        out = Tensor._result(self.data * other.data, (self, other), "mul")
        if out.requires_grad:

            def _backward():
                self._accumulate(_unbroadcast(out.grad * other.data, self.shape))
                other._accumulate(_unbroadcast(out.grad * self.data, other.shape))

            out._backward = _backward
        return out

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = _lift(other)
        return self * other.reciprocal()

    def reciprocal(self) -> "Tensor":
        out = Tensor._result(1.0 / self.data, (self,), "reciprocal")
        if out.requires_grad:

            def _backward():
                self._accumulate(-out.grad / (self.data * self.data))

            out._backward = _backward
        return out

    def __matmul__(self, other) -> "Tensor":
        other = _lift(other)
        out = Tensor._result(np.matmul(self.data, other.data), (self, other), "matmul")
        if out.requires_grad:

            def _backward():
                ga = np.matmul(out.grad, np.swapaxes(other.data, -1, -2))
                gb = np.matmul(np.swapaxes(self.data, -1, -2), out.grad)
                self._accumulate(_unbroadcast(ga, self.shape))
                other._accumulate(_unbroadcast(gb, other.shape))

            out._backward = _backward
        return out

    # ------------------------------------------------------------ elementwise

    def relu(self) -> "Tensor":
        out = Tensor._result(np.maximum(self.data, 0.0), (self,), "relu")
        if out.requires_grad:

            def _backward():
                self._accumulate(out.grad * (self.data > 0))

            out._backward = _backward
        return out

    def sigmoid(self) -> "Tensor":
        x = self.data
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        out = Tensor._result(s, (self,), "sigmoid")
        if out.requires_grad:

            def _backward():
                self._accumulate(out.grad * s * (1.0 - s))

            out._backward = _backward
        return out

    def exp(self) -> "Tensor":
        e = np.exp(self.data)
        out = Tensor._result(e, (self,), "exp")
        if out.requires_grad:

            def _backward():
                self._accumulate(out.grad * e)

            out._backward = _backward
        return out

    def log(self) -> "Tensor":
        out = Tensor._result(np.log(self.data), (self,), "log")
        if out.requires_grad:

            def _backward():
                self._accumulate(out.grad / self.data)

            out._backward = _backward
        return out

    def __pow__(self, exponent: float) -> "Tensor":
        out = Tensor._result(self.data**exponent, (self,), "pow")
        if out.requires_grad:

            def _backward():
                self._accumulate(out.grad * exponent * self.data ** (exponent - 1))

            out._backward = _backward
        return out

    # ------------------------------------------------------------ reductions

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = Tensor._result(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum")
        if out.requires_grad:

            def _backward():
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(g, self.shape))

            out._backward = _backward
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # ------------------------------------------------------------ shape

    def reshape(self, *shape) -> "Tensor":
        out = Tensor._result(self.data.reshape(*shape), (self,), "reshape")
        if out.requires_grad:

            def _backward():
                self._accumulate(out.grad.reshape(self.shape))

            out._backward = _backward
        return out

    def permute(self, *axes) -> "Tensor":
        out = Tensor._result(np.transpose(self.data, axes), (self,), "permute")
        if out.requires_grad:
            inverse = np.argsort(axes)

            def _backward():
                self._accumulate(np.transpose(out.grad, inverse))

            out._backward = _backward
        return out

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.permute(*axes)

    def __getitem__(self, index) -> "Tensor":
        out = Tensor._result(self.data[index], (self,), "getitem")
        if out.requires_grad:

            def _backward():
                g = np.zeros_like(self.data)
                np.add.at(g, index, out.grad)
                self._accumulate(g)

            out._backward = _backward
        return out


# ---------------------------------------------------------------- free functions


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = Tensor._result(
        np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat"
    )
    if out.requires_grad:
        bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

        def _backward():
            for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
                t._accumulate(np.take(out.grad, np.arange(lo, hi), axis=axis))

        out._backward = _backward
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor._result(s, (x,), "softmax")
    if out.requires_grad:

        def _backward():
            g = out.grad
            x._accumulate(s * (g - (g * s).sum(axis=axis, keepdims=True)))

        out._backward = _backward
    return out


def layer_norm(x: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    out = Tensor._result(xhat, (x,), "layer_norm")
    if out.requires_grad:
        n = x.shape[-1]

        def _backward():
            g = out.grad
            gx = (inv / n) * (
                n * g
                - g.sum(axis=-1, keepdims=True)
                - xhat * (g * xhat).sum(axis=-1, keepdims=True)
            )
            x._accumulate(gx)

        out._backward = _backward
    return out


def conv1d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """
    Valid 1-D convolution (cross-correlation). ``x`` is (B, C_in, L),
    ``weight`` is (C_out, C_in, K), ``bias`` is (C_out,); output length is
    ``L - K + 1``.
    """
    if x.ndim != 3 or weight.ndim != 3 or x.shape[1] != weight.shape[1]:
        raise RejectedInputError(f"conv1d shapes {x.shape} and {weight.shape} disagree")
    K = weight.shape[2]
    if x.shape[2] < K:
        raise RejectedInputError(f"sequence length {x.shape[2]} shorter than kernel {K}")
    cols = sliding_window_view(x.data, K, axis=2)  # (B, C_in, L', K)
    y = np.einsum("bclk,ock->bol", cols, weight.data) + bias.data[None, :, None]
    out = Tensor._result(y, (x, weight, bias), "conv1d")
    if out.requires_grad:

        def _backward():
            g = out.grad
            weight._accumulate(np.einsum("bol,bclk->ock", g, cols))
            bias._accumulate(g.sum(axis=(0, 2)))
            if x.requires_grad:
                gx = np.zeros_like(x.data)
                span = g.shape[2]
                for k in range(K):
                    gx[:, :, k : k + span] += np.einsum("bol,oc->bcl", g, weight.data[:, :, k])
                x._accumulate(gx)

        out._backward = _backward
    return out


def binary_cross_entropy(probs: Tensor, truth: np.ndarray) -> Tensor:
    """
    Mean Bernoulli negative log-likelihood. Probabilities are clipped away
    from 0 and 1 in both the value and its derivative.
    """
    y = np.asarray(truth, dtype=np.float64)
    if y.shape != probs.shape:
        raise RejectedInputError(f"probs shape {probs.shape} does not match truth {y.shape}")
    if y.size == 0:
        raise RejectedInputError("loss needs at least one prediction")
    if not np.isin(y, (0.0, 1.0)).all():
        raise RejectedInputError("truth must be binary")
    p = np.clip(probs.data, PROB_EPS, 1.0 - PROB_EPS)
    loss = -np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    out = Tensor._result(loss, (probs,), "bce")
    if out.requires_grad:

        def _backward():
            probs._accumulate(out.grad * (p - y) / (p * (1.0 - p)) / y.size)

        out._backward = _backward
    return out
