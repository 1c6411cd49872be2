import numpy as np
import pytest

from src.autograd import (
    Tensor,
    binary_cross_entropy,
    concat,
    conv1d,
    layer_norm,
    no_grad,
    softmax,
)
from src.errors import RejectedInputError, StateError


def _numeric_grad(fn, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    grad = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + eps
        up = fn(x)
        x[i] = orig - eps
        down = fn(x)
        x[i] = orig
        grad[i] = (up - down) / (2 * eps)
    return grad


def _check(build, *shapes, seed: int = 0) -> None:
    """Compare backprop of sum(build(*tensors)) against central differences."""
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=s) for s in shapes]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    build(*tensors).sum().backward()
    for j, a in enumerate(arrays):

        def fn(v, j=j):
            args = [Tensor(b) for b in arrays]
            args[j] = Tensor(v)
            return float(build(*args).sum().data)

        assert np.allclose(tensors[j].grad, _numeric_grad(fn, a), atol=1e-6, rtol=1e-5)


def test_square_gradient() -> None:
    x = Tensor(3.0, requires_grad=True)
    (x * x).backward()
    assert x.grad == pytest.approx(6.0)


def test_backward_without_graph_is_state_error() -> None:
    with pytest.raises(StateError):
        Tensor([1.0, 2.0], requires_grad=True).backward()
    x = Tensor(2.0, requires_grad=True)
    y = x * x
    y.backward()
    with pytest.raises(StateError):
        y.backward()


def test_no_grad_records_nothing() -> None:
    x = Tensor(2.0, requires_grad=True)
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad
    with pytest.raises(StateError):
        y.backward()


def test_gradients_accumulate_across_uses() -> None:
    x = Tensor([1.0, 2.0], requires_grad=True)
    (x * 2.0 + x).sum().backward()
    assert np.array_equal(x.grad, [3.0, 3.0])


def test_arithmetic_and_broadcast_gradients() -> None:
    _check(lambda a, b: a * b + b - a / (b * b + 1.0), (3, 4), (4,))
    _check(lambda a, b: (a @ b).relu(), (2, 3, 4), (4, 5))
    _check(lambda a: (a**3).exp().log() * 0.5, (5,))
    _check(lambda a: a.sigmoid().mean(axis=1), (3, 4))


def test_shape_op_gradients() -> None:
    _check(lambda a: a.reshape(4, 3).permute(1, 0)[1:, :2] * 2.0, (3, 4))
    _check(lambda a, b: concat([a, b], axis=1).swapaxes(0, 1), (2, 3), (2, 2))


def test_softmax_rows_sum_to_one_and_gradient() -> None:
    s = softmax(Tensor(np.random.default_rng(1).normal(size=(3, 6))), axis=-1)
    assert np.allclose(s.data.sum(axis=-1), 1.0)
    weights = np.random.default_rng(2).normal(size=(3, 6))
    _check(lambda a: softmax(a, axis=-1) * weights, (3, 6))


def test_layer_norm_statistics_and_gradient() -> None:
    out = layer_norm(Tensor(np.random.default_rng(3).normal(5.0, 4.0, size=(4, 8))))
    assert np.allclose(out.data.mean(axis=-1), 0.0, atol=1e-5)
    assert np.allclose(out.data.var(axis=-1), 1.0, atol=1e-5)
    weights = np.random.default_rng(4).normal(size=(4, 8))
    _check(lambda a: layer_norm(a) * weights, (4, 8))


def test_conv1d_matches_direct_sum_and_gradient() -> None:
    rng = np.random.default_rng(5)
    x, w, b = rng.normal(size=(2, 3, 7)), rng.normal(size=(4, 3, 3)), rng.normal(size=4)
    y = conv1d(Tensor(x), Tensor(w), Tensor(b)).data
    assert y.shape == (2, 4, 5)
    direct = sum(w[None, 1, :, k] @ x[0, :, 2 + k] for k in range(3)) + b[1]
    assert y[0, 1, 2] == pytest.approx(float(direct[0]))
    _check(conv1d, (2, 3, 7), (4, 3, 3), (4,))


def test_conv1d_rejects_short_sequence() -> None:
    with pytest.raises(RejectedInputError):
        conv1d(Tensor(np.zeros((1, 1, 2))), Tensor(np.zeros((1, 1, 3))), Tensor(np.zeros(1)))


def test_binary_cross_entropy_values_and_clip() -> None:
    assert float(binary_cross_entropy(Tensor([[0.5]]), np.array([[1]])).data) == pytest.approx(
        np.log(2)
    )
    assert float(binary_cross_entropy(Tensor([[0.8]]), np.array([[1]])).data) == pytest.approx(
        0.2231, abs=1e-4
    )
    p = Tensor([[0.0, 1.0]], requires_grad=True)
    loss = binary_cross_entropy(p * 1.0, np.array([[1, 0]]))
    assert np.isfinite(loss.data)
    loss.backward()
    assert np.isfinite(p.grad).all()
    with pytest.raises(RejectedInputError):
        binary_cross_entropy(Tensor([[0.5]]), np.array([[2]]))
