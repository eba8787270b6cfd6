"""
Tests for the reverse-mode tensor engine.
"""
import numpy as np
import pytest

from rtdesk.core import numerics as F
from rtdesk.core.errors import ContractError, DimensionError
from rtdesk.core.numerics import Adam, Tensor


def _param(shape, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def test_add_broadcast_gradient():
    """Test that broadcast addition sums the gradient over the broadcast axis."""
    a = _param((3, 4))
    b = _param((4,), seed=1)
    F.backward((a + b).sum())
    assert np.allclose(a.grad, np.ones((3, 4)))
    assert np.allclose(b.grad, np.full(4, 3.0))


def test_incompatible_shapes_raise():
    """Test that adding tensors with incompatible shapes names both shapes."""
    with pytest.raises(DimensionError) as excinfo:
        F.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
    assert "(2, 3)" in str(excinfo.value)


def test_matmul_values_and_gradients():
    """Test that matmul gradients are g @ b.T and a.T @ g."""
    a = _param((2, 3))
    b = _param((3, 4), seed=1)
    out = F.matmul(a, b)
    assert np.allclose(out.data, a.data @ b.data, atol=1e-5)
    F.backward(out.sum())
    assert np.allclose(a.grad, np.ones((2, 4)) @ b.data.T, atol=1e-5)
    assert np.allclose(b.grad, a.data.T @ np.ones((2, 4)), atol=1e-5)


def test_backward_requires_scalar():
    """Test that backward refuses a non-scalar loss."""
    a = _param((2, 2))
    with pytest.raises(ContractError):
        F.backward(a * 2.0)


def test_gradient_accumulates_across_calls():
    """Test that two backward passes without zeroing accumulate gradients."""
    a = _param((3,))
    F.backward((a * 2.0).sum())
    F.backward((a * 2.0).sum())
    assert np.allclose(a.grad, np.full(3, 4.0))
    a.zero_grad()
    assert np.allclose(a.grad, 0.0)


def test_no_grad_records_nothing():
    """Test that operations under no_grad build no graph."""
    a = _param((3,))
    with F.no_grad():
        out = (a * 3.0).sum()
    assert not out.requires_grad
    assert F.backward(out) == {}


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    """Test that the cross-entropy gradient equals (softmax - onehot) / N."""
    logits = _param((4, 5))
    targets = [0, 3, 1, 4]
    F.backward(F.cross_entropy(logits, targets))
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
    probs[np.arange(4), targets] -= 1.0
    assert np.allclose(logits.grad, probs / 4, atol=1e-6)


def test_cross_entropy_target_out_of_range():
    """Test that an out-of-range target raises IndexError."""
    with pytest.raises(IndexError):
        F.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_cross_entropy_zero_weight_rows_ignored():
    """Test that rows with weight zero do not contribute to the loss."""
    logits = Tensor(np.array([[2.0, 0.0], [0.0, 5.0]]))
    weighted = F.cross_entropy(logits, [0, 0], weights=[1.0, 0.0])
    alone = F.cross_entropy(Tensor(logits.data[:1]), [0])
    assert np.isclose(weighted.item(), alone.item())


def test_conv2d_output_shape():
    """Test that conv2d follows floor((H + 2p - k) / s) + 1."""
    x = Tensor(np.zeros((2, 3, 9, 9)))
    k = Tensor(np.zeros((5, 3, 3, 3)))
    assert F.conv2d(x, k, stride=2, padding=1).shape == (2, 5, 5, 5)


def test_conv2d_kernel_larger_than_input():
    """Test that a kernel larger than the padded input is rejected."""
    with pytest.raises(DimensionError):
        F.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))


@pytest.mark.parametrize("groups", [1, 3])
def test_conv2d_gradcheck(groups):
    """Test that grouped and dense convolutions pass a finite-difference check."""
    with F.precision("float64"):
        x = _param((2, 3, 5, 5))
        k = _param((3, 3 // groups, 3, 3), seed=1)
        err = F.gradcheck(lambda: (F.conv2d(x, k, stride=2, padding=1, groups=groups) ** 2).sum(), [x, k],
                          eps=1e-5)
    assert err < 1e-4


@pytest.mark.parametrize(
    "fn",
    [
        lambda t: F.tanh(t).sum(),
        lambda t: F.sigmoid(t).mean(),
        lambda t: F.silu(t).sum(),
        lambda t: (F.softmax(t, axis=-1) * t).sum(),
        lambda t: F.log_softmax(t, axis=-1).sum(),
        lambda t: (F.layer_norm(t) ** 2).sum(),
        lambda t: F.exp(t).sum(),
        lambda t: (F.take(t, [2, 0, 2], axis=1) ** 2).sum(),
        lambda t: (F.concat([t, t * 2.0], axis=0) ** 2).mean(),
        lambda t: (F.transpose(t, (1, 0)) @ t).sum(),
    ],
)
def test_elementwise_gradcheck(fn):
    """Test that common ops pass a float64 finite-difference check."""
    with F.precision("float64"):
        t = _param((3, 4), scale=0.5)
        err = F.gradcheck(lambda: fn(t), [t], eps=1e-6)
    assert err < 1e-4


def test_gradcheck_float32_tolerance():
    """Test that the float32 check stays under one percent."""
    t = _param((3, 4), scale=0.5)
    w = _param((4, 2), seed=1, scale=0.5)
    err = F.gradcheck(lambda: F.tanh(F.matmul(t, w)).sum(), [t, w], eps=1e-2)
    assert err < 1e-2


def test_masked_fill_blocks_gradient():
    """Test that masked entries receive no gradient."""
    t = _param((2, 2))
    mask = np.array([[True, False], [False, True]])
    F.backward(F.masked_fill(t, mask, -1e9).sum())
    assert np.allclose(t.grad, ~mask)


def test_precision_context_restores_dtype():
    """Test that the precision context switches and restores the default dtype."""
    before = F.get_default_dtype()
    with F.precision("float64"):
        assert Tensor([1.0]).data.dtype == np.float64
    assert F.get_default_dtype() == before


def test_zero_extent_rejected():
    """Test that tensors with an empty dimension are rejected."""
    with pytest.raises(DimensionError):
        Tensor(np.zeros((0, 3)))


def test_adam_minimises_quadratic():
    """Test that Adam drives a quadratic towards its minimum."""
    w = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = Adam({"w": w}, lr=0.1)
    for _ in range(300):
        opt.zero_grad()
        F.backward((w * w).sum())
        opt.step()
    assert np.all(np.abs(w.data) < 0.05)


def test_adam_state_roundtrip():
    """Test that optimizer state survives state_dict/load_state_dict."""
    w = Tensor(np.ones(3), requires_grad=True)
    opt = Adam({"w": w}, lr=0.01)
    F.backward((w * w).sum())
    opt.step()
    clone = Adam({"w": Tensor(np.ones(3), requires_grad=True)}, lr=0.01)
    clone.load_state_dict(opt.state_dict())
    assert clone.step_count == opt.step_count
    assert np.allclose(clone.m["w"], opt.m["w"])
