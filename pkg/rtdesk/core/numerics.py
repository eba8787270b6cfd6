"""
Dense tensors with reverse-mode automatic differentiation.

This module provides the small numeric engine every model in rtdesk is
written against: an immutable ``Tensor`` backed by a row-major numpy
buffer, a set of differentiable operations that record a computation
graph, ``backward`` to accumulate gradients into leaf tensors, and the
``Adam`` optimizer.

Default precision is 32-bit. ``precision("float64")`` (or the
``RTDESK_PRECISION`` environment variable) switches newly created
tensors to 64-bit, which the gradient oracle tests rely on.
"""
import contextlib
import logging
import os
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import Precision
from .errors import ContractError, DimensionError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]
Axis = Optional[Union[int, Tuple[int, ...]]]

_DTYPES = {Precision.FLOAT32.value: np.float32, Precision.FLOAT64.value: np.float64}
_state = {
    "dtype": _DTYPES.get(os.environ.get("RTDESK_PRECISION", "float32"), np.float32),
    "grad_enabled": True,
}


def get_default_dtype() -> type:
    """Return the numpy dtype used for newly created tensors."""
    return _state["dtype"]


def set_precision(name: Union[Precision, str]) -> None:
    """
    Set the default floating point precision.

    Args:
        name: "float32" or "float64"
    """
    if isinstance(name, Precision):
        name = name.value
    if name not in _DTYPES:
        raise ValueError(f"Unsupported precision: {name}")
    _state["dtype"] = _DTYPES[name]


@contextlib.contextmanager
def precision(name: Union[Precision, str]) -> Iterator[None]:
    """Temporarily switch the default precision."""
    previous = _state["dtype"]
    set_precision(name)
    try:
        yield
    finally:
        _state["dtype"] = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    previous = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = previous


BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """
    An immutable dense tensor that can take part in a computation graph.

    Leaf tensors created with ``requires_grad=True`` own a gradient
    accumulator of the same shape, initialised to zero. Tensors produced by
    operations keep references to their parents and a closure that maps the
    output gradient to parent gradients.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_op", "_backward_fn")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        array = np.array(data, dtype=get_default_dtype(), order="C")
        if array.ndim and min(array.shape) <= 0:
            raise DimensionError("Tensor extents must be strictly positive", array.shape)
        self.data = array
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(array) if requires_grad else None
        self._parents: Tuple["Tensor", ...] = ()
        self._op = "leaf"
        self._backward_fn: Optional[BackwardFn] = None

    @classmethod
    def _from_op(
        cls,
        data: np.ndarray,
        parents: Sequence["Tensor"],
        op: str,
        backward_fn: BackwardFn,
    ) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(data)
        out.grad = None
        out._op = op
        tracked = _state["grad_enabled"] and any(p.requires_grad for p in parents)
        out.requires_grad = tracked
        if tracked:
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        else:
            out._parents = ()
            out._backward_fn = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def op(self) -> str:
        return self._op

    def numpy(self) -> np.ndarray:
        """Return a copy of the underlying buffer."""
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op='{self._op}', requires_grad={self.requires_grad})"

    # Operator sugar; all of it routes through the functional ops below.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis, keepdims)

    def mean(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    """Wrap a constant in a non-differentiable tensor."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"Cannot broadcast operands of {op}", a.shape, b.shape)


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), "mul", backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return Tensor._from_op(a.data / b.data, (a, b), "div", backward)


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), "neg", lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    def backward(g):
        return (g * exponent * np.power(a.data, exponent - 1),)

    return Tensor._from_op(np.power(a.data, exponent), (a,), "pow", backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return Tensor._from_op(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._from_op(a.data * mask, (a,), "relu", lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return Tensor._from_op(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def silu(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        return (g * (s + a.data * s * (1.0 - s)),)

    return Tensor._from_op(a.data * s, (a,), "silu", backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant; no gradient flows there."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    out = np.where(mask, np.asarray(value, dtype=a.data.dtype), a.data)
    return Tensor._from_op(out, (a,), "masked_fill", lambda g: (np.where(mask, 0.0, g),))


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError("Cannot reshape", a.shape, tuple(shape))
    return Tensor._from_op(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(
        np.transpose(a.data, axes), (a,), "transpose", lambda g: (np.transpose(g, inverse),)
    )


def swapaxes(a: Tensor, axis1: int, axis2: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[axis1], axes[axis2] = axes[axis2], axes[axis1]
    return transpose(a, axes)


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        return (grad,)

    return Tensor._from_op(np.array(out, copy=True), (a,), "getitem", backward)


def take(a: Tensor, indices: Sequence[int], axis: int = 0) -> Tensor:
    """Gather slices of ``a`` along ``axis``; repeated indices accumulate gradient."""
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % a.ndim
    out = np.take(a.data, indices, axis=axis)

    def backward(g):
        grad = np.zeros_like(a.data)
        moved = np.moveaxis(grad, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (grad,)

    return Tensor._from_op(out, (a,), "take", backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError("Cannot concatenate", *[t.shape for t in tensors])
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(out, tensors, "concat", backward)


def embedding(table: Tensor, indices) -> Tensor:
    """Look up rows of ``table`` ([V, D]) for integer ``indices`` of any shape."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise IndexError(
            f"Embedding index out of range [0, {table.shape[0]}): "
            f"min {indices.min()}, max {indices.max()}"
        )
    out = table.data[indices]

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, indices.reshape(-1), g.reshape(-1, table.shape[1]))
        return (grad,)

    return Tensor._from_op(out, (table,), "embedding", backward)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis: Axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        return (np.array(_expand_reduced(g, a.shape, axis, keepdims)),)

    return Tensor._from_op(np.asarray(out), (a,), "sum", backward)


def mean(a: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size // max(1, np.asarray(out).size)

    def backward(g):
        return (np.array(_expand_reduced(g, a.shape, axis, keepdims)) / count,)

    return Tensor._from_op(np.asarray(out, dtype=a.data.dtype), (a,), "mean", backward)


# ---------------------------------------------------------------------------
# Linear algebra and convolution
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product.

    Two-dimensional operands follow the standard [m,k] x [k,n] contract.
    Higher-rank operands are batched over their leading dimensions with
    numpy broadcasting.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul inner dimensions differ", a.shape, b.shape)
    if a.ndim > 2 or b.ndim > 2:
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise DimensionError("matmul batch dimensions differ", a.shape, b.shape)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return Tensor._from_op(np.matmul(a.data, b.data), (a, b), "matmul", backward)


def conv2d(
    x: Tensor,
    kernel: Tensor,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """
    Two-dimensional cross-correlation with zero padding.

    Args:
        x: Input of shape [B, C, H, W]
        kernel: Weights of shape [O, C // groups, kh, kw]
        stride: Step between windows
        padding: Zero padding on every spatial border
        groups: Channel groups; ``groups == C == O`` is a depthwise convolution

    Returns:
        Output of shape [B, O, H', W'] with H' = floor((H + 2p - kh) / stride) + 1
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and kernel", x.shape, kernel.shape)
    batch, channels, height, width = x.shape
    out_channels, group_channels, kh, kw = kernel.shape
    if channels != group_channels * groups or out_channels % groups:
        raise DimensionError(f"conv2d channel mismatch for groups={groups}", x.shape, kernel.shape)
    padded_h, padded_w = height + 2 * padding, width + 2 * padding
    if kh > padded_h or kw > padded_w:
        raise DimensionError(
            f"conv2d kernel larger than padded input (padding={padding})", x.shape, kernel.shape
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    out_h = (padded_h - kh) // stride + 1
    out_w = (padded_w - kw) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :out_h, :out_w]
    per_group = out_channels // groups

    if groups == 1:
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(batch * out_h * out_w, -1)
        w2 = kernel.data.reshape(out_channels, -1)
        out = (cols @ w2.T).reshape(batch, out_h, out_w, out_channels).transpose(0, 3, 1, 2)
    else:
        grouped = windows.reshape(batch, groups, group_channels, out_h, out_w, kh, kw)
        wg = kernel.data.reshape(groups, per_group, group_channels, kh, kw)
        out = np.einsum("bgchwij,gocij->bgohw", grouped, wg).reshape(
            batch, out_channels, out_h, out_w
        )

    def backward(g):
        if groups == 1:
            g2 = g.transpose(0, 2, 3, 1).reshape(-1, out_channels)
            grad_kernel = (g2.T @ cols).reshape(kernel.shape)
            grad_windows = (g2 @ w2).reshape(batch, out_h, out_w, channels, kh, kw)
            grad_windows = grad_windows.transpose(0, 3, 1, 2, 4, 5)
        else:
            gg = g.reshape(batch, groups, per_group, out_h, out_w)
            grad_kernel = np.einsum("bgohw,bgchwij->gocij", gg, grouped).reshape(kernel.shape)
            grad_windows = np.einsum("bgohw,gocij->bgchwij", gg, wg).reshape(
                batch, channels, out_h, out_w, kh, kw
            )
        grad_padded = np.zeros((batch, channels, padded_h, padded_w), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                grad_padded[
                    :, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride
                ] += grad_windows[..., i, j]
        grad_x = grad_padded[:, :, padding:padding + height, padding:padding + width]
        return np.ascontiguousarray(grad_x), grad_kernel

    return Tensor._from_op(out, (x, kernel), "conv2d", backward)


# ---------------------------------------------------------------------------
# Normalisation, softmax and losses
# ---------------------------------------------------------------------------

def layer_norm(x: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalise to zero mean and unit variance along ``axis`` (no affine part)."""
    mu = x.data.mean(axis=axis, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=axis, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std

    def backward(g):
        g_mean = g.mean(axis=axis, keepdims=True)
        gx_mean = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv_std * (g - g_mean - xhat * gx_mean),)

    return Tensor._from_op(xhat, (x,), "layer_norm", backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < max(1, x.ndim):
        raise DimensionError(f"softmax axis {axis} out of range", x.shape)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (x,), "softmax", backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (x,), "log_softmax", backward)


def cross_entropy(
    logits: Tensor,
    targets: Sequence[int],
    weights: Optional[Sequence[float]] = None,
) -> Tensor:
    """
    Mean categorical cross-entropy.

    Args:
        logits: Tensor of shape [N, V]
        targets: N class indices in [0, V)
        weights: Optional per-row weights; the result is the weighted mean.
            Rows with weight 0 do not contribute.

    Returns:
        Scalar tensor. Its gradient is (softmax - onehot) * w_i / sum(w).
    """
    if logits.ndim != 2:
        raise DimensionError("cross_entropy expects [N, V] logits", logits.shape)
    n, vocab = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != n:
        raise DimensionError("cross_entropy target count differs from rows", logits.shape, targets.shape)
    bad = (targets < 0) | (targets >= vocab)
    if bad.any():
        raise IndexError(f"Target {int(targets[bad][0])} out of range [0, {vocab})")
    w = np.ones(n, dtype=logits.data.dtype) if weights is None else np.asarray(weights, dtype=logits.data.dtype)
    total = w.sum()
    if total <= 0:
        raise ContractError("cross_entropy weights must have a positive sum")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -(w * log_probs[rows, targets]).sum() / total

    def backward(g):
        grad = np.exp(log_probs)
        grad[rows, targets] -= 1.0
        grad *= (w / total)[:, None]
        return (grad * g,)

    return Tensor._from_op(np.asarray(loss, dtype=logits.data.dtype), (logits,), "cross_entropy", backward)


def mse_loss(pred: Tensor, target, weights: Optional[np.ndarray] = None) -> Tensor:
    """Mean squared error; optional weights broadcast against ``pred``."""
    target = np.asarray(as_tensor(target).data, dtype=pred.data.dtype)
    if target.shape != pred.shape:
        raise DimensionError("mse_loss shape mismatch", pred.shape, target.shape)
    w = np.ones_like(pred.data) if weights is None else np.broadcast_to(
        np.asarray(weights, dtype=pred.data.dtype), pred.shape
    )
    total = w.sum()
    if total <= 0:
        raise ContractError("mse_loss weights must have a positive sum")
    diff = pred.data - target
    loss = (w * diff * diff).sum() / total

    def backward(g):
        return (g * 2.0 * w * diff / total,)

    return Tensor._from_op(np.asarray(loss, dtype=pred.data.dtype), (pred,), "mse", backward)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """
    Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Calling this twice on the same graph without zeroing accumulates twice.

    Args:
        loss: Scalar tensor

    Returns:
        Mapping from each reachable leaf tensor to its accumulated gradient
    """
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[Tensor, np.ndarray] = {}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward_fn is None:
            node.grad = node.grad + g if node.grad is not None else np.array(g)
            leaves[node] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ContractError(
                    f"Gradient shape {pg.shape} differs from output shape {parent.shape} in '{node.op}'"
                )
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return leaves


def gradcheck(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-3,
    max_checks: int = 20,
    seed: int = 0,
    floor: float = 1e-3,
) -> float:
    """
    Compare analytic gradients against central finite differences.

    ``fn`` is re-evaluated after perturbing entries of ``inputs`` in place,
    so it must read the inputs at call time.

    Returns:
        The maximum relative error ``|a - n| / max(|a|, |n|, floor)`` over
        the sampled coordinates of every input.
    """
    rng = np.random.default_rng(seed)
    for tensor in inputs:
        tensor.zero_grad()
    backward(fn())
    worst = 0.0
    for tensor in inputs:
        analytic = tensor.grad.copy()
        flat = tensor.data.reshape(-1)
        count = min(max_checks, flat.size)
        for idx in rng.choice(flat.size, size=count, replace=False):
            original = flat[idx]
            flat[idx] = original + eps
            plus = float(fn().data)
            flat[idx] = original - eps
            minus = float(fn().data)
            flat[idx] = original
            numeric = (plus - minus) / (2.0 * eps)
            a = float(analytic.reshape(-1)[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    logger.debug("gradcheck max relative error %.3e", worst)
    return worst


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------

class Adam:
    """
    Adam optimizer over a named parameter set.

    Defaults follow the conventional beta1=0.9, beta2=0.999, eps=1e-8.
    """

    def __init__(
        self,
        params: Dict[str, Tensor],
        lr: float = 1e-3,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: Optional[float] = None) -> None:
        """Apply one update using the gradients currently held by the parameters."""
        lr = self.lr if lr is None else lr
        self.step_count += 1
        bias1 = 1.0 - self.beta1 ** self.step_count
        bias2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            if not p.requires_grad:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)

    def hyperparameters(self) -> Dict[str, float]:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {"step_count": np.asarray(self.step_count, dtype=np.int64)}
        for name in self.params:
            state[f"m/{name}"] = self.m[name]
            state[f"v/{name}"] = self.v[name]
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        self.step_count = int(state["step_count"])
        for name in self.params:
            self.m[name] = np.array(state[f"m/{name}"], dtype=self.params[name].data.dtype)
            self.v[name] = np.array(state[f"v/{name}"], dtype=self.params[name].data.dtype)
