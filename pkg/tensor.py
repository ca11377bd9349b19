"""
Dense value grids with reverse-mode automatic differentiation.

Every differentiable op records its parents and a backward closure on the
output Tensor; `backward` walks that record in reverse topological order.
Storage is float32; `float64_mode()` switches newly created tensors to float64
for oracle and finite-difference work.
"""
import os
import logging
from contextlib import contextmanager
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit
from dotenv import load_dotenv

load_dotenv()

logger = logging.getLogger(__name__)

DEBUG = os.getenv("LOWBRIDGE_DEBUG", "").lower() in ("1", "true", "yes")

_dtype = np.float32
_grad_enabled = True


class ShapeError(ValueError):
    pass


class NonFiniteError(RuntimeError):
    pass


class GradientError(ValueError):
    pass


@contextmanager
def float64_mode():
    global _dtype
    previous = _dtype
    _dtype = np.float64
    try:
        yield
    finally:
        _dtype = previous


@contextmanager
def no_grad():
    """Ops run inside this block record nothing and produce constant tensors."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def set_debug(enabled: bool):
    global DEBUG
    DEBUG = enabled


class Tensor:
    """
    A value grid plus the bookkeeping needed for backpropagation.

    Leaves are created by the user (parameters, inputs); every other tensor is
    produced by an op and remembers its parents and a backward closure.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or _dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._op = "leaf"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(value: TensorLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _record(out_data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if DEBUG and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out._op = op
    needs_grad = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs_grad
    if needs_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _check_rank(x: Tensor, rank: int, op: str):
    if x.data.ndim != rank:
        raise ShapeError(f"{op} expects a rank-{rank} tensor, got shape {x.shape}")


def _check_same_dims(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        for axis, (da, db) in enumerate(zip(a.shape, b.shape)):
            if da != db:
                raise ShapeError(f"{op}: dimension {axis} differs ({da} vs {db})")
        raise ShapeError(f"{op}: rank differs ({len(a.shape)} vs {len(b.shape)})")


# ---------------------------------------------------------------------------
# convolution, pooling, resampling, normalization
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    _check_rank(x, 4, "conv2d input")
    _check_rank(weight, 4, "conv2d weight")
    n, c, h, w = x.shape
    f, wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(f"conv2d: input channel dimension is {c} but weight expects {wc}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel height/width must be odd, got {kh}x{kw}")
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"conv2d: bias dimension 0 is {bias.shape} but weight has {f} filters")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} or padding {padding}")
    span_h = h + 2 * padding - kh
    span_w = w + 2 * padding - kw
    if span_h < 0 or span_h % stride:
        raise ShapeError(f"conv2d: height {h} with kernel {kh}, padding {padding}, stride {stride} is not integral")
    if span_w < 0 or span_w % stride:
        raise ShapeError(f"conv2d: width {w} with kernel {kw}, padding {padding}, stride {stride} is not integral")
    out_h = span_h // stride + 1
    out_w = span_w // stride + 1

    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, Ho, Wo, F) -> (N, F, Ho, Wo)
    out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, f, 1, 1)
    out = np.ascontiguousarray(out)

    def backward_fn(grad):
        grad_w = np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_b = grad.sum(axis=(0, 2, 3)) if bias is not None else None
        grad_padded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                contribution = np.tensordot(grad, weight.data[:, :, i, j], axes=([1], [0]))
                grad_padded[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += contribution.transpose(0, 3, 1, 2)
        grad_x = grad_padded[:, :, padding:padding + h, padding:padding + w] if padding else grad_padded
        return (grad_x, grad_w, grad_b) if bias is not None else (grad_x, grad_w)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _record(out, parents, backward_fn, "conv2d")


def pool_max2x2(x: Tensor) -> Tensor:
    _check_rank(x, 4, "pool_max2x2")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"pool_max2x2 needs even height and width, got {h}x{w}")
    # window entries in row-major order: (0,0), (0,1), (1,0), (1,1)
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    winner = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, winner[..., None], axis=-1)[..., 0]

    def backward_fn(grad):
        routed = np.zeros(blocks.shape, dtype=grad.dtype)
        np.put_along_axis(routed, winner[..., None], grad[..., None], axis=-1)
        return (routed.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _record(np.ascontiguousarray(out), (x,), backward_fn, "pool_max2x2")


def upsample_nearest2x(x: Tensor) -> Tensor:
    _check_rank(x, 4, "upsample_nearest2x")
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward_fn(grad):
        return (grad.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _record(out, (x,), backward_fn, "upsample_nearest2x")


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    _check_rank(x, 4, "instance_norm")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"instance_norm: gamma/beta must have shape ({c},), got {gamma.shape} and {beta.shape}")
    mean = x.data.mean(axis=(2, 3), keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    normalized = centered * inv_std
    g = gamma.data.reshape(1, c, 1, 1)
    out = normalized * g + beta.data.reshape(1, c, 1, 1)
    count = h * w

    def backward_fn(grad):
        grad_gamma = (grad * normalized).sum(axis=(0, 2, 3))
        grad_beta = grad.sum(axis=(0, 2, 3))
        grad_norm = grad * g
        grad_x = inv_std / count * (
            count * grad_norm
            - grad_norm.sum(axis=(2, 3), keepdims=True)
            - normalized * (grad_norm * normalized).sum(axis=(2, 3), keepdims=True)
        )
        return grad_x, grad_gamma, grad_beta

    return _record(out, (x, gamma, beta), backward_fn, "instance_norm")


# ---------------------------------------------------------------------------
# pointwise ops
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # subgradient 0 at x == 0
    return _record(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda grad: (grad * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    factor = np.where(x.data > 0, 1.0, slope).astype(x.data.dtype)
    return _record(x.data * factor, (x,), lambda grad: (grad * factor,), "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return _record(out, (x,), lambda grad: (grad * out * (1 - out),), "sigmoid")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_rank(a, 4, "concat_channels")
    _check_rank(b, 4, "concat_channels")
    for axis in (0, 2, 3):
        if a.shape[axis] != b.shape[axis]:
            raise ShapeError(f"concat_channels: dimension {axis} differs ({a.shape[axis]} vs {b.shape[axis]})")
    split = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _record(out, (a, b), lambda grad: (grad[:, :split], grad[:, split:]), "concat_channels")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dims(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda grad: (grad, grad), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dims(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda grad: (grad, -grad), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dims(a, b, "mul")
    return _record(a.data * b.data, (a, b), lambda grad: (grad * b.data, grad * a.data), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dims(a, b, "div")
    out = a.data / b.data
    return _record(out, (a, b), lambda grad: (grad / b.data, -grad * out / b.data), "div")


def scale(x: Tensor, factor: float) -> Tensor:
    return _record(x.data * x.data.dtype.type(factor), (x,), lambda grad: (grad * factor,), "scale")


def add_scalar(x: Tensor, value: float) -> Tensor:
    return _record(x.data + x.data.dtype.type(value), (x,), lambda grad: (grad,), "add_scalar")


def sum(x: Tensor, axes: Optional[Tuple[int, ...]] = None) -> Tensor:
    out = np.asarray(x.data.sum(axis=axes), dtype=x.data.dtype)
    shape = x.shape

    def backward_fn(grad):
        if axes is None:
            return (np.broadcast_to(grad, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(grad, axes), shape).copy(),)

    return _record(out, (x,), backward_fn, "sum")


def mean(x: Tensor) -> Tensor:
    count = x.data.size
    out = np.asarray(x.data.mean(), dtype=x.data.dtype)
    return _record(out, (x,), lambda grad: (np.full(x.shape, grad / count, dtype=x.data.dtype),), "mean")


def softmax_channels(x: Tensor) -> Tensor:
    _check_rank(x, 4, "softmax_channels")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    out = exp / exp.sum(axis=1, keepdims=True)

    def backward_fn(grad):
        return (out * (grad - (grad * out).sum(axis=1, keepdims=True)),)

    return _record(out, (x,), backward_fn, "softmax_channels")


def log_softmax_channels(x: Tensor) -> Tensor:
    _check_rank(x, 4, "log_softmax_channels")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - log_norm
    probs = np.exp(out)

    def backward_fn(grad):
        return (grad - probs * grad.sum(axis=1, keepdims=True),)

    return _record(out, (x,), backward_fn, "log_softmax_channels")


# ---------------------------------------------------------------------------
# backpropagation
# ---------------------------------------------------------------------------

def topological_order(root: Tensor) -> List[Tensor]:
    """Graph nodes reachable from root, parents before children, each once."""
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
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor):
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any tensor that requires grad")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = grad.astype(node.data.dtype) if node.grad is None else node.grad + grad
            continue
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad


def zero_grad(tensors: Iterable[Tensor]):
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# finite-difference harness
# ---------------------------------------------------------------------------

def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-3) -> float:
    """
    Compare analytic gradients of the scalar `fn(*tensors)` with central
    finite differences, everything evaluated in float64.

    Returns the largest elementwise relative error, using max(|a|, |n|, 1e-3)
    as denominator.
    """
    with float64_mode():
        leaves = [Tensor(np.asarray(value, dtype=np.float64), requires_grad=True) for value in inputs]
        out = fn(*leaves)
        backward(out)
        worst = 0.0
        for index, leaf in enumerate(leaves):
            analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            numeric = np.zeros_like(leaf.data)
            flat = leaf.data.reshape(-1)
            for k in range(flat.size):
                original = flat[k]
                flat[k] = original + h
                plus = _evaluate(fn, leaves)
                flat[k] = original - h
                minus = _evaluate(fn, leaves)
                flat[k] = original
                numeric.reshape(-1)[k] = (plus - minus) / (2 * h)
            denominator = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
            error = float(np.max(np.abs(analytic - numeric) / denominator)) if numeric.size else 0.0
            logger.debug("input %d: max relative gradient error %.3e", index, error)
            worst = max(worst, error)
    return worst


def _evaluate(fn, leaves: Sequence[Tensor]) -> float:
    with no_grad():
        return fn(*leaves).item()
