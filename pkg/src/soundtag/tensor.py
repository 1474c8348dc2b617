"""Dense float64 tensors with taped reverse-mode differentiation.

Every operation records its parents and a backward rule on the output
tensor. ``backward`` walks the tape once in reverse topological order and
assigns gradients to the leaves; the tape is then discarded.
"""
from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()
_state = threading.local()


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class GraphConsumedError(RuntimeError):
    pass


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager disabling graph recording (inference only)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev


def _check_finite(data: np.ndarray, op: str) -> None:
    if data.size and not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite value produced by '{op}'")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "op",
                 "_parents", "_backward", "_consumed", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, *,
                 _parents: tuple = (), _backward: Callable | None = None, op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, op)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)
        self.op = op
        self._parents = _parents
        self._backward = _backward
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _raise_not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def backward(self, inputs: Iterable["Tensor"] | None = None) -> None:
        backward(self, inputs)

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, p: float): return power(self, p)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, *axes): return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)


def _raise_not_scalar(t: Tensor):
    raise ValueError(f"tensor of shape {t.shape} is not a scalar")


def tensor_from(values, shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    """Build a leaf tensor from a flat row-major value list."""
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ValueError(f"negative extent in shape {shape}")
    if int(np.prod(shape, dtype=np.int64)) != flat.size:
        raise ValueError(f"shape {shape} needs {int(np.prod(shape))} values, got {flat.size}")
    return Tensor(flat.reshape(shape), requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], rule: Callable, op: str) -> Tensor:
    """Wrap an op result, recording the tape entry only when needed."""
    if _grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=parents, _backward=rule, op=op)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and parent.node_id not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, inputs: Iterable[Tensor] | None = None) -> None:
    """Assign d(loss)/d(leaf) to every reachable leaf with ``requires_grad``.

    Leaves listed in ``inputs`` that the loss does not depend on receive an
    all-zero gradient. The tape is discarded afterwards.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topological_order(loss)
    if any(node._consumed for node in order):
        raise GraphConsumedError("graph already consumed by a previous backward")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    leaves: list[Tensor] = []
    for node in reversed(order):
        g = grads.pop(node.node_id, None)
        if node._backward is None:
            if node.requires_grad:
                leaves.append(node)
                grads[node.node_id] = g  # keep for assignment below
            continue
        if g is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            _check_finite(pg, f"backward of {node.op}")
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg
    for leaf in leaves:
        g = grads.get(leaf.node_id)
        leaf.grad = np.zeros_like(leaf.data) if g is None else np.array(g, dtype=np.float64).reshape(leaf.shape)
    if inputs is not None:
        reached = {leaf.node_id for leaf in leaves}
        for t in inputs:
            if t.node_id not in reached:
                t.grad = np.zeros_like(t.data)
    for node in order:
        if node._backward is not None:
            node._consumed = True
            node._backward = None
            node._parents = ()
    loss._consumed = True


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def rule(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))
    return _make(out, (a, b), rule, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes with numpy broadcasting of the rest."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands need at least 2 dimensions")

    def rule(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _make(a.data @ b.data, (a, b), rule, "matmul")


# ---------------------------------------------------------------------------
# unary maps
# ---------------------------------------------------------------------------

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # tanh form cannot overflow
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus_np(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def softplus(a: Tensor) -> Tensor:
    return _make(_softplus_np(a.data), (a,), lambda g: (g * _sigmoid_np(a.data),), "softplus")


def mish(a: Tensor) -> Tensor:
    x = a.data
    t = np.tanh(_softplus_np(x))

    def rule(g):
        return (g * (t + x * (1.0 - t * t) * _sigmoid_np(x)),)
    return _make(x * t, (a,), rule, "mish")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _make(out, (a,), rule, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(p is None or p is Ellipsis or isinstance(p, (int, np.integer, slice)) for p in parts)

    def rule(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)
    return _make(a.data[idx], (a,), rule, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))
    return _make(out, tuple(tensors), rule, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def rule(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))
    return _make(out, tuple(tensors), rule, "stack")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _make(out, (a,), rule, "softmax")


# ---------------------------------------------------------------------------
# spatial primitives
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """[B, C, H+kh-1, W+kw-1] -> [B*H*W, C*kh*kw] patch matrix."""
    B, C = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    H, W = win.shape[2:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, C * kh * kw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded cross-correlation with an odd kernel, stride 1.

    x: [batch, in, H, W]; weight: [out, in, kh, kw]; bias: [out].
    """
    B, C, H, W = x.shape
    O, Ci, kh, kw = weight.shape
    if C != Ci:
        raise ValueError(f"conv2d expects {Ci} input channels, got {C}")
    ph, pw = kh // 2, kw // 2
    pads = ((0, 0), (0, 0), (ph, ph), (pw, pw))
    cols = _im2col(np.pad(x.data, pads), kh, kw)
    wmat = weight.data.reshape(O, -1)
    out = (cols @ wmat.T).reshape(B, H, W, O).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, O, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def rule(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * H * W, O)
        gw = (gmat.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            # input gradient = same-padded correlation of g with the flipped, transposed kernel
            wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(C, -1)
            gcols = _im2col(np.pad(g, pads), kh, kw)
            gx = (gcols @ wflip.T).reshape(B, H, W, C).transpose(0, 3, 1, 2)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))
    return _make(out, parents, rule, "conv2d")


def max_pool2d(x: Tensor, pool: tuple[int, int]) -> Tensor:
    """Non-overlapping max over [.., H, W] windows of size ``pool``.

    The gradient goes to the first maximal cell of each window.
    """
    ph, pw = pool
    B, C, H, W = x.shape
    if H == 0 or W == 0:
        raise ValueError("max_pool2d on zero extent")
    if H % ph or W % pw:
        raise ValueError(f"extents {(H, W)} not divisible by pool {pool}")
    Ho, Wo = H // ph, W // pw
    win = x.data.reshape(B, C, Ho, ph, Wo, pw).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, ph * pw)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def rule(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(B, C, Ho, Wo, ph, pw).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gx,)
    return _make(out, (x,), rule, "max_pool2d")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    passed: bool
    max_rel_error: float
    checked: int

    def __bool__(self) -> bool:
        return self.passed


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, step: float = 1e-5,
               tol: float = 1e-4, indices: Sequence[tuple] | None = None) -> GradCheckResult:
    """Compare reverse-mode gradients of scalar ``f`` at ``x`` with central differences.

    The relative error of each coordinate is |a - n| / max(1, |a|, |n|).
    ``indices`` restricts the comparison to a subset of coordinates.
    Callers must keep ``x`` away from kinks (ReLU at 0, tied maxima).
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise ValueError(f"grad_check needs scalar output, got shape {out.shape}")
    backward(out, [leaf])
    analytic = leaf.grad
    if indices is None:
        indices = list(np.ndindex(*base.shape))
    worst = 0.0
    with no_grad():
        for idx in indices:
            probe = base.copy()
            probe[idx] += step
            up = f(Tensor(probe)).item()
            probe[idx] -= 2 * step
            down = f(Tensor(probe)).item()
            numeric = (up - down) / (2 * step)
            a = analytic[idx]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return GradCheckResult(worst < tol, worst, len(indices))
