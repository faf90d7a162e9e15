"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op returns a fresh :class:`Tensor`. When any input requires a
gradient, the output records a :class:`Node` holding its inputs and a
backward rule; :func:`backward` orders those nodes into a :class:`Tape`
and replays it in reverse.
"""

from __future__ import annotations

import contextlib
import weakref
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class ConfigError(ValueError):
    """An op was configured with invalid hyperparameters."""


class UsageError(RuntimeError):
    """An API was called in a state where it is not allowed."""


class NumericError(FloatingPointError):
    """A non-finite value appeared in a forward pass."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    output_ref: "weakref.ref[Tensor]"  # weak, so a graph is freed by refcount alone
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

    @property
    def output(self) -> "Tensor":
        return self.output_ref()


class Tensor:
    """A dense n-dimensional float64 array that may take part in a tape.

    Leaf tensors created with ``requires_grad=True`` own a zero-initialised
    ``grad`` buffer which :func:`backward` accumulates into.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self._node: Optional[Node] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """A trainable leaf tensor with a dotted-path name assigned by its owner."""

    def __init__(self, data, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, name=name)

    def assign(self, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.data.shape:
            raise DimensionError(f"cannot assign {value.shape} to parameter of shape {self.shape}")
        self.data = _as_array(value)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], rule) -> Tensor:
    res = Tensor.__new__(Tensor)
    out = np.asarray(out, dtype=np.float64)
    out.flags.writeable = False
    res.data = out
    res.name = None
    res.grad = None
    res._node = None
    res.requires_grad = _grad_enabled and any(t.requires_grad for t in inputs)
    if res.requires_grad:
        res._node = Node(op, inputs, weakref.ref(res), rule)
    return res


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Tape and backward pass
# ---------------------------------------------------------------------------


class Tape:
    """Nodes reachable from a root, in topological (execution) order."""

    def __init__(self, root: Tensor):
        self.nodes: list[Node] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            node = t._node
            if node is None:
                continue
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((t, True))
            for inp in node.inputs:
                if inp._node is not None and id(inp._node) not in seen:
                    stack.append((inp, False))

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def first_nonfinite(self) -> Optional[Node]:
        for node in self.nodes:
            if not np.all(np.isfinite(node.output.data)):
                return node
        return None


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = Tape(loss)
    if not loss.requires_grad:
        return tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = inp.grad + gi if inp.grad is not None else np.array(gi, dtype=np.float64)
            else:
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
    if loss._node is None and loss.grad is not None:
        loss.grad = loss.grad + 1.0
    return tape


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), rule)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), rule)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def rule(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", a.data * b.data, (a, b), rule)


def square(x: Tensor) -> Tensor:
    return _make("square", x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _make("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _make("sum", out, (x,), rule)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def detach(x: Tensor) -> Tensor:
    """Stop-gradient: same values, no path back to ``x``."""
    return Tensor(x.data)


stop_gradient = detach


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    A 1x1 pointwise convolution over the channel axis is exactly
    ``x @ W`` with ``x`` laid out as (..., positions, channels).
    """
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def rule(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make("matmul", a.data @ b.data, (a, b), rule)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _make("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def swish(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = _sigmoid(x.data)
    out = x.data * s
    return _make("swish", out, (x,), lambda g: (g * (s + out * (1.0 - s)),))


def glu(x: Tensor) -> Tensor:
    """Gated linear unit over the last axis: first half * sigmoid(second half)."""
    if x.shape[-1] % 2:
        raise DimensionError(f"glu needs an even last dimension, got {x.shape[-1]}")
    c = x.shape[-1] // 2
    a, b = x.data[..., :c], x.data[..., c:]
    s = _sigmoid(b)

    def rule(g):
        return (np.concatenate([g * s, g * a * s * (1.0 - s)], axis=-1),)

    return _make("glu", a * s, (x,), rule)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make("softmax", p, (x,), rule)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    d = x.shape[-1]
    if d == 0:
        raise DimensionError("layer_norm over an empty axis")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"gamma/beta must have shape ({d},)")
    if eps <= 0:
        raise ConfigError("eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def rule(g):
        gx = ggamma = gbeta = None
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _make("layer_norm", out, (x, gamma, beta), rule)


def depthwise_conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel 1D convolution with zero 'same' padding.

    ``x`` is (..., channels, time) and ``kernel`` is (channels, k) with k odd.
    As in most deep-learning frameworks this is a cross-correlation.
    """
    c, k = kernel.shape
    if k % 2 == 0:
        raise ConfigError(f"depthwise kernel size must be odd, got {k}")
    if x.shape[-2] != c:
        raise DimensionError(f"expected {c} channels, got {x.shape[-2]}")
    p = k // 2
    pad = [(0, 0)] * (x.ndim - 1) + [(p, p)]
    windows = sliding_window_view(np.pad(x.data, pad), k, axis=-1)  # (..., c, t, k)
    out = np.einsum("...ctk,ck->...ct", windows, kernel.data)

    def rule(g):
        gx = gk = None
        if kernel.requires_grad:
            t = x.shape[-1]
            gk = np.einsum("nctk,nct->ck", windows.reshape(-1, c, t, k), g.reshape(-1, c, t))
        if x.requires_grad:
            gwin = sliding_window_view(np.pad(g, pad), k, axis=-1)
            gx = np.einsum("...ctk,ck->...ct", gwin, kernel.data[:, ::-1])
        return gx, gk

    return _make("depthwise_conv1d", out, (x, kernel), rule)


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not training or rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ConfigError("dropout rate must be < 1")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make("dropout", x.data * mask, (x,), lambda g: (g * mask,))


def straight_through(q_s: Tensor, q_r: Tensor) -> Tensor:
    """Forward value of ``q_r``; gradient passed to ``q_s`` unchanged."""
    if q_s.shape != q_r.shape:
        raise DimensionError(f"straight_through shape mismatch {q_s.shape} vs {q_r.shape}")
    return _make("straight_through", q_r.data.copy(), (q_s,), lambda g: (g,))


def gather_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """``table[index]`` for an integer index array; gradients scatter-add."""
    index = np.asarray(index, dtype=np.int64)

    def rule(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, index.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _make("gather_rows", table.data[index], (table,), rule)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def numerical_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``f`` w.r.t. the writable array ``arr``."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(fn: Callable[..., Tensor], *inputs: np.ndarray, h: float = 1e-5) -> list[float]:
    """Relative error between analytic and finite-difference gradients.

    ``fn`` maps Tensors to a scalar Tensor; one error per input is returned.
    """
    tensors = [Tensor(x, requires_grad=True) for x in inputs]
    backward(fn(*tensors))
    errors = []
    work = [np.array(x, dtype=np.float64) for x in inputs]
    for i, arr in enumerate(work):
        def f():
            with no_grad():
                return fn(*[Tensor(w) for w in work]).item()
        errors.append(rel_error(tensors[i].grad, numerical_grad(f, arr, h)))
    return errors
