"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Usage::

    with GradTape() as tape:
        x = tape.watch(np.array([3.0, -4.0]))
        loss = (x * x).sum() / 2
    grads = tape.backward(loss, [x])
    grads[x.node].data  # -> [3., -4.]

Operations only record onto the active tape when at least one input is
already tracked by it, so constants (frozen model weights, fixed targets)
cost nothing on the backward pass.
"""
from __future__ import annotations

import itertools
import math
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

LAYER_NORM_EPS = 1e-6

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_tape_stack: List["GradTape"] = []
# node ids are unique across tapes so a tensor can never alias a foreign node
_node_ids = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Misuse of the gradient tape (non-scalar loss, foreign node, ...)."""


def active_tape() -> Optional["GradTape"]:
    return _tape_stack[-1] if _tape_stack else None


class Tensor:
    """Dense float64 array, optionally attached to a node on the active tape."""

    __slots__ = ("data", "node")
    __array_priority__ = 100.0

    def __init__(self, data, node: Optional[int] = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.node = node

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return self.data.item()

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return swapaxes(self, -1, -2)


ArrayLike = Union[Tensor, np.ndarray, float, int]
Vjp = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradTape:
    """Records operations in execution order, which is a topological order.

    A tape is meant for one forward pass.  ``backward`` does not consume the
    recording, so it may be replayed; replays are bit-identical.
    """

    def __init__(self):
        self._ops: List[Tuple[int, Tuple[Optional[int], ...], Vjp]] = []
        self._shapes: Dict[int, Tuple[int, ...]] = {}

    def __enter__(self) -> "GradTape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)

    def _new_node(self, shape) -> int:
        node = next(_node_ids)
        self._shapes[node] = tuple(shape)
        return node

    def owns(self, t: Tensor) -> bool:
        return t.node is not None and t.node in self._shapes

    def watch(self, x: ArrayLike) -> Tensor:
        """Return a leaf tensor tracked by this tape (data is copied)."""
        data = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        return Tensor(data, self._new_node(data.shape))

    def record(self, out: np.ndarray, inputs: Sequence[Tensor], vjp: Vjp) -> Tensor:
        nodes = tuple(t.node if self.owns(t) else None for t in inputs)
        node = self._new_node(out.shape)
        self._ops.append((node, nodes, vjp))
        return Tensor(out, node)

    def backward(self, loss: Tensor, leaves: Iterable[Union[Tensor, int]]) -> Dict[int, Tensor]:
        if loss.data.size != 1 or loss.ndim > 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.owns(loss):
            raise TapeError("loss is not recorded on this tape")
        leaf_ids = [l.node if isinstance(l, Tensor) else int(l) for l in leaves]
        keep = set(leaf_ids)
        for n in leaf_ids:
            if n is None or n not in self._shapes:
                raise TapeError(f"leaf {n!r} is not tracked by this tape")

        grads: Dict[int, np.ndarray] = {loss.node: np.ones(self._shapes[loss.node])}
        for node, in_nodes, vjp in reversed(self._ops):
            g = grads.get(node) if node in keep else grads.pop(node, None)
            if g is None or all(n is None for n in in_nodes):
                continue
            in_grads = vjp(g)
            for n, gi in zip(in_nodes, in_grads):
                if n is None or gi is None:
                    continue
                if n in grads:
                    grads[n] = grads[n] + gi
                else:
                    grads[n] = gi
        out = {}
        for n in leaf_ids:
            g = grads.get(n)
            out[n] = Tensor(np.zeros(self._shapes[n]) if g is None else g)
        return out


def _tracked(*ts: Tensor) -> Optional[GradTape]:
    tape = active_tape()
    if tape is None:
        return None
    return tape if any(tape.owns(t) for t in ts) else None


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _binary_shape(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"{name}: cannot broadcast {a.shape} with {b.shape}") from e


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b, "add")
    out = a.data + b.data
    tape = _tracked(a, b)
    if tape is None:
        return Tensor(out)
    sa, sb = a.shape, b.shape
    return tape.record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b, "sub")
    out = a.data - b.data
    tape = _tracked(a, b)
    if tape is None:
        return Tensor(out)
    sa, sb = a.shape, b.shape
    return tape.record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b, "mul")
    out = a.data * b.data
    tape = _tracked(a, b)
    if tape is None:
        return Tensor(out)
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return tape.record(out, (a, b), vjp)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b, "div")
    out = a.data / b.data
    tape = _tracked(a, b)
    if tape is None:
        return Tensor(out)
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return tape.record(out, (a, b), vjp)


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    tape = _tracked(a)
    if tape is None:
        return Tensor(-a.data)
    return tape.record(-a.data, (a,), lambda g: (-g,))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    tape = _tracked(a)
    if tape is None:
        return Tensor(out)
    return tape.record(out, (a,), lambda g: (g * out,))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)
    tape = _tracked(a)
    if tape is None:
        return Tensor(out)
    ad = a.data
    return tape.record(out, (a,), lambda g: (g / ad,))


def sqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    tape = _tracked(a)
    if tape is None:
        return Tensor(out)
    return tape.record(out, (a,), lambda g: (g * 0.5 / out,))


def tabs(a: ArrayLike) -> Tensor:
    """Absolute value; subgradient 0 at exactly 0."""
    a = as_tensor(a)
    out = np.abs(a.data)
    tape = _tracked(a)
    if tape is None:
        return Tensor(out)
    sgn = np.sign(a.data)
    return tape.record(out, (a,), lambda g: (g * sgn,))


def maximum(a: ArrayLike, floor: float) -> Tensor:
    """Elementwise max(a, floor) against a constant; gradient passes where a > floor."""
    a = as_tensor(a)
    out = np.maximum(a.data, floor)
    tape = _tracked(a)
    if tape is None:
        return Tensor(out)
    mask = a.data > floor
    return tape.record(out, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    tape = _tracked(a)
    if tape is None:
        return Tensor(out)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return tape.record(np.asarray(out), (a,), vjp)


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = 1
    for ax in _norm_axis(axis, a.ndim):
        count *= a.shape[ax]
    return tsum(a, axis=axis, keepdims=keepdims) / float(count)


def reshape(a: ArrayLike, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {a.shape} -> {shape}") from e
    tape = _tracked(a)
    if tape is None:
        return Tensor(out)
    src = a.shape
    return tape.record(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: ArrayLike, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    out = np.transpose(a.data, axes)
    tape = _tracked(a)
    if tape is None:
        return Tensor(out)
    inv = tuple(np.argsort(axes))
    return tape.record(out, (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a: ArrayLike, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def concat(ts: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    out = np.concatenate([t.data for t in ts], axis=axis)
    tape = _tracked(*ts)
    if tape is None:
        return Tensor(out)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return tape.record(out, ts, lambda g: tuple(np.split(g, splits, axis=axis)))


# ---------------------------------------------------------------------------
# linear algebra and neural-net primitives
# ---------------------------------------------------------------------------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as e:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from e
    out = a.data @ b.data
    tape = _tracked(a, b)
    if tape is None:
        return Tensor(out)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return tape.record(out, (a, b), vjp)


def softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    tape = _tracked(x)
    if tape is None:
        return Tensor(out)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return tape.record(out, (x,), vjp)


def log_softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    tape = _tracked(x)
    if tape is None:
        return Tensor(out)
    p = np.exp(out)
    return tape.record(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def gelu(x: ArrayLike) -> Tensor:
    """Exact GELU, x * Phi(x), with Phi the standard normal CDF."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))
    out = xd * cdf
    tape = _tracked(x)
    if tape is None:
        return Tensor(out)
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
    return tape.record(out, (x,), lambda g: (g * (cdf + xd * pdf),))


def layer_norm(x: ArrayLike, gamma: ArrayLike, beta: ArrayLike, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply the affine ``gamma * xhat + beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shape {gamma.shape}/{beta.shape} != ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    tape = _tracked(x, gamma, beta)
    if tape is None:
        return Tensor(out)
    gd = gamma.data
    lead = tuple(range(x.ndim - 1))

    def vjp(g):
        gx_hat = g * gd
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return tape.record(out, (x, gamma, beta), vjp)
