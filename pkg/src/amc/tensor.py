"""Dense float64 tensors and a small reverse-mode gradient tape.

Every op accepts either a plain array (untracked constant) or a :class:`Var`
(a node on a :class:`Tape`).  When no input is tracked the op simply returns
an ``ndarray``, so the same model code serves both inference and training.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

COSINE_EPS = 1e-8


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class FeatureTensor:
    """Immutable dense real tensor of rank <= 3 with finite entries."""

    __slots__ = ("_array",)

    def __init__(self, data, shape: Sequence[int] | None = None):
        arr = np.array(data, dtype=np.float64)
        if shape is not None:
            shape = tuple(int(s) for s in shape)
            if arr.size != int(np.prod(shape, dtype=np.int64)):
                raise DimensionError(
                    f"data length {arr.size} does not match shape {shape}")
            arr = arr.reshape(shape)
        if arr.ndim > 3:
            raise DimensionError(f"rank {arr.ndim} exceeds 3")
        if any(s < 1 for s in arr.shape):
            raise DimensionError(f"extents must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("FeatureTensor entries must be finite")
        arr.setflags(write=False)
        self._array = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self._array.shape

    @property
    def ndim(self) -> int:
        return self._array.ndim

    @property
    def data(self) -> np.ndarray:
        """Row-major flat view."""
        return self._array.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self._array

    def __array__(self, dtype=None, copy=None):
        if dtype is None or np.dtype(dtype) == np.float64:
            return self._array
        return self._array.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, FeatureTensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self._array, other._array)

    def __hash__(self):
        return hash((self.shape, self._array.tobytes()))

    def __repr__(self):
        return f"FeatureTensor(shape={self.shape})"


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    adjoint: Callable[[np.ndarray], tuple] | None = None


@dataclass
class Tape:
    """Append-only record of tracked computations."""

    nodes: list[Node] = field(default_factory=list)

    def leaf(self, value, op: str = "leaf") -> "Var":
        arr = np.array(value, dtype=np.float64)
        self.nodes.append(Node(op, (), arr))
        return Var(self, len(self.nodes) - 1)

    def record(self, op, inputs, value, adjoint) -> "Var":
        ids = tuple(v.index for v in inputs)
        if any(i >= len(self.nodes) for i in ids):
            raise ContractError("node inputs must reference earlier nodes")
        factor = _ADJOINT_FAULTS.get(op)
        if factor is not None:
            clean = adjoint

            def adjoint(g, _clean=clean, _f=factor):
                return tuple(None if x is None else _f * x for x in _clean(g))

        self.nodes.append(Node(op, ids, value, adjoint))
        return Var(self, len(self.nodes) - 1)


@dataclass(frozen=True, eq=False)
class Var:
    """Handle to a tape node."""

    tape: Tape
    index: int

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"Var(#{self.index}, {self.tape.nodes[self.index].op}, shape={self.shape})"


# op name -> multiplier applied to its adjoint; used for fault-injection tests
_ADJOINT_FAULTS: dict[str, float] = {}


@contextlib.contextmanager
def inject_adjoint_fault(op: str, factor: float = 1.5) -> Iterator[None]:
    """Scale the recorded adjoint of ``op`` while the context is active."""
    _ADJOINT_FAULTS[op] = factor
    try:
        yield
    finally:
        _ADJOINT_FAULTS.pop(op, None)


def value_of(x) -> np.ndarray:
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ContractError("operands belong to different tapes")
    return tape


def _emit(op, xs, out, adjoint):
    tape = _tape_of(*xs)
    if tape is None:
        return out
    tracked = [x for x in xs if isinstance(x, Var)]
    mask = [isinstance(x, Var) for x in xs]

    def tracked_adjoint(g):
        grads = adjoint(g)
        return tuple(gr for gr, m in zip(grads, mask) if m)

    return tape.record(op, tracked, out, tracked_adjoint)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def seqsum(x: np.ndarray, axis: int) -> np.ndarray:
    """Strict left-to-right sum along ``axis``.

    Appending zeros never changes the result bitwise, unlike pairwise summation.
    """
    if x.shape[axis] == 0:
        return np.zeros(x.shape[:axis] + x.shape[axis + 1:])
    return np.take(np.cumsum(x, axis=axis), -1, axis=axis)


# --------------------------------------------------------------------------
# differentiable ops
# --------------------------------------------------------------------------

def _rowwise_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a @ b with a strict left-to-right reduction per output entry.

    BLAS may round a row differently depending on how many rows share the
    call; this keeps every row a function of that row alone, so padding a
    batch never perturbs the real rows.
    """
    if a.shape[0] * a.shape[1] * b.shape[1] > 2**24:
        out = np.empty((a.shape[0], b.shape[1]))
        step = max(1, 2**24 // (a.shape[1] * b.shape[1]))
        for i in range(0, a.shape[0], step):
            out[i:i + step] = seqsum(a[i:i + step, :, None] * b[None], 1)
        return out
    return seqsum(a[:, :, None] * b[None], 1)


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {av.shape} x {bv.shape}")
    out = _rowwise_matmul(av, bv)
    return _emit("matmul", (a, b), out, lambda g: (g @ bv.T, av.T @ g))


def add(a, b):
    av, bv = value_of(a), value_of(b)
    try:
        out = av + bv
    except ValueError:
        raise DimensionError(f"cannot broadcast {av.shape} with {bv.shape}") from None
    return _emit("add", (a, b), out,
                 lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def add_bias(x, b):
    """x[..., :] + b with b broadcast over leading axes."""
    xv, bv = value_of(x), value_of(b)
    if bv.ndim != 1 or xv.shape[-1:] != bv.shape:
        raise DimensionError(f"bias {bv.shape} does not match {xv.shape}")
    out = xv + bv
    return _emit("add_bias", (x, b), out,
                 lambda g: (g, _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    try:
        out = av - bv
    except ValueError:
        raise DimensionError(f"cannot broadcast {av.shape} with {bv.shape}") from None
    return _emit("sub", (a, b), out,
                 lambda g: (_unbroadcast(g, av.shape), -_unbroadcast(g, bv.shape)))


def mul(a, b):
    """Element-wise product with numpy broadcasting (e.g. an r*r map over channels)."""
    av, bv = value_of(a), value_of(b)
    try:
        out = av * bv
    except ValueError:
        raise DimensionError(f"cannot broadcast {av.shape} with {bv.shape}") from None
    return _emit("mul", (a, b), out,
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(x, c: float):
    xv = value_of(x)
    return _emit("scale", (x,), xv * c, lambda g: (g * c,))


def relu(x):
    xv = value_of(x)
    on = xv > 0
    return _emit("relu", (x,), np.where(on, xv, 0.0), lambda g: (np.where(on, g, 0.0),))


def hinge(x):
    """max(0, x); subgradient 0 at the kink."""
    xv = value_of(x)
    on = xv > 0
    return _emit("hinge", (x,), np.where(on, xv, 0.0), lambda g: (np.where(on, g, 0.0),))


def reshape(x, shape):
    xv = value_of(x)
    old = xv.shape
    try:
        out = xv.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {old} to {shape}") from None
    return _emit("reshape", (x,), out, lambda g: (g.reshape(old),))


def sum_(x, axis: int | None = None):
    xv = value_of(x)
    if axis is None:
        out = np.asarray(seqsum(xv.reshape(-1), 0))

        def adj(g):
            return (np.broadcast_to(g, xv.shape).copy(),)
    else:
        axis = axis % xv.ndim
        out = seqsum(xv, axis)

        def adj(g):
            return (np.broadcast_to(np.expand_dims(g, axis), xv.shape).copy(),)
    return _emit("sum", (x,), out, adj)


def avg_pool(x, axis: int):
    """Mean over ``axis`` (the flattened grid)."""
    xv = value_of(x)
    axis = axis % xv.ndim
    n = xv.shape[axis]
    out = seqsum(xv, axis) / n
    return _emit("avg_pool", (x,), out,
                 lambda g: (np.broadcast_to(np.expand_dims(g / n, axis), xv.shape).copy(),))


def softmax(x, axis: int = -1, mask=None):
    """Max-subtracted softmax; entries where ``mask`` is False get probability 0.

    A slice with every entry masked yields all zeros.
    """
    xv = value_of(x)
    if not -xv.ndim <= axis < xv.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {xv.shape}")
    axis = axis % xv.ndim
    if mask is None:
        keep = np.ones(xv.shape, dtype=bool)
    else:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), xv.shape)
    shifted = np.where(keep, xv, -np.inf)
    mx = np.max(shifted, axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.where(keep, np.exp(np.where(keep, xv, 0.0) - mx), 0.0)
    z = np.expand_dims(seqsum(e, axis), axis)
    out = np.divide(e, z, out=np.zeros_like(e), where=z > 0)

    def adj(g):
        dot = np.expand_dims(seqsum(g * out, axis), axis)
        return (out * (g - dot),)

    return _emit("softmax", (x,), out, adj)


def cosine(u, w, axis: int = -1):
    """Cosine similarity along ``axis`` with norms clamped below at COSINE_EPS."""
    uv, wv = value_of(u), value_of(w)
    if uv.shape != wv.shape:
        raise DimensionError(f"cosine operands differ: {uv.shape} vs {wv.shape}")
    axis = axis % uv.ndim
    nu_raw = np.sqrt(seqsum(uv * uv, axis))
    nw_raw = np.sqrt(seqsum(wv * wv, axis))
    nu = np.maximum(nu_raw, COSINE_EPS)
    nw = np.maximum(nw_raw, COSINE_EPS)
    dot = seqsum(uv * wv, axis)
    out = dot / (nu * nw)

    def adj(g):
        ge = np.expand_dims(g, axis)
        nue, nwe = np.expand_dims(nu, axis), np.expand_dims(nw, axis)
        fe = np.expand_dims(out, axis)
        # the clamp makes the norm constant below eps
        cu = np.expand_dims(nu_raw > COSINE_EPS, axis)
        cw = np.expand_dims(nw_raw > COSINE_EPS, axis)
        gu = wv / (nue * nwe) - np.where(cu, fe * uv / nue ** 2, 0.0)
        gw = uv / (nue * nwe) - np.where(cw, fe * wv / nwe ** 2, 0.0)
        return (ge * gu, ge * gw)

    return _emit("cosine", (u, w), out, adj)


def take(x, index, axis: int = 0):
    """Gather along ``axis`` with an integer index or index array."""
    xv = value_of(x)
    axis = axis % xv.ndim
    idx = np.asarray(index)
    out = np.take(xv, idx, axis=axis)

    def adj(g):
        gx = np.zeros_like(xv)
        moved = np.moveaxis(gx, axis, 0)
        gm = np.moveaxis(g, axis, 0) if idx.ndim else g
        np.add.at(moved, idx, gm)
        return (gx,)

    return _emit("take", (x,), out, adj)


def stack(xs: Sequence, axis: int = 0):
    vals = [value_of(x) for x in xs]
    if len({v.shape for v in vals}) > 1:
        raise DimensionError(f"stack needs equal shapes, got {[v.shape for v in vals]}")
    out = np.stack(vals, axis=axis)
    ax = axis % out.ndim
    return _emit("stack", tuple(xs), out,
                 lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(vals))))


def combine(weights: Sequence, xs: Sequence):
    """Weighted sum sum_i w_i * x_i; weights may themselves be tracked scalars."""
    if len(weights) != len(xs) or not xs:
        raise ContractError("combine needs matching non-empty weight and term lists")
    total = None
    for w, x in zip(weights, xs):
        term = mul(w, x)
        total = term if total is None else add(total, term)
    return total


# --------------------------------------------------------------------------
# reverse sweep
# --------------------------------------------------------------------------

class Gradients(dict):
    """Map from node index to gradient; ``grads[var]`` also works."""

    def __getitem__(self, key):
        if isinstance(key, Var):
            key = key.index
        return super().__getitem__(key)

    def __contains__(self, key):
        if isinstance(key, Var):
            key = key.index
        return super().__contains__(key)


def backward(tape: Tape, seed: Var) -> Gradients:
    """Gradients of the scalar ``seed`` with respect to every leaf on ``tape``.

    Leaves that the seed does not depend on receive an exact zero tensor.
    """
    if seed.tape is not tape:
        raise ContractError("seed does not belong to this tape")
    if seed.value.size != 1:
        raise ContractError(f"seed must be a scalar, got shape {seed.value.shape}")
    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[seed.index] = np.ones_like(seed.value)
    for i in range(seed.index, -1, -1):
        g = grads[i]
        node = tape.nodes[i]
        if g is None or node.adjoint is None:
            continue
        for j, gj in zip(node.inputs, node.adjoint(g)):
            if gj is None:
                continue
            gj = np.asarray(gj, dtype=np.float64).reshape(tape.nodes[j].value.shape)
            grads[j] = gj if grads[j] is None else grads[j] + gj
    out = Gradients()
    for i, node in enumerate(tape.nodes):
        if not node.inputs and node.adjoint is None:
            g = grads[i]
            out[i] = np.zeros_like(node.value) if g is None else g
    return out


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(max|a|, max|n|, floor)."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    if a.size == 0:
        return 0.0
    denom = max(np.max(np.abs(a)), np.max(np.abs(n)), floor)
    return float(np.max(np.abs(a - n)) / denom)
