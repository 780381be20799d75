"""Minimal dense-tensor kernel with reverse-mode gradient accumulation.

Tensors are float32 numpy arrays. Operations executed while a
ComputationRecord is active are appended to it in execution order;
``backward`` replays the record in exact reverse order and accumulates
gradients into every tensor that needs them. Without an active record the
same functions run eagerly with no memory overhead (inference mode).

Determinism: all reductions go through numpy's sequential CPU kernels with
a fixed accumulation order, so forward results are bit-identical across
runs for identical inputs.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DTYPE = np.float32


class NumericsError(Exception):
    pass


class NotScalar(NumericsError):
    pass


class ZeroRow(NumericsError):
    pass


class NonFinite(NumericsError):
    pass


class ShapeMismatch(NumericsError):
    pass


_state = threading.local()

# Optional forward-pass finiteness assertion (off by default; enabled in tests).
_CHECK_FINITE = False


def set_finite_checks(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def _as_array(values) -> np.ndarray:
    arr = np.asarray(values, dtype=DTYPE)
    return arr


class DiffTensor:
    """Shape + f32 values + lazily allocated gradient of the same shape."""

    __slots__ = ("values", "grad", "requires_grad", "producer", "name")

    def __init__(self, values, requires_grad: bool = False, name: Optional[str] = None):
        self.values = _as_array(values)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.producer: Optional["TapeNode"] = None
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        return self.grad

    def item(self) -> float:
        if self.values.size != 1:
            raise NotScalar(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"DiffTensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad}{tag})"

    # Operator sugar; everything routes through the recorded op functions.
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __neg__(self):
        return scale(self, -1.0)


def _lift(x) -> DiffTensor:
    if isinstance(x, DiffTensor):
        return x
    return DiffTensor(x)


def constant(values, name: Optional[str] = None) -> DiffTensor:
    return DiffTensor(values, requires_grad=False, name=name)


def leaf(values, requires_grad: bool = True, name: Optional[str] = None) -> DiffTensor:
    return DiffTensor(values, requires_grad=requires_grad, name=name)


class TapeNode:
    __slots__ = ("op", "inputs", "out", "backward_fn")

    def __init__(self, op: str, inputs: Sequence[DiffTensor], out: DiffTensor,
                 backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.op = op
        self.inputs = tuple(inputs)
        self.out = out
        self.backward_fn = backward_fn


class ComputationRecord:
    """Ordered list of executed ops; topological order equals execution order.

    Used as a context manager. Only one record can be active per thread; a
    single record must not be shared across threads (disjoint records are
    safe to build and replay concurrently).
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "ComputationRecord":
        if getattr(_state, "record", None) is not None:
            raise NumericsError("a ComputationRecord is already active on this thread")
        _state.record = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.record = None
        return False

    def __len__(self) -> int:
        return len(self.nodes)


def active_record() -> Optional[ComputationRecord]:
    return getattr(_state, "record", None)


def _emit(op: str, out_values: np.ndarray, inputs: Sequence[DiffTensor],
          backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> DiffTensor:
    if _CHECK_FINITE and not np.all(np.isfinite(out_values)):
        raise NonFinite(f"non-finite values produced by op {op!r}")
    out = DiffTensor(out_values)
    rec = active_record()
    if rec is not None:
        node = TapeNode(op, inputs, out, backward_fn)
        out.producer = node
        rec.nodes.append(node)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.astype(DTYPE, copy=False)


# ---------------------------------------------------------------------------
# elementary ops
# ---------------------------------------------------------------------------

def add(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    out = a.values + b.values

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", out, (a, b), bwd)


def sub(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    out = a.values - b.values

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", out, (a, b), bwd)


def mul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    out = a.values * b.values
    av, bv = a.values, b.values

    def bwd(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)

    return _emit("mul", out, (a, b), bwd)


def scale(a: DiffTensor, c: float) -> DiffTensor:
    c = float(c)
    out = a.values * DTYPE(c)

    def bwd(g):
        return (g * DTYPE(c),)

    return _emit("scale", out, (a,), bwd)


def reciprocal(a: DiffTensor) -> DiffTensor:
    out = 1.0 / a.values
    out = out.astype(DTYPE, copy=False)

    def bwd(g):
        return ((-g * out * out).astype(DTYPE, copy=False),)

    return _emit("reciprocal", out, (a,), bwd)


def clamp_max(a: DiffTensor, cap: float) -> DiffTensor:
    cap = DTYPE(cap)
    out = np.minimum(a.values, cap)
    passthrough = a.values <= cap

    def bwd(g):
        return (g * passthrough,)

    return _emit("clamp_max", out, (a,), bwd)


def matmul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("matmul requires tensors of rank >= 2")
    out = np.matmul(a.values, b.values)
    av, bv = a.values, b.values

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("matmul", out, (a, b), bwd)


def transpose(a: DiffTensor, axes: Optional[Sequence[int]] = None) -> DiffTensor:
    out = np.transpose(a.values, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inv),)

    return _emit("transpose", out, (a,), bwd)


def reshape(a: DiffTensor, shape) -> DiffTensor:
    orig = a.shape
    out = a.values.reshape(shape)

    def bwd(g):
        return (g.reshape(orig),)

    return _emit("reshape", out, (a,), bwd)


def broadcast_to(a: DiffTensor, shape) -> DiffTensor:
    out = np.broadcast_to(a.values, shape).copy()

    def bwd(g):
        return (_unbroadcast(g, a.shape),)

    return _emit("broadcast_to", out, (a,), bwd)


def concat(parts: Sequence[DiffTensor], axis: int = 0) -> DiffTensor:
    parts = list(parts)
    out = np.concatenate([p.values for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(parts))
        )

    return _emit("concat", out, parts, bwd)


def gather_rows(table: DiffTensor, ids: np.ndarray) -> DiffTensor:
    """Embedding lookup: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids)
    out = table.values[ids]
    nrows, width = table.shape

    def bwd(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, width))
        return (gt,)

    return _emit("gather_rows", out, (table,), bwd)


def take_per_row(a: DiffTensor, idx: np.ndarray) -> DiffTensor:
    """Select one position along axis 1 per batch row: out[b] = a[b, idx[b]]."""
    idx = np.asarray(idx)
    n = a.shape[0]
    rows = np.arange(n)
    out = a.values[rows, idx]

    def bwd(g):
        ga = np.zeros_like(a.values)
        np.add.at(ga, (rows, idx), g)
        return (ga,)

    return _emit("take_per_row", out, (a,), bwd)


def exp(a: DiffTensor) -> DiffTensor:
    out = np.exp(a.values)

    def bwd(g):
        return (g * out,)

    return _emit("exp", out, (a,), bwd)


def log(a: DiffTensor) -> DiffTensor:
    out = np.log(a.values)
    av = a.values

    def bwd(g):
        return (g / av,)

    return _emit("log", out, (a,), bwd)


def sigmoid(a: DiffTensor) -> DiffTensor:
    x = a.values
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _emit("sigmoid", out, (a,), bwd)


def log_sigmoid(a: DiffTensor) -> DiffTensor:
    """log(sigmoid(x)) in the overflow-safe -softplus(-x) form."""
    x = a.values
    out = np.where(x >= 0, -np.log1p(np.exp(-np.abs(x))), x - np.log1p(np.exp(-np.abs(x))))
    out = out.astype(DTYPE, copy=False)
    sig = np.empty_like(x)
    pos = x >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    sig[~pos] = ex / (1.0 + ex)

    def bwd(g):
        return (g * (1.0 - sig),)

    return _emit("log_sigmoid", out, (a,), bwd)


def relu(a: DiffTensor) -> DiffTensor:
    out = np.maximum(a.values, 0)
    mask = a.values > 0

    def bwd(g):
        return (g * mask,)

    return _emit("relu", out, (a,), bwd)


def softmax_lastaxis(a: DiffTensor) -> DiffTensor:
    x = a.values
    shifted = x - x.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - dot) * out,)

    return _emit("softmax_lastaxis", out, (a,), bwd)


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def sum(a: DiffTensor, axis=None, keepdims: bool = False) -> DiffTensor:  # noqa: A001
    axes = _axis_tuple(axis, a.ndim)
    out = a.values.sum(axis=axes, keepdims=keepdims)
    in_shape = a.shape

    def bwd(g):
        if not keepdims:
            expand = list(g.shape)
            for ax in sorted(axes):
                expand.insert(ax, 1)
            g = g.reshape(expand)
        return (np.broadcast_to(g, in_shape).astype(DTYPE, copy=False),)

    return _emit("sum", out, (a,), bwd)


def mean(a: DiffTensor, axis=None, keepdims: bool = False) -> DiffTensor:
    axes = _axis_tuple(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = a.values.mean(axis=axes, keepdims=keepdims, dtype=DTYPE)
    in_shape = a.shape

    def bwd(g):
        if not keepdims:
            expand = list(g.shape)
            for ax in sorted(axes):
                expand.insert(ax, 1)
            g = g.reshape(expand)
        return ((np.broadcast_to(g, in_shape) / DTYPE(count)).astype(DTYPE, copy=False),)

    return _emit("mean", out, (a,), bwd)


def layer_norm(a: DiffTensor, eps: float = 1e-5) -> DiffTensor:
    """Normalize over the last axis to zero mean / unit variance (no affine)."""
    x = a.values
    mu = x.mean(axis=-1, keepdims=True, dtype=DTYPE)
    d = x - mu
    var = (d * d).mean(axis=-1, keepdims=True, dtype=DTYPE)
    inv_std = 1.0 / np.sqrt(var + DTYPE(eps))
    out = (d * inv_std).astype(DTYPE, copy=False)

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True, dtype=DTYPE)
        gym = (g * out).mean(axis=-1, keepdims=True, dtype=DTYPE)
        return ((inv_std * (g - gm - out * gym)).astype(DTYPE, copy=False),)

    return _emit("layer_norm", out, (a,), bwd)


L2_NORM_FLOOR = 1e-12


def l2_normalize_rows(a: DiffTensor) -> DiffTensor:
    """Scale each row of an n x d matrix to unit Euclidean norm."""
    if a.ndim != 2:
        raise ShapeMismatch(f"l2_normalize_rows expects a matrix, got shape {a.shape}")
    x = a.values
    norms = np.sqrt((x.astype(np.float64) ** 2).sum(axis=1, keepdims=True))
    if np.any(norms <= L2_NORM_FLOOR):
        raise ZeroRow("row norm at or below 1e-12 in l2_normalize_rows")
    norms = norms.astype(DTYPE)
    out = x / norms

    def bwd(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (((g - out * dot) / norms).astype(DTYPE, copy=False),)

    return _emit("l2_normalize_rows", out, (a,), bwd)


# ---------------------------------------------------------------------------
# backward pass and gradient checking
# ---------------------------------------------------------------------------

def backward(record: ComputationRecord, loss: DiffTensor) -> None:
    """Accumulate dLoss/dLeaf into every requires_grad leaf of the record.

    Each call adds one copy of the gradient to the leaves; intermediate
    adjoints live in per-call scratch space, so repeated calls accumulate
    cleanly until grads are cleared explicitly.
    """
    if loss.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    scratch: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(record.nodes):
        out_grad = scratch.pop(id(node.out), None)
        if out_grad is None:
            continue
        grads = node.backward_fn(out_grad)
        for inp, g in zip(node.inputs, grads):
            if g is None:
                continue
            if inp.producer is not None:
                key = id(inp)
                if key in scratch:
                    scratch[key] = scratch[key] + g
                else:
                    scratch[key] = g
            elif inp.requires_grad:
                inp.ensure_grad()
                inp.grad += g
    if loss.producer is None and loss.requires_grad:
        loss.ensure_grad()
        loss.grad += np.ones_like(loss.values)


def zero_grads(params: Iterable[DiffTensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(f: Callable[[Sequence[DiffTensor]], DiffTensor],
               params: Sequence[DiffTensor],
               step: float = 1e-3,
               max_coords_per_param: Optional[int] = None,
               seed: int = 0) -> float:
    """Compare analytic gradients of ``f(params)`` against central differences.

    Returns the max over probed coordinates of
    ``|analytic - central| / max(1, |analytic|, |central|)``.

    ``max_coords_per_param`` caps the probed coordinates per tensor (seeded
    random subset); the default probes every coordinate, which is only
    practical for small parameter sets.
    """
    params = list(params)
    zero_grads(params)
    with ComputationRecord() as rec:
        out = f(params)
    if out.size != 1:
        raise NotScalar("grad_check target must return a scalar")
    if not np.isfinite(out.values).all():
        raise NonFinite("objective is non-finite at the base point")
    backward(rec, out)
    analytic = [None if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, an in zip(params, analytic):
        if not p.requires_grad:
            continue
        an = np.zeros_like(p.values) if an is None else an
        flat = p.values.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = range(n)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + DTYPE(step)
            hi = f(params)
            flat[i] = orig - DTYPE(step)
            lo = f(params)
            flat[i] = orig
            if not (np.isfinite(hi.values).all() and np.isfinite(lo.values).all()):
                raise NonFinite("objective is non-finite at a probe point")
            central = (float(hi.values) - float(lo.values)) / (2.0 * step)
            a = float(an.reshape(-1)[i])
            err = abs(a - central) / max(1.0, abs(a), abs(central))
            if err > worst:
                worst = err
    return worst
