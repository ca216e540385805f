"""Tape-based reverse-mode differentiation over dense float64 arrays.

Every primitive is a plain function taking :class:`Tensor` operands. When a
:class:`Tape` is active (``with Tape() as tape:``) and at least one operand
requires a gradient, the primitive appends a record holding its operands,
its result and a closure computing the vector-Jacobian product. ``backward``
walks the records once in reverse.

Shapes never broadcast implicitly; use :func:`broadcast`.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from mcgcn import kernels


class ShapeError(ValueError):
    """Operand shapes do not conform to the primitive's rule."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf from its operands."""

    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: non-finite value in forward result")


class Tensor:
    """Immutable dense float64 array with an optional gradient requirement."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar over the primitives
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def variable(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class _Record:
    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op, inputs, output, vjp):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


_state = threading.local()


def active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered log of primitive applications for one forward pass.

    Tapes are thread-local: entering a tape on one thread does not affect
    recording on another.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.leaves: list[Tensor] = []
        self._leaf_ids: set[int] = set()
        self._produced: dict[int, int] = {}

    def __enter__(self) -> "Tape":
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def watch(self, *tensors: Tensor) -> None:
        """Register leaves so ``backward`` reports them even when unused."""
        for t in tensors:
            if not t.requires_grad:
                raise ValueError("only tensors with requires_grad=True can be watched")
            self._add_leaf(t)

    def _add_leaf(self, t: Tensor) -> None:
        if id(t) not in self._leaf_ids and id(t) not in self._produced:
            self._leaf_ids.add(id(t))
            self.leaves.append(t)

    def _record(self, op, inputs, output, vjp):
        for t in inputs:
            if t.requires_grad and id(t) not in self._produced:
                self._add_leaf(t)
        self._produced[id(output)] = len(self.records)
        self.records.append(_Record(op, inputs, output, vjp))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced


class DisconnectedError(ValueError):
    """A requested leaf does not feed the loss."""


def backward(tape: Tape, loss: Tensor, wrt: Iterable[Tensor] | None = None, strict: bool = False) -> dict:
    """Gradients of scalar ``loss`` with respect to the tape's leaves.

    Returns a dict keyed by leaf tensor. Leaves that do not influence the
    loss get zero arrays, or raise :class:`DisconnectedError` when ``strict``.
    With ``wrt`` only those leaves are returned. The tape is left intact so
    several losses can be swept on it.
    """
    if loss.data.ndim != 0:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not tape.produced(loss):
        raise ValueError("backward: loss was not produced on this tape")
    end = tape._produced[id(loss)]
    start = 0
    if wrt is not None:
        wrt = list(wrt)
        # records before the first consumer of a requested leaf cannot matter
        wanted = {id(t) for t in wrt}
        start = next(
            (i for i, rec in enumerate(tape.records) if any(id(t) in wanted for t in rec.inputs)),
            end + 1,
        )
    adj: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for rec in reversed(tape.records[start : end + 1]):
        g = adj.pop(id(rec.output), None)
        if g is None:
            continue
        grads = rec.vjp(g)
        for t, gi in zip(rec.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            prev = adj.get(key)
            adj[key] = gi if prev is None else prev + gi
    targets = tape.leaves if wrt is None else wrt
    out = {}
    for leaf in targets:
        g = adj.get(id(leaf))
        if g is None and strict:
            raise DisconnectedError(f"leaf {leaf.name or leaf.shape} does not contribute to the loss")
        out[leaf] = np.zeros(leaf.shape) if g is None else np.asarray(g, dtype=np.float64).reshape(leaf.shape)
    return out


# ---------------------------------------------------------------------------
# primitive plumbing


def _finish(op: str, arr: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(op)
    needs = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, needs)
    tape = active_tape()
    if needs and tape is not None:
        tape._record(op, tuple(inputs), out, vjp)
    return out


def _same_shape(op, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, d in enumerate(shape):
        if d == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _finish("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _finish("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _finish("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd
    return _finish("div", out, (a, b), lambda g: (g / bd, -g * out / bd))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _finish("scalar_mul", a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _finish("add_scalar", a.data + c, (a,), lambda g: (g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _finish("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _finish("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _finish("log", out, (a,), lambda g: (g / ad,))


def guarded_reciprocal(a: Tensor, tol: float = 1e-12) -> Tensor:
    """1/a where |a| >= tol, else 0 (with zero gradient there)."""
    ad = a.data
    ok = np.abs(ad) >= tol
    safe = np.where(ok, ad, 1.0)
    out = np.where(ok, 1.0 / safe, 0.0)
    return _finish("guarded_reciprocal", out, (a,), lambda g: (np.where(ok, -g * out * out, 0.0),))


# ---------------------------------------------------------------------------
# shape and reduction


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def vjp(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return _finish("matmul", ad @ bd, (a, b), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, shape) from None
    return _finish("reshape", out.copy(), (a,), lambda g: (g.reshape(src),))


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    """Sum over one axis (dropping it), or over everything when axis is None."""
    src = a.shape
    if axis is None:
        out = np.asarray(a.data.sum())
        return _finish("sum", out, (a,), lambda g: (np.broadcast_to(g, src).copy(),))
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError("sum", src, (axis,))
    out = a.data.sum(axis=axis)

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return _finish("sum", out, (a,), vjp)


def mean(a: Tensor) -> Tensor:
    return scalar_mul(sum(a), 1.0 / max(a.size, 1))


def broadcast(a: Tensor, shape) -> Tensor:
    """Explicit numpy-rule broadcast of ``a`` to ``shape``."""
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast", src, shape) from None
    return _finish("broadcast", out, (a,), lambda g: (_unbroadcast(g, src),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    arrs = [t.data for t in tensors]
    try:
        out = np.concatenate(arrs, axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    bounds = np.cumsum([x.shape[axis] for x in arrs])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _finish("concat", out, tuple(tensors), vjp)


def l2_norm(a: Tensor) -> Tensor:
    """Row-wise Euclidean norm of an (n, d) tensor, shaped (n, 1).

    The subgradient at a zero row is taken as zero.
    """
    if a.data.ndim != 2:
        raise ShapeError("l2_norm", a.shape)
    ad = a.data
    out = np.sqrt((ad * ad).sum(axis=1, keepdims=True))

    def vjp(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g * ad / safe, 0.0),)

    return _finish("l2_norm", out, (a,), vjp)


def gather_rows(a: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    n = a.shape[0]
    if index.ndim != 1 or (index.size and (index.min() < 0 or index.max() >= n)):
        raise ShapeError("gather_rows", a.shape, index.shape)
    src = a.shape
    out = kernels.gather_rows(a.data, index)
    return _finish("gather_rows", out, (a,), lambda g: (kernels.segment_sum(g, index, src[0]),))


def segment_sum(a: Tensor, segments, num_segments: int) -> Tensor:
    segments = np.asarray(segments, dtype=np.int64)
    if segments.shape != a.shape[:1]:
        raise ShapeError("segment_sum", a.shape, segments.shape)
    if segments.size and (segments.min() < 0 or segments.max() >= num_segments):
        raise ShapeError("segment_sum", a.shape, (num_segments,))
    out = kernels.segment_sum(a.data, segments, num_segments)
    return _finish("segment_sum", out, (a,), lambda g: (kernels.gather_rows(g, segments),))


def segment_softmax_weighted_sum(a: Tensor, segments, num_segments: int, beta: float) -> Tensor:
    """Per segment and channel, sum of softmax(beta * a) * a over the segment's rows.

    Stabilised by per-segment max subtraction. Empty segments give zero rows.
    """
    segments = np.asarray(segments, dtype=np.int64)
    if a.data.ndim != 2 or segments.shape != a.shape[:1]:
        raise ShapeError("segment_softmax_weighted_sum", a.shape, segments.shape)
    if segments.size and (segments.min() < 0 or segments.max() >= num_segments):
        raise ShapeError("segment_softmax_weighted_sum", a.shape, (num_segments,))
    beta = float(beta)
    vals = a.data
    out, weights = kernels.segment_softmax_forward(vals, segments, num_segments, beta)

    def vjp(g):
        return (kernels.segment_softmax_backward(g, vals, weights, out, segments, beta),)

    res = _finish("segment_softmax_weighted_sum", out, (a,), vjp)
    return res


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each row of (n, d) ``a`` to zero mean / unit variance, then affine."""
    if a.data.ndim != 2 or gain.shape != (a.shape[1],) or bias.shape != (a.shape[1],):
        raise ShapeError("layer_norm", a.shape, gain.shape, bias.shape)
    x = a.data
    d = x.shape[1]
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def vjp(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=1, keepdims=True) - xhat * (gx * xhat).sum(axis=1, keepdims=True) / d)
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _finish("layer_norm", out, (a, gain, bias), vjp)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    zs = z - z.max(axis=1, keepdims=True)
    return zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))


def softmax_rows(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("softmax_rows", a.shape)
    p = np.exp(_log_softmax(a.data))

    def vjp(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _finish("softmax_rows", p, (a,), vjp)


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean cross-entropy of row-wise softmax(logits) against ``target``.

    ``target`` is either integer class ids of shape (n,) or a row-stochastic
    (n, k) matrix of soft targets. Targets are never differentiated.
    """
    if logits.data.ndim != 2 or logits.shape[0] == 0:
        raise ShapeError("cross_entropy", logits.shape)
    n, k = logits.shape
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    if target.ndim == 1:
        if target.shape[0] != n:
            raise ShapeError("cross_entropy", logits.shape, target.shape)
        labels = target.astype(np.int64)
        if labels.min() < 0 or labels.max() >= k:
            raise ValueError(f"cross_entropy: label out of range for {k} classes")
        soft = np.zeros((n, k))
        soft[np.arange(n), labels] = 1.0
    else:
        if target.shape != logits.shape:
            raise ShapeError("cross_entropy", logits.shape, target.shape)
        soft = target.astype(np.float64)
    logp = _log_softmax(logits.data)
    out = np.asarray(-(soft * logp).sum() / n)
    p = np.exp(logp)

    def vjp(g):
        return (g * (p * soft.sum(axis=1, keepdims=True) - soft) / n,)

    return _finish("cross_entropy", out, (logits,), vjp)


# convenience compositions


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    if bias is not None:
        y = add(y, broadcast(bias, y.shape))
    return y


OPS = {
    "add": add,
    "sub": sub,
    "elementwise-mul": mul,
    "scalar-mul": scalar_mul,
    "matmul": matmul,
    "relu": relu,
    "exp": exp,
    "log": log,
    "sum-over-axis": sum,
    "broadcast": broadcast,
    "concat": concat,
    "l2-norm": l2_norm,
    "segment-sum": segment_sum,
    "segment-softmax-weighted-sum": segment_softmax_weighted_sum,
    "gather-rows": gather_rows,
    "layer-norm": layer_norm,
    "softmax-rows": softmax_rows,
    "cross-entropy-from-logits": cross_entropy,
}


def forward_primitive(kind: str, *operands, **params) -> Tensor:
    """Apply a primitive by its kind name (see ``OPS``)."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*operands, **params)
