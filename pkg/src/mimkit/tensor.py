"""Dense tensors with reverse-mode automatic differentiation on an explicit tape.

The execution model is single-threaded: one tape is active at a time, every
operation that touches a ``requires_grad`` tensor while a tape is active is
appended to that tape, and ``backward`` replays the tape once in reverse.
Tensor data buffers are never mutated after construction, so tensors can be
shared freely between tapes and by read-only consumers.

Broadcasting is deliberately restricted: a smaller operand may only broadcast
through leading axes of extent 1 (so ``(1, d)`` against ``(n, d)`` is fine,
``(n, 1)`` against ``(n, d)`` is not).
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import (
    EmptyReduction,
    GradientCheckFailed,
    NonScalarLoss,
    ShapeMismatch,
)

DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Debug builds re-check every forward result for NaN/Inf.
_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf checking after every forward operation."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class Tensor:
    """A dense numeric array, optionally participating in gradient taping.

    ``node_id``/``tape_id`` locate the tensor on the tape that recorded it;
    they are managed by the tape machinery and are meaningless across tapes.
    """

    __slots__ = ("data", "requires_grad", "node_id", "_tape_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self._tape_id: int = -1

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise NonScalarLoss(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar; everything routes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)


class Tape:
    """Append-only record of operations, topologically ordered by construction.

    Usage::

        tape = Tape()
        with tape:
            loss = ...            # ops on requires_grad tensors are recorded
        grads = backward(tape, loss)

    A tape is consumed by ``backward`` and cannot be reused.
    """

    _next_id = 0

    def __init__(self):
        Tape._next_id += 1
        self.id = Tape._next_id
        # each node: tuple of (input_node_id, grad_fn) pairs; leaves store ()
        self.nodes: list[tuple] = []
        self._leaves: list[Tensor] = []
        self._consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def watch(self, tensor: Tensor) -> int:
        """Register a leaf tensor; returns its node id on this tape."""
        if tensor._tape_id == self.id and tensor.node_id is not None:
            return tensor.node_id
        nid = len(self.nodes)
        self.nodes.append(())
        tensor.node_id = nid
        tensor._tape_id = self.id
        self._leaves.append(tensor)
        return nid

    def _emit(self, out: Tensor, inputs: tuple) -> None:
        out.node_id = len(self.nodes)
        out._tape_id = self.id
        self.nodes.append(inputs)


_ACTIVE_TAPE: Optional[Tape] = None


def _on_tape(t: Tensor, tape: Tape) -> bool:
    return t._tape_id == tape.id and t.node_id is not None


def _make(out_data: np.ndarray, pairs) -> Tensor:
    """Wrap an op result; record it if a tape is active and any input tracks grads.

    ``pairs`` is a sequence of (input_tensor, grad_fn) for differentiable
    inputs; grad_fn maps the upstream gradient to this input's gradient.
    """
    if _DEBUG_CHECKS and not np.all(np.isfinite(out_data)):
        raise FloatingPointError("non-finite value produced by forward op")
    tape = _ACTIVE_TAPE
    req = False
    for t, _ in pairs:
        if t.requires_grad:
            req = True
            break
    out = Tensor(out_data, requires_grad=req)
    if req and tape is not None:
        recorded = []
        for t, fn in pairs:
            if not t.requires_grad:
                continue
            if not _on_tape(t, tape):
                tape.watch(t)
            recorded.append((t.node_id, fn))
        tape._emit(out, tuple(recorded))
    return out


def backward(tape: Tape, loss: Tensor) -> dict:
    """Accumulate gradients of a scalar loss for every watched leaf.

    Returns a mapping from leaf Tensor (by identity) to its gradient array.
    Leaves that never influenced the loss map to zeros. The tape is consumed.
    """
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss has shape {loss.shape}")
    if tape._consumed:
        raise RuntimeError("tape already consumed by a previous backward pass")
    if not _on_tape(loss, tape):
        raise NonScalarLoss("loss tensor was not recorded on this tape")
    tape._consumed = True

    grads: list = [None] * len(tape.nodes)
    grads[loss.node_id] = np.ones_like(loss.data)
    for nid in range(loss.node_id, -1, -1):
        g = grads[nid]
        if g is None:
            continue
        for in_id, fn in tape.nodes[nid]:
            contrib = fn(g)
            # accumulation is functional (never in place), so views may alias
            grads[in_id] = contrib if grads[in_id] is None else grads[in_id] + contrib
    out = {}
    for leaf in tape._leaves:
        g = grads[leaf.node_id]
        out[leaf] = np.zeros_like(leaf.data) if g is None else g
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers (leading-1 only)
# ---------------------------------------------------------------------------


def _pad(shape: tuple, n: int) -> tuple:
    return (1,) * (n - len(shape)) + shape


def _suffix_of(small: tuple, big: tuple) -> bool:
    for k in range(len(small) + 1):
        if all(d == 1 for d in small[:k]) and small[k:] == big[k:]:
            return True
    return False


def _broadcast_shape(sa: tuple, sb: tuple) -> tuple:
    if sa == sb:
        return sa
    n = max(len(sa), len(sb))
    pa, pb = _pad(sa, n), _pad(sb, n)
    if _suffix_of(pb, pa):
        return pa
    if _suffix_of(pa, pb):
        return pb
    raise ShapeMismatch(f"shapes {sa} and {sb} do not broadcast (leading-1 only)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    for ax, d in enumerate(shape):
        if d == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _coerce(a: Tensor, b) -> tuple[Tensor, Tensor]:
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"dtype mismatch: {a.data.dtype} vs {b.data.dtype}")
    _broadcast_shape(a.shape, b.shape)
    return a, b


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, ((a, lambda g: _unbroadcast(g, sa)),
                                   (b, lambda g: _unbroadcast(g, sb))))


def sub(a: Tensor, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, ((a, lambda g: _unbroadcast(g, sa)),
                                   (b, lambda g: _unbroadcast(-g, sb))))


def mul(a: Tensor, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape
    da, db = a.data, b.data
    return _make(da * db, ((a, lambda g: _unbroadcast(g * db, sa)),
                           (b, lambda g: _unbroadcast(g * da, sb))))


def div(a: Tensor, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape
    da, db = a.data, b.data
    return _make(da / db, ((a, lambda g: _unbroadcast(g / db, sa)),
                           (b, lambda g: _unbroadcast(-g * da / (db * db), sb))))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, ((a, lambda g: g * c),))


def gelu(a: Tensor) -> Tensor:
    """GELU in the exact-erf form: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    x = a.data
    inner = erf(x * _INV_SQRT2)
    out = 0.5 * x * (1.0 + inner)

    def grad(g):
        return g * (0.5 * (1.0 + inner) + x * _INV_SQRT2PI * np.exp(-0.5 * x * x))

    return _make(out, ((a, grad),))


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    return _make(y, ((a, lambda g: g / (2.0 * y)),))


def absolute(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.abs(x), ((a, lambda g: g * np.sign(x)),))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), ((a, lambda g: g / x),))


def huber(a: Tensor, beta: float) -> Tensor:
    """Elementwise smooth-l1 of a residual: quadratic inside [-beta, beta], linear outside."""
    x = a.data
    absx = np.abs(x)
    out = np.where(absx < beta, 0.5 * x * x / beta, absx - 0.5 * beta)

    def grad(g):
        return g * np.clip(x / beta, -1.0, 1.0)

    return _make(out.astype(x.dtype, copy=False), ((a, grad),))


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    da, db = a.data, b.data
    if da.ndim != 2 or db.ndim != 2 or da.shape[1] != db.shape[0]:
        raise ShapeMismatch(f"matmul of {a.shape} by {b.shape}")
    if da.dtype != db.dtype:
        raise TypeError(f"dtype mismatch: {da.dtype} vs {db.dtype}")
    return _make(da @ db, ((a, lambda g: g @ db.T),
                           (b, lambda g: da.T @ g)))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeMismatch(f"transpose expects a matrix, got {a.shape}")
    return _make(np.ascontiguousarray(a.data.T), ((a, lambda g: np.ascontiguousarray(g.T)),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    out = a.data.reshape(shape)
    return _make(out, ((a, lambda g: g.reshape(old)),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeMismatch("concat of an empty sequence")
    data = [t.data for t in tensors]
    out = np.concatenate(data, axis=axis)
    offsets = np.cumsum([0] + [d.shape[axis] for d in data])
    pairs = []
    for i, t in enumerate(tensors):
        lo, hi = offsets[i], offsets[i + 1]

        def grad(g, lo=lo, hi=hi):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]

        pairs.append((t, grad))
    return _make(out, tuple(pairs))


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    src = a.data

    def grad(g):
        z = np.zeros_like(src)
        z[idx] = g
        return z

    return _make(np.ascontiguousarray(src[idx]), ((a, grad),))


def gather_rows(a: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)
    src = a.data

    def grad(g):
        z = np.zeros_like(src)
        np.add.at(z, idx, g)
        return z

    return _make(src[idx], ((a, grad),))


# ---------------------------------------------------------------------------
# normalizing / reducing ops
# ---------------------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(y, ((a, lambda g: y * (g - (g * y).sum(axis=axis, keepdims=True))),))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def grad(g):
        return g - np.exp(out) * g.sum(axis=axis, keepdims=True)

    return _make(out, ((a, grad),))


def layer_norm(a: Tensor, axis: int = -1, eps: float = 1e-6,
               gamma: Optional[Tensor] = None, beta: Optional[Tensor] = None) -> Tensor:
    """Standardize each slice along ``axis`` to zero mean, unit (biased) variance.

    Without ``gamma``/``beta`` this is the affine-free layer norm; a constant
    slice maps to zeros. Affine parameters, when given, are 1-d of the slice
    length.
    """
    x = a.data
    n = x.shape[axis]
    if n < 1:
        raise EmptyReduction("layer_norm over an empty axis")
    mu = x.mean(axis=axis, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv

    bshape = [1] * x.ndim
    bshape[axis] = n

    def grad_x(dxhat):
        m1 = dxhat.mean(axis=axis, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=axis, keepdims=True)
        return inv * (dxhat - m1 - xhat * m2)

    if gamma is None:
        return _make(xhat.astype(x.dtype, copy=False), ((a, grad_x),))

    gdat = gamma.data.reshape(bshape)
    out = xhat * gdat
    if beta is not None:
        out = out + beta.data.reshape(bshape)
    reduce_axes = tuple(i for i in range(x.ndim) if i != axis % x.ndim)
    pairs = [
        (a, lambda g: grad_x(g * gdat)),
        (gamma, lambda g: (g * xhat).sum(axis=reduce_axes).reshape(gamma.shape)),
    ]
    if beta is not None:
        pairs.append((beta, lambda g: g.sum(axis=reduce_axes).reshape(beta.shape)))
    return _make(out.astype(x.dtype, copy=False), tuple(pairs))


def _check_reduction(x: np.ndarray, axis) -> None:
    if axis is None:
        if x.size == 0:
            raise EmptyReduction("reduction over an empty tensor")
    else:
        if x.shape[axis] == 0:
            raise EmptyReduction(f"reduction over zero-extent axis {axis}")


def reduce_sum(a: Tensor, axis=None) -> Tensor:
    x = a.data
    _check_reduction(x, axis)
    shape = x.shape

    if axis is None:
        return _make(np.asarray(x.sum(), dtype=x.dtype),
                     ((a, lambda g: np.broadcast_to(g, shape).copy()),))

    def grad(g):
        return np.broadcast_to(np.expand_dims(g, axis), shape).copy()

    return _make(x.sum(axis=axis), ((a, grad),))


def reduce_mean(a: Tensor, axis=None) -> Tensor:
    x = a.data
    _check_reduction(x, axis)
    shape = x.shape
    n = x.size if axis is None else x.shape[axis]

    if axis is None:
        return _make(np.asarray(x.mean(), dtype=x.dtype),
                     ((a, lambda g: np.full(shape, 1.0 / n, dtype=x.dtype) * g),))

    def grad(g):
        return np.broadcast_to(np.expand_dims(g, axis), shape) * np.asarray(1.0 / n, dtype=x.dtype)

    return _make(x.mean(axis=axis), ((a, grad),))


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
               tol: Optional[float] = None) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` must be scalar-valued. Evaluations run in float64 regardless of the
    input dtype. When ``tol`` is given, an error above it raises
    GradientCheckFailed.
    """
    x0 = np.asarray(x.data, dtype=np.float64)
    leaf = Tensor(x0, requires_grad=True)
    tape = Tape()
    with tape:
        loss = f(leaf)
    if loss.data.size != 1:
        raise NonScalarLoss("grad_check requires a scalar-valued function")
    analytic = backward(tape, loss).get(leaf)
    if analytic is None:
        analytic = np.zeros_like(x0)

    numeric = np.empty_like(x0).reshape(-1)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = h
        fp = f(Tensor((flat + bump).reshape(x0.shape))).item()
        fm = f(Tensor((flat - bump).reshape(x0.shape))).item()
        numeric[i] = (fp - fm) / (2.0 * h)
    numeric = numeric.reshape(x0.shape)

    rel = np.abs(numeric - analytic) / (np.abs(analytic) + 1e-8)
    err = float(rel.max()) if rel.size else 0.0
    if tol is not None and err > tol:
        raise GradientCheckFailed(f"gradient check error {err:.3e} exceeds tol {tol:.1e}")
    return err


def gradcheck_suite(seed: int = 0, h: float = 1e-5) -> list[tuple[str, float]]:
    """Randomized finite-difference check for every registered op.

    Returns (name, max relative error) per op, all evaluated in float64.
    """
    rng = np.random.default_rng(seed)

    def t(*shape):
        return Tensor(rng.standard_normal(shape))

    def proj(shape):
        c = Tensor(rng.standard_normal(shape))
        return lambda y: reduce_sum(mul(y, c))

    a34, b34 = t(3, 4), t(3, 4)
    row = Tensor(rng.standard_normal((1, 4)))
    m45 = t(4, 5)
    half = Tensor(np.full((3, 4), 0.5))
    third = Tensor(np.full((3, 4), 0.3))
    ones34 = Tensor(np.ones((3, 4)))
    three = Tensor(np.full((3, 4), 3.0))
    idx = np.array([2, 0, 2])

    p34 = proj((3, 4))
    p35 = proj((3, 5))
    p43 = proj((4, 3))
    p26 = proj((2, 6))
    p64 = proj((6, 4))
    p32 = proj((3, 2))
    p4 = proj((4,))
    p3 = proj((3,))

    checks: list[tuple[str, Callable[[Tensor], Tensor]]] = [
        ("add", lambda x: p34(add(x, b34))),
        ("add_broadcast", lambda x: p34(add(x, row))),
        ("sub", lambda x: p34(sub(b34, x))),
        ("mul", lambda x: p34(mul(x, b34))),
        ("mul_broadcast", lambda x: p34(mul(x, row))),
        ("div", lambda x: p34(div(b34, add(mul(x, x), half)))),
        ("scale", lambda x: p34(scale(x, -2.5))),
        ("gelu", lambda x: p34(gelu(x))),
        ("sqrt", lambda x: p34(sqrt(add(mul(x, x), third)))),
        ("absolute", lambda x: p34(absolute(add(x, three)))),
        ("log", lambda x: p34(log(add(mul(x, x), ones34)))),
        ("huber", lambda x: p34(huber(x, 1.0))),
        ("matmul", lambda x: p35(matmul(x, m45))),
        ("transpose", lambda x: p43(transpose(x))),
        ("reshape", lambda x: p26(reshape(x, (2, 6)))),
        ("concat", lambda x: p64(concat([x, b34], axis=0))),
        ("slice_axis", lambda x: p32(slice_axis(x, 1, 1, 3))),
        ("gather_rows", lambda x: p34(gather_rows(x, idx))),
        ("softmax", lambda x: p34(softmax(x, axis=-1))),
        ("log_softmax", lambda x: p34(log_softmax(x, axis=-1))),
        ("layer_norm", lambda x: p34(layer_norm(x, axis=-1))),
        ("reduce_sum_axis", lambda x: p4(reduce_sum(x, axis=0))),
        ("reduce_mean_axis", lambda x: p3(reduce_mean(x, axis=1))),
        ("reduce_mean_all", lambda x: reduce_mean(x)),
    ]

    gamma = Tensor(rng.standard_normal(4) + 1.0)
    beta = Tensor(rng.standard_normal(4))
    checks.append(("layer_norm_affine", lambda x: p34(layer_norm(x, axis=-1, gamma=gamma, beta=beta))))

    wq, wk, wv = t(4, 4), t(4, 4), t(4, 4)

    def attention_block(x: Tensor) -> Tensor:
        q, k, v = matmul(x, wq), matmul(x, wk), matmul(x, wv)
        att = softmax(scale(matmul(q, transpose(k)), 0.5), axis=-1)
        return p34(matmul(att, v))

    checks.append(("softmax_attention", attention_block))

    results = []
    for name, fn in checks:
        results.append((name, grad_check(fn, a34, h=h)))
    results.append(("grad_linear", grad_check(lambda x: reduce_sum(x), t(5), h=h)))
    return results
