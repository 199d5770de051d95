"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation is evaluated eagerly.  When at least one operand is a
:class:`Var` the result is also recorded on that operand's :class:`Tape`;
when all operands are plain arrays the same function just returns a plain
``numpy.ndarray``.  Backward rules are written with these same dispatching
functions, so a backward sweep can itself be recorded on the tape
(``create_graph=True``).  That is what lets an unrolled inner loop, whose
updates contain ``grad_theta`` terms, be differentiated again with respect
to the hyperparameters.

Tensors are ``numpy.ndarray`` objects of dtype float64.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit

from .errors import ContractViolation, NumericError

__all__ = [
    "Tape",
    "Var",
    "gradient",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "broadcast_to",
    "sum_to",
    "relu",
    "tanh",
    "sigmoid",
    "exp",
    "log_softmax",
    "sum",
    "mean",
    "take",
    "scatter_add",
    "concat",
    "value_of",
]


class Var:
    """A node on a tape: its eagerly computed value plus how it was made."""

    __slots__ = ("tape", "id", "value", "kind", "inputs", "vjp", "aux")

    def __init__(self, tape, id, value, kind, inputs, vjp, aux):
        self.tape = tape
        self.id = id
        self.value = value
        self.kind = kind
        self.inputs = inputs
        self.vjp = vjp
        self.aux = aux

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Var(id={self.id}, kind={self.kind!r}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(other, self)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise ContractViolation("Var only supports division by a scalar")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Append-only list of recorded operations.

    A tape is not thread-safe; give each thread its own.
    """

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value):
        """Record an input tensor (a differentiable variable)."""
        value = np.array(value, dtype=np.float64)
        return self._push("leaf", (), value, None)

    def record(self, kind, inputs, payload=()):
        """Record ``kind`` applied to ``inputs`` followed by constant ``payload`` args."""
        try:
            op = OPS[kind]
        except KeyError:
            raise ContractViolation(f"unknown op kind {kind!r}") from None
        for v in inputs:
            if not isinstance(v, Var) or v.tape is not self:
                raise ContractViolation(f"{kind}: inputs must be Vars on this tape")
        if not isinstance(payload, (tuple, list)):
            payload = (payload,)
        return op(*inputs, *payload)

    def _push(self, kind, inputs, value, vjp, aux=None):
        id = len(self.nodes)
        for p in inputs:
            if p.__class__ is Var and p.id >= id:
                raise ContractViolation(f"{kind}: input {p.id} does not precede node {id}")
        # a finite sum implies finite entries; only fall back on overflow
        if not math.isfinite(value.sum()) and not np.isfinite(value).all():
            raise NumericError(f"non-finite value produced by {kind} at node {id}", node=id)
        var = Var(self, id, value, kind, inputs, vjp, aux)
        self.nodes.append(var)
        return var


def value_of(x):
    """Return the numeric value of a Var, or ``x`` itself as an array."""
    return x.value if x.__class__ is Var else x


def _shape(x):
    return x.value.shape if x.__class__ is Var else np.shape(x)


def _tape_of(*args):
    tape = None
    for a in args:
        if a.__class__ is Var:
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ContractViolation("operands belong to different tapes")
    return tape


def _as_array(x):
    if x.__class__ is Var:
        return x.value
    if x.__class__ is np.ndarray and x.dtype == np.float64:
        return x
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------- elementwise


def _add_vjp(g, inputs, out, needs, aux):
    a, b = inputs
    return (
        sum_to(g, _shape(a)) if needs[0] else None,
        sum_to(g, _shape(b)) if needs[1] else None,
    )


def add(a, b):
    tape = _tape_of(a, b)
    va, vb = _as_array(a), _as_array(b)
    try:
        out = va + vb
    except ValueError:
        raise ContractViolation(f"add: incompatible shapes {va.shape} and {vb.shape}") from None
    if tape is None:
        return out
    return tape._push("add", (a, b), out, _add_vjp)


def _sub_vjp(g, inputs, out, needs, aux):
    a, b = inputs
    return (
        sum_to(g, _shape(a)) if needs[0] else None,
        scale(sum_to(g, _shape(b)), -1.0) if needs[1] else None,
    )


def sub(a, b):
    tape = _tape_of(a, b)
    va, vb = _as_array(a), _as_array(b)
    try:
        out = va - vb
    except ValueError:
        raise ContractViolation(f"sub: incompatible shapes {va.shape} and {vb.shape}") from None
    if tape is None:
        return out
    return tape._push("sub", (a, b), out, _sub_vjp)


def _mul_vjp(g, inputs, out, needs, aux):
    a, b = inputs
    return (
        sum_to(mul(g, b), _shape(a)) if needs[0] else None,
        sum_to(mul(g, a), _shape(b)) if needs[1] else None,
    )


def mul(a, b):
    """Elementwise product with numpy broadcasting."""
    tape = _tape_of(a, b)
    va, vb = _as_array(a), _as_array(b)
    try:
        out = va * vb
    except ValueError:
        raise ContractViolation(f"mul: incompatible shapes {va.shape} and {vb.shape}") from None
    if tape is None:
        return out
    return tape._push("mul", (a, b), out, _mul_vjp)


def _scale_vjp(g, inputs, out, needs, aux):
    return (scale(g, aux),)


def scale(a, s):
    """Multiply by a Python scalar constant."""
    s = float(s)
    if a.__class__ is not Var:
        return np.asarray(a, dtype=np.float64) * s
    return a.tape._push("scale", (a,), a.value * s, _scale_vjp, s)


def neg(a):
    return scale(a, -1.0)


def _relu_vjp(g, inputs, out, needs, aux):
    return (mul(g, aux),)


def relu(a):
    """max(a, 0); the derivative at exactly 0 is taken as 0."""
    va = _as_array(a)
    out = np.maximum(va, 0.0)
    if a.__class__ is not Var:
        return out
    mask = (va > 0.0).astype(np.float64)
    return a.tape._push("relu", (a,), out, _relu_vjp, mask)


def _tanh_vjp(g, inputs, out, needs, aux):
    return (mul(g, sub(1.0, mul(out, out))),)


def tanh(a):
    out = np.tanh(_as_array(a))
    if a.__class__ is not Var:
        return out
    return a.tape._push("tanh", (a,), out, _tanh_vjp)


def _sigmoid_vjp(g, inputs, out, needs, aux):
    return (mul(g, mul(out, sub(1.0, out))),)


def sigmoid(a):
    out = expit(_as_array(a))
    if a.__class__ is not Var:
        return out
    return a.tape._push("sigmoid", (a,), out, _sigmoid_vjp)


def _exp_vjp(g, inputs, out, needs, aux):
    return (mul(g, out),)


def exp(a):
    # overflow surfaces as a NumericError from the tape instead of a warning
    with np.errstate(over="ignore"):
        out = np.exp(_as_array(a))
    if a.__class__ is not Var:
        return out
    return a.tape._push("exp", (a,), out, _exp_vjp)


def _log_softmax_vjp(g, inputs, out, needs, aux):
    return (sub(g, mul(exp(out), sum(g, axis=-1, keepdims=True))),)


def log_softmax(a):
    """Row-wise log-softmax over the last axis."""
    va = _as_array(a)
    if va.ndim == 0:
        raise ContractViolation("log_softmax needs at least one axis")
    shifted = va - va.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    if a.__class__ is not Var:
        return out
    return a.tape._push("log_softmax", (a,), out, _log_softmax_vjp)


# ------------------------------------------------------------ linear algebra


def _matmul_vjp(g, inputs, out, needs, aux):
    a, b = inputs
    return (
        matmul(g, transpose(b)) if needs[0] else None,
        matmul(transpose(a), g) if needs[1] else None,
    )


def matmul(a, b):
    """Product of two 2-D arrays."""
    tape = _tape_of(a, b)
    va, vb = _as_array(a), _as_array(b)
    if va.ndim != 2 or vb.ndim != 2 or va.shape[1] != vb.shape[0]:
        raise ContractViolation(f"matmul: incompatible shapes {va.shape} and {vb.shape}")
    out = va @ vb
    if tape is None:
        return out
    return tape._push("matmul", (a, b), out, _matmul_vjp)


def _transpose_vjp(g, inputs, out, needs, aux):
    return (transpose(g),)


def transpose(a):
    va = _as_array(a)
    if va.ndim != 2:
        raise ContractViolation(f"transpose expects a 2-D array, got shape {va.shape}")
    out = va.T
    if a.__class__ is not Var:
        return out
    return a.tape._push("transpose", (a,), out, _transpose_vjp)


def _reshape_vjp(g, inputs, out, needs, aux):
    return (reshape(g, aux),)


def reshape(a, shape):
    va = _as_array(a)
    try:
        out = va.reshape(shape)
    except ValueError:
        raise ContractViolation(f"reshape: cannot view {va.shape} as {shape}") from None
    if a.__class__ is not Var:
        return out
    return a.tape._push("reshape", (a,), out, _reshape_vjp, va.shape)


def _broadcast_to_vjp(g, inputs, out, needs, aux):
    return (sum_to(g, aux),)


def broadcast_to(a, shape):
    va = _as_array(a)
    shape = tuple(shape)
    if va.shape == shape:
        return a
    try:
        out = np.broadcast_to(va, shape).copy()
    except ValueError:
        raise ContractViolation(f"broadcast_to: cannot expand {va.shape} to {shape}") from None
    if a.__class__ is not Var:
        return out
    return a.tape._push("broadcast_to", (a,), out, _broadcast_to_vjp, va.shape)


def _sum_to_array(va, shape):
    lead = va.ndim - len(shape)
    if lead:
        va = va.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and va.shape[i] != 1)
    if axes:
        va = va.sum(axis=axes, keepdims=True)
    return va


def _sum_to_vjp(g, inputs, out, needs, aux):
    return (broadcast_to(g, aux),)


def sum_to(a, shape):
    """Sum ``a`` down to ``shape``: the adjoint of broadcasting."""
    va = _as_array(a)
    shape = tuple(shape)
    if va.shape == shape:
        return a
    out = _sum_to_array(va, shape)
    if a.__class__ is not Var:
        return out
    return a.tape._push("sum_to", (a,), out, _sum_to_vjp, va.shape)


# ---------------------------------------------------------------- reductions


def _keepdims_shape(shape, axis):
    if axis is None:
        return (1,) * len(shape)
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    axes = {ax % len(shape) for ax in axes}
    return tuple(1 if i in axes else n for i, n in enumerate(shape))


def _sum_vjp(g, inputs, out, needs, aux):
    in_shape, axis, keepdims = aux
    if not keepdims:
        g = reshape(g, _keepdims_shape(in_shape, axis))
    return (broadcast_to(g, in_shape),)


def sum(a, axis=None, keepdims=False):
    va = _as_array(a)
    out = np.asarray(va.sum(axis=axis, keepdims=keepdims), dtype=np.float64)
    if a.__class__ is not Var:
        return out
    return a.tape._push("sum", (a,), out, _sum_vjp, (va.shape, axis, keepdims))


def mean(a, axis=None, keepdims=False):
    va = _as_array(a)
    if axis is None:
        count = va.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([va.shape[ax] for ax in axes]))
    if count == 0:
        raise ContractViolation("mean over an empty axis")
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ------------------------------------------------------------ gather/scatter


def _check_index(idx, n, kind):
    idx = np.asarray(idx)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ContractViolation(f"{kind}: index must be a 1-D integer array")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ContractViolation(f"{kind}: index out of range [0, {n})")
    return idx


def _take_vjp(g, inputs, out, needs, aux):
    idx, n = aux
    return (scatter_add(g, idx, n),)


def take(a, idx):
    """Gather rows ``a[idx]`` along axis 0 (mini-batch selection)."""
    va = _as_array(a)
    if va.ndim == 0:
        raise ContractViolation("take: cannot index a scalar")
    idx = _check_index(idx, va.shape[0], "take")
    out = va[idx]
    if a.__class__ is not Var:
        return out
    return a.tape._push("take", (a,), out, _take_vjp, (idx, va.shape[0]))


def _scatter_add_vjp(g, inputs, out, needs, aux):
    return (take(g, aux[0]),)


def scatter_add(a, idx, n):
    """Zeros of length ``n`` along axis 0 with rows of ``a`` added at ``idx``."""
    va = _as_array(a)
    idx = _check_index(idx, n, "scatter_add")
    if va.shape[:1] != idx.shape:
        raise ContractViolation(f"scatter_add: {va.shape} rows vs {idx.shape} indices")
    out = np.zeros((n,) + va.shape[1:])
    np.add.at(out, idx, va)
    if a.__class__ is not Var:
        return out
    return a.tape._push("scatter_add", (a,), out, _scatter_add_vjp, (idx, n))


def _concat_vjp(g, inputs, out, needs, aux):
    grads = []
    for need, (lo, hi) in zip(needs, aux):
        grads.append(take(g, np.arange(lo, hi)) if need else None)
    return tuple(grads)


def concat(parts):
    """Concatenate along axis 0."""
    parts = tuple(parts)
    if not parts:
        raise ContractViolation("concat of an empty list")
    tape = _tape_of(*parts)
    values = [_as_array(p) for p in parts]
    tails = {v.shape[1:] for v in values}
    if len(tails) != 1 or any(v.ndim == 0 for v in values):
        raise ContractViolation(f"concat: incompatible shapes {[v.shape for v in values]}")
    out = np.concatenate(values, axis=0)
    if tape is None:
        return out
    bounds, lo = [], 0
    for v in values:
        bounds.append((lo, lo + v.shape[0]))
        lo += v.shape[0]
    return tape._push("concat", parts, out, _concat_vjp, tuple(bounds))


OPS = {
    "add": add,
    "sub": sub,
    "scalar-mul": scale,
    "elementwise-mul": mul,
    "matmul": matmul,
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "exp": exp,
    "log-softmax": log_softmax,
    "sum": sum,
    "mean": mean,
    "index-select": take,
    "scatter-add": scatter_add,
    "concat": lambda *parts: concat(parts),
    "transpose": transpose,
    "reshape": reshape,
    "broadcast-to": broadcast_to,
    "sum-to": sum_to,
}


# ------------------------------------------------------------------ backward


def gradient(root, wrt, create_graph=False):
    """Gradients of scalar ``root`` with respect to each Var in ``wrt``.

    With ``create_graph=False`` one numeric reverse sweep is run and plain
    arrays are returned.  With ``create_graph=True`` the sweep is recorded on
    the tape, and the returned gradients are Vars (or constant arrays when
    they do not depend on anything recorded) that can be differentiated
    again.  The tape is never modified destructively, so repeated calls are
    fine.
    """
    if root.__class__ is not Var:
        raise ContractViolation("gradient root must be a Var")
    if root.value.size != 1:
        raise ContractViolation(f"gradient root must be scalar, got shape {root.value.shape}")
    tape = root.tape
    wrt = list(wrt)
    for w in wrt:
        if w.__class__ is not Var or w.tape is not tape:
            raise ContractViolation("every wrt Var must live on the root's tape")
    if not wrt:
        return []

    nodes = tape.nodes
    wrt_ids = {w.id for w in wrt}
    lo, hi = min(wrt_ids), root.id
    relevant = set(wrt_ids)
    for i in range(lo + 1, hi + 1):
        for p in nodes[i].inputs:
            if p.__class__ is Var and p.id in relevant:
                relevant.add(i)
                break

    results = {}
    if hi in relevant:
        grads = {hi: np.ones_like(root.value)}
        for i in range(hi, lo - 1, -1):
            g = grads.pop(i, None)
            if g is None:
                continue
            if i in wrt_ids:
                results[i] = g
            node = nodes[i]
            if node.vjp is None:
                continue
            inputs = node.inputs
            needs = tuple(p.__class__ is Var and p.id in relevant for p in inputs)
            if not any(needs):
                continue
            if create_graph:
                gs = node.vjp(g, inputs, node, needs, node.aux)
            else:
                g = value_of(g)
                gs = node.vjp(g, tuple(value_of(p) for p in inputs), node.value, needs, node.aux)
            for p, need, gp in zip(inputs, needs, gs):
                if need:
                    prev = grads.get(p.id)
                    grads[p.id] = gp if prev is None else add(prev, gp)

    out = []
    for w in wrt:
        g = results.get(w.id)
        if g is None:
            g = np.zeros_like(w.value)
        elif not create_graph:
            g = np.array(value_of(g), dtype=np.float64).reshape(w.value.shape)
        out.append(g)
    return out
