"""Tape-based reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every primitive in execution order together with a
vector-Jacobian product closure.  ``Tape.backward`` walks the record once in
reverse.  Values that do not depend on any ``requires_grad`` leaf are never
recorded, so constant subgraphs cost nothing on the backward pass.

The primitive set is closed: the model, Sinkhorn unrolling and the loss are
written entirely in terms of the functions in this module.
"""
from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .linalg import NonFiniteError, Rng


class Var:
    __slots__ = ("value", "tape", "id", "requires_grad", "name")

    def __init__(self, value: np.ndarray, tape: "Tape", id: int, requires_grad: bool,
                 name: str | None = None):
        self.value = value
        self.tape = tape
        self.id = id
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Var{tag}(shape={self.value.shape}, grad={self.requires_grad})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)


class Tape:
    """Ordered record of primitives; one per forward/backward step."""

    def __init__(self, check_finite: bool = True):
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[Callable | None] = []
        self._shapes: list[tuple[int, ...]] = []
        self._req: list[bool] = []
        self.check_finite = check_finite

    def __len__(self):
        return len(self._parents)

    def _new(self, value, parents, vjp, requires_grad, name=None, check=False) -> Var:
        value = np.asarray(value, dtype=np.float64)
        if check and self.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError(f"non-finite value produced ({name or 'op'})")
        idx = len(self._parents)
        self._parents.append(tuple(parents))
        self._vjps.append(vjp)
        self._shapes.append(value.shape)
        self._req.append(requires_grad)
        return Var(value, self, idx, requires_grad, name)

    def var(self, value, requires_grad: bool = True, name: str | None = None) -> Var:
        """Leaf variable."""
        return self._new(value, (), None, requires_grad, name)

    def const(self, value) -> Var:
        return self._new(value, (), None, False)

    def record(self, value, inputs: Sequence[Var], vjp: Callable, name: str | None = None,
               check: bool = False) -> Var:
        """Register a primitive result.

        ``vjp(g)`` must return one gradient (or None) per input, shaped like
        that input's value.  ``check`` asks for a finiteness test of the
        result; ops that can overflow or divide by zero set it, everything
        else inherits non-finite values from its inputs and is caught at the
        loss.
        """
        if any(v.requires_grad for v in inputs):
            return self._new(value, [v.id for v in inputs], vjp, True, name, check)
        return self._new(value, (), None, False, name, check)

    def backward(self, loss: Var) -> dict[int, np.ndarray]:
        """Gradients of a scalar ``loss`` for every node that requires grad.

        Returns a map from node id to gradient; leaves can be looked up by
        their ``Var.id``.
        """
        if loss.tape is not self:
            raise ValueError("loss was recorded on a different tape")
        if loss.value.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        if self.check_finite and not np.all(np.isfinite(loss.value)):
            raise NonFiniteError("non-finite loss")
        grads: list[np.ndarray | None] = [None] * len(self._parents)
        grads[loss.id] = np.ones_like(loss.value)
        for i in range(loss.id, -1, -1):
            g = grads[i]
            if g is None:
                continue
            vjp = self._vjps[i]
            if vjp is None:
                continue
            parents = self._parents[i]
            for pid, pg in zip(parents, vjp(g)):
                if pg is None or not self._req[pid]:
                    continue
                if grads[pid] is None:
                    grads[pid] = np.array(pg, dtype=np.float64, order="C").reshape(self._shapes[pid])
                else:
                    grads[pid] += pg
        out = {i: g for i, g in enumerate(grads) if g is not None}
        if self.check_finite:
            for i, g in out.items():
                if not self._parents[i] and not np.all(np.isfinite(g)):
                    raise NonFiniteError("non-finite gradient")
        return out

    def gradients(self, loss: Var, leaves: Mapping[str, Var]) -> dict[str, np.ndarray]:
        """Named gradients for ``leaves``; zero arrays for unreached leaves."""
        g = self.backward(loss)
        return {k: g.get(v.id, np.zeros_like(v.value)) for k, v in leaves.items()}


# --------------------------------------------------------------------------- helpers


def _lift(x, tape: Tape) -> Var:
    if isinstance(x, Var):
        return x
    return tape.const(np.asarray(x, dtype=np.float64))


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one operand must be a Var")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary(a, b):
    t = _tape_of(a, b)
    return t, _lift(a, t), _lift(b, t)


# --------------------------------------------------------------------------- elementwise


def add(a, b) -> Var:
    t, a, b = _binary(a, b)
    sa, sb = a.shape, b.shape
    return t.record(a.value + b.value, (a, b),
                    lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Var:
    t, a, b = _binary(a, b)
    sa, sb = a.shape, b.shape
    return t.record(a.value - b.value, (a, b),
                    lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def neg(a: Var) -> Var:
    return a.tape.record(-a.value, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Var:
    t, a, b = _binary(a, b)
    av, bv = a.value, b.value
    return t.record(av * bv, (a, b),
                    lambda g: (_unbroadcast(g * bv, av.shape) if a.requires_grad else None,
                               _unbroadcast(g * av, bv.shape) if b.requires_grad else None),
                    "mul")


def div(a, b) -> Var:
    t, a, b = _binary(a, b)
    av, bv = a.value, b.value
    out = av / bv

    def vjp(g):
        ga = _unbroadcast(g / bv, av.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bv, bv.shape) if b.requires_grad else None
        return ga, gb

    return t.record(out, (a, b), vjp, "div", check=True)


def exp(a: Var) -> Var:
    out = np.exp(a.value)
    return a.tape.record(out, (a,), lambda g: (g * out,), "exp", check=True)


def log(a: Var) -> Var:
    av = a.value
    return a.tape.record(np.log(av), (a,), lambda g: (g / av,), "log", check=True)


def sigmoid(a: Var) -> Var:
    out = expit(a.value)
    return a.tape.record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a: Var) -> Var:
    out = np.maximum(a.value, 0.0)
    return a.tape.record(out, (a,), lambda g: (np.where(out > 0, g, 0.0),), "relu")


def leaky_relu(a: Var, slope: float = 0.2) -> Var:
    mask = a.value > 0
    scale = np.where(mask, 1.0, slope)
    return a.tape.record(a.value * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def elu(a: Var) -> Var:
    av = a.value
    neg_part = np.expm1(np.minimum(av, 0.0))
    out = np.where(av > 0, av, neg_part)
    d = np.where(av > 0, 1.0, neg_part + 1.0)
    return a.tape.record(out, (a,), lambda g: (g * d,), "elu")


def clip(a: Var, lo: float, hi: float) -> Var:
    mask = (a.value >= lo) & (a.value <= hi)
    return a.tape.record(np.clip(a.value, lo, hi), (a,), lambda g: (g * mask,), "clip")


def stop_gradient(a: Var) -> Var:
    return a.tape.const(a.value)


# --------------------------------------------------------------------------- linear algebra


def matmul(a, b) -> Var:
    """``a @ b`` for 2-D or batched 3-D operands (numpy broadcasting rules)."""
    t, a, b = _binary(a, b)
    av, bv = a.value, b.value
    if av.shape[-1] != bv.shape[-2 if bv.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return t.record(av @ bv, (a, b), vjp, "matmul")


def spmm(s: sp.spmatrix, x: Var) -> Var:
    """Constant sparse matrix times a dense (N, d) Var."""
    return x.tape.record(np.asarray(s @ x.value), (x,), lambda g: (np.asarray(s.T @ g),), "spmm")


def rms_norm(x: Var, eps: float = 1e-8) -> Var:
    """Normalise the last axis by its root mean square (no learnable gain)."""
    xv = x.value
    d = xv.shape[-1]
    inv = 1.0 / np.sqrt(np.mean(xv * xv, axis=-1, keepdims=True) + eps)
    out = xv * inv

    def vjp(g):
        dot = np.sum(g * xv, axis=-1, keepdims=True)
        return (inv * g - (inv ** 3) * xv * dot / d,)

    return x.tape.record(out, (x,), vjp, "rms_norm")


def rms_scale(x: Var, eps: float = 1e-8) -> Var:
    """``1 / sqrt(mean(x**2, -1) + eps)`` with a kept last axis.

    ``rms_norm(x) == x * rms_scale(x)``; keeping the factor separate lets a
    linear map act on ``x`` before scaling, so the normalised tensor is never
    materialised.
    """
    xv = x.value
    d = xv.shape[-1]
    inv = 1.0 / np.sqrt(np.einsum("...i,...i->...", xv, xv)[..., None] / d + eps)

    def vjp(g):
        return (xv * (-(inv ** 3) * g / d),)

    return x.tape.record(inv, (x,), vjp, "rms_scale")


def index(x: Var, key) -> Var:
    """Basic (slice/int) indexing ``x[key]``."""
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        out[key] = g
        return (out,)

    return x.tape.record(x.value[key], (x,), vjp, "index")


def softmax_rows(x: Var) -> Var:
    xv = x.value
    z = np.exp(xv - xv.max(axis=-1, keepdims=True))
    out = z / z.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return x.tape.record(out, (x,), vjp, "softmax")


# --------------------------------------------------------------------------- shape ops


def sum(x: Var, axis=None, keepdims: bool = False) -> Var:  # noqa: A001
    shape = x.shape
    out = np.sum(x.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return x.tape.record(out, (x,), vjp, "sum")


def mean(x: Var, axis=None, keepdims: bool = False) -> Var:
    count = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(x: Var, shape) -> Var:
    old = x.shape
    return x.tape.record(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def swapaxes(x: Var, a1: int, a2: int) -> Var:
    return x.tape.record(np.swapaxes(x.value, a1, a2), (x,),
                         lambda g: (np.swapaxes(g, a1, a2),), "swapaxes")


def broadcast_to(x: Var, shape) -> Var:
    old = x.shape
    return x.tape.record(np.broadcast_to(x.value, shape).copy(), (x,),
                         lambda g: (_unbroadcast(g, old),), "broadcast")


def concat(xs: Sequence[Var], axis: int = -1) -> Var:
    t = _tape_of(*xs)
    xs = [_lift(x, t) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return t.record(np.concatenate([x.value for x in xs], axis=axis), xs,
                    lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def take_rows(x: Var, idx: np.ndarray) -> Var:
    """Gather ``x[idx]`` along axis 0."""
    n = x.shape[0]

    def vjp(g):
        out = np.zeros((n,) + g.shape[1:])
        np.add.at(out, idx, g)
        return (out,)

    return x.tape.record(x.value[idx], (x,), vjp, "take_rows")


def segment_sum(x: Var, segments: np.ndarray, num_segments: int) -> Var:
    """Sum rows of ``x`` into ``num_segments`` buckets given by ``segments``."""
    out = np.zeros((num_segments,) + x.shape[1:])
    np.add.at(out, segments, x.value)
    return x.tape.record(out, (x,), lambda g: (g[segments],), "segment_sum")


def segment_softmax(scores: Var, segments: np.ndarray, num_segments: int) -> Var:
    """Softmax of ``scores`` (E, ...) within each segment along axis 0."""
    sv = scores.value
    mx = np.full((num_segments,) + sv.shape[1:], -np.inf)
    np.maximum.at(mx, segments, sv)
    z = np.exp(sv - mx[segments])
    den = np.zeros_like(mx)
    np.add.at(den, segments, z)
    out = z / den[segments]

    def vjp(g):
        dot = np.zeros_like(mx)
        np.add.at(dot, segments, g * out)
        return (out * (g - dot[segments]),)

    return scores.tape.record(out, (scores,), vjp, "segment_softmax")


# --------------------------------------------------------------------------- losses, noise


def cross_entropy(logits: Var, labels: np.ndarray, mask: np.ndarray | None = None) -> Var:
    """Mean softmax cross-entropy over the rows selected by ``mask``."""
    lv = logits.value
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(lv.shape[0]) if mask is None else np.flatnonzero(mask)
    if rows.size == 0:
        raise ValueError("cross_entropy over an empty mask")
    z = lv[rows] - lv[rows].max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    y = labels[rows]
    loss = -np.mean(logp[np.arange(rows.size), y])

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(rows.size), y] -= 1.0
        out = np.zeros_like(lv)
        out[rows] = p * (float(g) / rows.size)
        return (out,)

    return logits.tape.record(np.asarray(loss), (logits,), vjp, "cross_entropy", check=True)


def dropout(x: Var, rate: float, rng: Rng | None, train: bool = True) -> Var:
    """Inverted dropout; the identity when not training or ``rate == 0``."""
    if not train or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout at train time needs an rng stream")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x.tape.record(x.value * keep, (x,), lambda g: (g * keep,), "dropout")


# --------------------------------------------------------------------------- verification


def finite_difference_check(f: Callable[[Mapping[str, Var]], Var],
                            params: Mapping[str, np.ndarray], h: float = 1e-5,
                            floor: float = 1e-6, max_entries: int | None = None,
                            seed: int = 0) -> float:
    """Worst elementwise relative error between ``backward`` and central differences.

    ``f`` receives a dict of leaf Vars (all on one fresh tape) and returns a
    scalar loss Var.  Relative error is ``|a - b| / max(|a|, |b|, floor)``.
    With ``max_entries`` only a seeded random subset of entries per parameter
    is probed.
    """
    params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    def evaluate(p, with_grad):
        tape = Tape()
        leaves = {k: tape.var(v, requires_grad=with_grad, name=k) for k, v in p.items()}
        loss = f(leaves)
        if not with_grad:
            return float(loss.value)
        return float(loss.value), tape.gradients(loss, leaves)

    _, analytic = evaluate(params, True)
    rng = Rng(seed)
    worst = 0.0
    for name, value in params.items():
        flat = np.arange(value.size)
        if max_entries is not None and value.size > max_entries:
            flat = np.sort(rng.gen.choice(value.size, size=max_entries, replace=False))
        for k in flat:
            idx = np.unravel_index(k, value.shape)
            plus = dict(params)
            minus = dict(params)
            plus[name] = value.copy()
            minus[name] = value.copy()
            plus[name][idx] += h
            minus[name][idx] -= h
            numeric = (evaluate(plus, False) - evaluate(minus, False)) / (2.0 * h)
            a = float(analytic[name][idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst
