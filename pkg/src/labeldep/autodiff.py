"""Reverse-mode automatic differentiation on dense float64 arrays.

A ``Tape`` records primitive ops as they execute (define-by-run) and
``Tape.backward`` replays their adjoints in reverse creation order, which is
topological by construction. Values are numpy float64 arrays. Every op checks
operand shapes and rejects non-finite results, so a training step can never
silently propagate NaN/Inf.

Shape rules
-----------
matmul              (n, k) @ (k, m) -> (n, m), 2-D only
add / sub / mul     identical shapes, elementwise
broadcast_add_row   (n, d) + (d,) -> (n, d); the only broadcast supported
concat              along the last axis; all other dims must agree
slice_last          contiguous [start, stop) range of the last axis
reduce_sum / mean   full reduction to a scalar, or over a single axis
logsumexp           overflow-safe log-sum-exp over a single axis
scale / add_scalar  elementwise combination with a Python float
unary ops           elementwise, shape preserving

relu uses subgradient 0 at exactly 0. ``clamp`` is a composite of the
primitives above (gradient 1 inside the interval, 0 outside).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import expit


class AutodiffError(Exception):
    """Tape construction or execution failure."""


class ShapeError(AutodiffError):
    """Operand shapes do not satisfy the op's shape rule."""


class NumericError(AutodiffError):
    """An op produced or received non-finite values or violated a domain."""


class Var:
    """A node on a tape: a forward value plus a slot for its adjoint."""

    __slots__ = ("tape", "vid", "value", "grad", "op", "name", "_parents", "_push")

    def __init__(self, tape, vid, value, op, parents, push, name=None):
        self.tape = tape
        self.vid = vid
        self.value = value
        self.grad = None
        self.op = op
        self.name = name
        self._parents = parents
        self._push = push

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = self.name or self.op
        return f"Var(v{self.vid}, {label}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return negate(self)


class Tape:
    """Ordered record of executed ops, rebuilt for every training step.

    Nodes are valid only on the tape that issued them; mixing tapes raises.
    A tape is confined to a single worker while it is being built.
    """

    def __init__(self, check_finite: bool = True):
        self.check_finite = check_finite
        self._nodes: list[Var] = []

    def __len__(self):
        return len(self._nodes)

    def leaf(self, value, name: str | None = None) -> Var:
        """Register an input or parameter node holding a copy of ``value``."""
        arr = np.array(value, dtype=np.float64)
        if self.check_finite and not np.all(np.isfinite(arr)):
            raise NumericError(f"leaf '{name or '?'}' contains non-finite values")
        return self._record("leaf", arr, (), None, name)

    def _record(self, op, value, parents, push, name=None):
        v = Var(self, len(self._nodes), value, op, parents, push, name)
        self._nodes.append(v)
        return v

    def backward(self, loss: Var) -> dict[Var, np.ndarray]:
        """Accumulate d(loss)/d(node) for every node reachable from ``loss``.

        Creation order is topological, so a single reverse sweep suffices.
        Returns a map from node to gradient for every node that received one;
        gradients are also left on ``Var.grad``.
        """
        if loss.tape is not self:
            raise AutodiffError("loss was recorded on a different tape")
        if loss.value.shape != ():
            raise ShapeError(
                f"backward requires a scalar loss, got shape {loss.value.shape}"
            )
        for v in self._nodes:
            v.grad = None
        loss.grad = np.ones((), dtype=np.float64)
        for v in reversed(self._nodes[: loss.vid + 1]):
            if v.grad is not None and v._push is not None:
                v._push(v.grad)
        return {v: v.grad for v in self._nodes if v.grad is not None}


def _tape_of(*vars_: Var) -> Tape:
    tape = vars_[0].tape
    for v in vars_[1:]:
        if v.tape is not tape:
            raise AutodiffError("operands were recorded on different tapes")
    return tape


def _accum(v: Var, g) -> None:
    if v.grad is None:
        v.grad = np.zeros_like(v.value)
    v.grad += g


def _emit(op, tape, value, parents, push) -> Var:
    value = np.asarray(value, dtype=np.float64)
    if tape.check_finite and not np.all(np.isfinite(value)):
        ids = ", ".join(f"v{p.vid}" for p in parents)
        raise NumericError(f"{op} produced non-finite values (inputs {ids})")
    return tape._record(op, value, parents, push)


def _require_same_shape(op, a: Var, b: Var) -> None:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"{op}: shapes {a.value.shape} and {b.value.shape} differ")


def matmul(a: Var, b: Var) -> Var:
    """(n, k) @ (k, m) -> (n, m)."""
    tape = _tape_of(a, b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(
            f"matmul: incompatible shapes {a.value.shape} and {b.value.shape}"
        )
    out = a.value @ b.value

    def push(g):
        _accum(a, g @ b.value.T)
        _accum(b, a.value.T @ g)

    return _emit("matmul", tape, out, (a, b), push)


def add(a: Var, b: Var) -> Var:
    tape = _tape_of(a, b)
    _require_same_shape("add", a, b)

    def push(g):
        _accum(a, g)
        _accum(b, g)

    return _emit("add", tape, a.value + b.value, (a, b), push)


def sub(a: Var, b: Var) -> Var:
    tape = _tape_of(a, b)
    _require_same_shape("sub", a, b)

    def push(g):
        _accum(a, g)
        _accum(b, -g)

    return _emit("sub", tape, a.value - b.value, (a, b), push)


def mul(a: Var, b: Var) -> Var:
    tape = _tape_of(a, b)
    _require_same_shape("mul", a, b)

    def push(g):
        _accum(a, g * b.value)
        _accum(b, g * a.value)

    return _emit("mul", tape, a.value * b.value, (a, b), push)


def negate(a: Var) -> Var:
    def push(g):
        _accum(a, -g)

    return _emit("negate", a.tape, -a.value, (a,), push)


def scale(a: Var, c: float) -> Var:
    """Multiply by a Python float constant."""
    c = float(c)

    def push(g):
        _accum(a, g * c)

    return _emit("scale", a.tape, a.value * c, (a,), push)


def add_scalar(a: Var, c: float) -> Var:
    """Add a Python float constant elementwise."""
    c = float(c)

    def push(g):
        _accum(a, g)

    return _emit("add_scalar", a.tape, a.value + c, (a,), push)


def sigmoid(a: Var) -> Var:
    out = expit(a.value)

    def push(g):
        _accum(a, g * out * (1.0 - out))

    return _emit("sigmoid", a.tape, out, (a,), push)


def tanh(a: Var) -> Var:
    out = np.tanh(a.value)

    def push(g):
        _accum(a, g * (1.0 - out * out))

    return _emit("tanh", a.tape, out, (a,), push)


def relu(a: Var) -> Var:
    """max(0, x); adjoint uses subgradient 0 at exactly 0."""

    def push(g):
        _accum(a, g * (a.value > 0.0))

    return _emit("relu", a.tape, np.maximum(a.value, 0.0), (a,), push)


def exp(a: Var) -> Var:
    with np.errstate(over="ignore"):  # overflow becomes a NumericError below
        out = np.exp(a.value)

    def push(g):
        _accum(a, g * out)

    return _emit("exp", a.tape, out, (a,), push)


def log(a: Var) -> Var:
    if np.any(a.value <= 0.0):
        raise NumericError(f"log domain violation: node v{a.vid} has values <= 0")

    def push(g):
        _accum(a, g / a.value)

    return _emit("log", a.tape, np.log(a.value), (a,), push)


def softplus(a: Var) -> Var:
    """log(1 + exp(x)) computed without overflow."""
    out = np.logaddexp(0.0, a.value)

    def push(g):
        _accum(a, g * expit(a.value))

    return _emit("softplus", a.tape, out, (a,), push)


def concat(parts) -> Var:
    """Concatenate along the last axis; all other dims must agree."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat: needs at least one operand")
    tape = _tape_of(*parts)
    lead = parts[0].value.shape[:-1]
    for p in parts[1:]:
        if p.value.ndim != parts[0].value.ndim or p.value.shape[:-1] != lead:
            raise ShapeError(
                "concat: leading dims differ "
                f"({parts[0].value.shape} vs {p.value.shape})"
            )
    widths = [p.value.shape[-1] for p in parts]
    out = np.concatenate([p.value for p in parts], axis=-1)

    def push(g):
        offset = 0
        for p, w in zip(parts, widths):
            _accum(p, g[..., offset : offset + w])
            offset += w

    return _emit("concat", tape, out, tuple(parts), push)


def slice_last(a: Var, start: int, stop: int) -> Var:
    """Contiguous [start, stop) range of the last axis."""
    width = a.value.shape[-1]
    if not (0 <= start < stop <= width):
        raise ShapeError(
            f"slice_last: range [{start}, {stop}) invalid for last dim {width}"
        )

    def push(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.value)
        a.grad[..., start:stop] += g

    return _emit("slice_last", a.tape, a.value[..., start:stop].copy(), (a,), push)


def _check_axis(op, a: Var, axis: int) -> int:
    if not -a.value.ndim <= axis < a.value.ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for shape {a.value.shape}")
    return axis % a.value.ndim


def reduce_sum(a: Var, axis: int | None = None) -> Var:
    """Sum to a scalar (axis None) or over one axis."""
    if axis is None:

        def push(g):
            _accum(a, np.broadcast_to(g, a.value.shape))

        return _emit("reduce_sum", a.tape, np.asarray(a.value.sum()), (a,), push)

    ax = _check_axis("reduce_sum", a, axis)

    def push(g):
        _accum(a, np.expand_dims(g, ax))

    return _emit("reduce_sum", a.tape, a.value.sum(axis=ax), (a,), push)


def reduce_mean(a: Var, axis: int | None = None) -> Var:
    """Mean to a scalar (axis None) or over one axis."""
    if axis is None:
        n = a.value.size

        def push(g):
            _accum(a, np.broadcast_to(g / n, a.value.shape))

        return _emit("reduce_mean", a.tape, np.asarray(a.value.mean()), (a,), push)

    ax = _check_axis("reduce_mean", a, axis)
    n = a.value.shape[ax]

    def push(g):
        _accum(a, np.expand_dims(g / n, ax))

    return _emit("reduce_mean", a.tape, a.value.mean(axis=ax), (a,), push)


def logsumexp(a: Var, axis: int = -1) -> Var:
    """Overflow-safe log(sum(exp(a))) over one axis (max-shifted)."""
    ax = _check_axis("logsumexp", a, axis)
    m = np.max(a.value, axis=ax, keepdims=True)
    shifted = np.exp(a.value - m)
    total = shifted.sum(axis=ax, keepdims=True)
    out = np.squeeze(m + np.log(total), axis=ax)

    def push(g):
        _accum(a, np.expand_dims(g, ax) * (shifted / total))

    return _emit("logsumexp", a.tape, out, (a,), push)


def broadcast_add_row(a: Var, b: Var) -> Var:
    """(n, d) matrix plus a (d,) row vector; the only supported broadcast."""
    tape = _tape_of(a, b)
    if a.value.ndim != 2 or b.value.ndim != 1 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(
            f"broadcast_add_row: shapes {a.value.shape} and {b.value.shape} "
            "must be (n, d) and (d,)"
        )

    def push(g):
        _accum(a, g)
        _accum(b, g.sum(axis=0))

    return _emit("broadcast_add_row", tape, a.value + b.value, (a, b), push)


def clamp(a: Var, lo: float, hi: float) -> Var:
    """Hard clamp to [lo, hi]; gradient 1 inside the interval, 0 outside."""
    if not lo < hi:
        raise ValueError(f"clamp: lo {lo} must be < hi {hi}")
    capped = sub(a, relu(add_scalar(a, -hi)))
    return add(capped, relu(add_scalar(negate(a), lo)))


@dataclass
class GradCheckReport:
    """Worst-coordinate outcome of a finite-difference gradient comparison."""

    max_rel_error: float
    worst_param: int
    worst_coord: tuple
    analytic: float
    numeric: float


def finite_diff_check(
    f: Callable, params, step: float = 1e-5
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` maps a list of float64 arrays to ``(loss, param_vars)`` where
    ``loss`` is a scalar Var on a fresh tape and ``param_vars`` are the tape
    leaves holding the parameters, in the same order. ``f`` must be
    deterministic given the parameters: any sampling noise has to be frozen,
    otherwise the difference quotient measures noise rather than the
    derivative.

    Relative error uses the denominator max(|analytic|, |numeric|, 1), so it
    degrades to absolute error for tiny gradients.
    """
    params = [np.array(p, dtype=np.float64) for p in params]
    loss, pvars = f(params)
    loss.tape.backward(loss)
    analytic = [
        np.zeros_like(p) if v.grad is None else v.grad.copy()
        for p, v in zip(params, pvars)
    ]

    def value_at(ps):
        out, _ = f(ps)
        return float(out.value)

    report = GradCheckReport(0.0, -1, (), 0.0, 0.0)
    for pi, p in enumerate(params):
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + step
            hi = value_at(params)
            p[idx] = orig - step
            lo = value_at(params)
            p[idx] = orig
            numeric = (hi - lo) / (2.0 * step)
            a = float(analytic[pi][idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            if err > report.max_rel_error:
                report = GradCheckReport(err, pi, idx, a, float(numeric))
    return report
