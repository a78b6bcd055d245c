"""Reverse-mode differentiation on an append-only scalar tape.

The tape stores one node per recorded primitive.  Every node keeps its
eagerly computed value plus at most two (parent id, local partial) pairs,
so a single reverse sweep accumulates d(root)/d(parameter) for every
registered parameter.  Node storage is kept in parallel lists rather than
objects: the hot training loop records a few hundred thousand nodes per
step and object allocation would dominate.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass

import numpy as np


class AutodiffError(Exception):
    pass


class DivisionNearZero(AutodiffError):
    """Denominator magnitude at or below the dividing floor."""


class NonFiniteValue(AutodiffError):
    """A recorded value or local partial came out NaN/Inf."""


class NonFiniteGradient(AutodiffError):
    """An accumulated gradient came out NaN/Inf during backward."""


# Below this magnitude a division is refused; spline code treats such
# terms as 0 (the 0/0 := 0 convention) instead of recording them.
DIVIDING_FLOOR = 1e-12

# Op kinds, stored per node so a tape can be replayed/inspected.
OP_CONST = 0
OP_PARAM = 1
OP_ADD = 2
OP_SUB = 3
OP_MUL = 4
OP_DIV = 5
OP_NEG = 6
OP_MAX = 7
OP_EXP = 8
OP_LN = 9
OP_SIN = 10
OP_COS = 11
OP_SQRT = 12
OP_SIGMOID = 13
OP_POWI = 14
OP_SELECT = 15

OP_NAMES = (
    "const", "param", "add", "sub", "mul", "div", "neg", "max",
    "exp", "ln", "sin", "cos", "sqrt", "sigmoid", "powi", "select",
)

_isfinite = math.isfinite


@dataclass(frozen=True)
class ScalarNode:
    """Read-only view of one tape entry."""

    id: int
    value: float
    op: str
    parents: tuple  # ((parent id, local partial), ...)


class Tape:
    """Append-only record of a scalar computation.

    A tape is single-threaded; build one per loss evaluation.  After
    :meth:`backward` the returned gradient map is a plain dict and safe
    to share.
    """

    __slots__ = ("_val", "_op", "_p1", "_w1", "_p2", "_w2",
                 "_param_handles", "last_gradient")

    def __init__(self):
        self._val = []
        self._op = []
        self._p1 = []
        self._w1 = []
        self._p2 = []
        self._w2 = []
        # parameter handle -> node id
        self._param_handles = {}
        self.last_gradient = None

    def __len__(self):
        return len(self._val)

    def value(self, i: int) -> float:
        return self._val[i]

    def values(self, ids) -> list:
        val = self._val
        return [val[i] for i in ids]

    @property
    def parameter_index(self) -> dict:
        return dict(self._param_handles)

    def node(self, i: int) -> ScalarNode:
        parents = []
        a = self._p1[i]
        if a >= 0:
            parents.append((a, self._w1[i]))
            b = self._p2[i]
            if b >= 0:
                parents.append((b, self._w2[i]))
        return ScalarNode(i, self._val[i], OP_NAMES[self._op[i]], tuple(parents))

    # -- leaves ----------------------------------------------------------

    def constant(self, v: float) -> int:
        v = float(v)
        if not _isfinite(v):
            raise NonFiniteValue(f"constant is not finite: {v!r}")
        i = len(self._val)
        self._val.append(v)
        self._op.append(OP_CONST)
        self._p1.append(-1)
        self._w1.append(0.0)
        self._p2.append(-1)
        self._w2.append(0.0)
        return i

    def parameter(self, v: float, handle=None) -> int:
        v = float(v)
        if not _isfinite(v):
            raise NonFiniteValue(f"parameter is not finite: {v!r}")
        i = len(self._val)
        if handle is None:
            handle = len(self._param_handles)
        self._val.append(v)
        self._op.append(OP_PARAM)
        self._p1.append(-1)
        self._w1.append(0.0)
        self._p2.append(-1)
        self._w2.append(0.0)
        self._param_handles[handle] = i
        return i

    def parameters_from(self, values) -> int:
        """Register a flat batch of parameters with handles 0..P-1.

        Returns the id of the first node; ids are contiguous.  Intended
        for binding a network's flat parameter vector at the start of a
        fresh tape.
        """
        if self._val or self._param_handles:
            raise AutodiffError("bulk parameter binding requires an empty tape")
        first = 0
        append_v = self._val.append
        append_o = self._op.append
        ap1, aw1 = self._p1.append, self._w1.append
        ap2, aw2 = self._p2.append, self._w2.append
        handles = self._param_handles
        for k, v in enumerate(values):
            v = float(v)
            if not _isfinite(v):
                raise NonFiniteValue(f"parameter {k} is not finite: {v!r}")
            append_v(v)
            append_o(OP_PARAM)
            ap1(-1); aw1(0.0)
            ap2(-1); aw2(0.0)
            handles[k] = k
        return first

    # -- primitive records -------------------------------------------------

    def _push2(self, op, v, a, wa, b, wb):
        if not (_isfinite(v) and _isfinite(wa) and _isfinite(wb)):
            raise NonFiniteValue(f"{OP_NAMES[op]} produced a non-finite value/partial")
        i = len(self._val)
        self._val.append(v)
        self._op.append(op)
        self._p1.append(a)
        self._w1.append(wa)
        self._p2.append(b)
        self._w2.append(wb)
        return i

    def _push1(self, op, v, a, wa):
        if not (_isfinite(v) and _isfinite(wa)):
            raise NonFiniteValue(f"{OP_NAMES[op]} produced a non-finite value/partial")
        i = len(self._val)
        self._val.append(v)
        self._op.append(op)
        self._p1.append(a)
        self._w1.append(wa)
        self._p2.append(-1)
        self._w2.append(0.0)
        return i

    def add(self, a: int, b: int) -> int:
        val = self._val
        return self._push2(OP_ADD, val[a] + val[b], a, 1.0, b, 1.0)

    def sub(self, a: int, b: int) -> int:
        val = self._val
        return self._push2(OP_SUB, val[a] - val[b], a, 1.0, b, -1.0)

    def mul(self, a: int, b: int) -> int:
        val = self._val
        va = val[a]
        vb = val[b]
        return self._push2(OP_MUL, va * vb, a, vb, b, va)

    def div(self, a: int, b: int) -> int:
        val = self._val
        vb = val[b]
        if -DIVIDING_FLOOR <= vb <= DIVIDING_FLOOR:
            raise DivisionNearZero(f"|denominator| = {abs(vb)!r} <= {DIVIDING_FLOOR}")
        va = val[a]
        inv = 1.0 / vb
        return self._push2(OP_DIV, va * inv, a, inv, b, -va * inv * inv)

    def neg(self, a: int) -> int:
        return self._push1(OP_NEG, -self._val[a], a, -1.0)

    def maximum(self, a: int, b: int) -> int:
        # Subgradient at a tie goes to the first argument.
        val = self._val
        va = val[a]
        vb = val[b]
        if va >= vb:
            return self._push2(OP_MAX, va, a, 1.0, b, 0.0)
        return self._push2(OP_MAX, vb, a, 0.0, b, 1.0)

    def exp(self, a: int) -> int:
        try:
            v = math.exp(self._val[a])
        except OverflowError:
            raise NonFiniteValue("exp overflow") from None
        return self._push1(OP_EXP, v, a, v)

    def log(self, a: int) -> int:
        va = self._val[a]
        if va <= 0.0:
            raise NonFiniteValue(f"ln of non-positive value {va!r}")
        return self._push1(OP_LN, math.log(va), a, 1.0 / va)

    def sin(self, a: int) -> int:
        va = self._val[a]
        return self._push1(OP_SIN, math.sin(va), a, math.cos(va))

    def cos(self, a: int) -> int:
        va = self._val[a]
        return self._push1(OP_COS, math.cos(va), a, -math.sin(va))

    def sqrt(self, a: int) -> int:
        va = self._val[a]
        if va < 0.0:
            raise NonFiniteValue(f"sqrt of negative value {va!r}")
        v = math.sqrt(va)
        if v == 0.0:
            raise NonFiniteValue("sqrt partial diverges at 0")
        return self._push1(OP_SQRT, v, a, 0.5 / v)

    def sigmoid(self, a: int) -> int:
        va = self._val[a]
        if va >= 0.0:
            s = 1.0 / (1.0 + math.exp(-va))
        else:
            e = math.exp(va)
            s = e / (1.0 + e)
        return self._push1(OP_SIGMOID, s, a, s * (1.0 - s))

    def silu(self, a: int) -> int:
        """x * sigmoid(x), composed from the primitive set."""
        return self.mul(a, self.sigmoid(a))

    def powi(self, a: int, n: int) -> int:
        if n != int(n):
            raise AutodiffError("powi exponent must be an integer")
        n = int(n)
        va = self._val[a]
        if va == 0.0 and n < 0:
            raise DivisionNearZero("0 raised to a negative power")
        v = va ** n
        if n == 0:
            w = 0.0
        else:
            w = n * va ** (n - 1)
        return self._push2(OP_POWI, v, a, w, -1, 0.0)

    def select_permutation(self, ids, perm) -> list:
        """Route existing nodes through a permutation.

        Output k takes its value (and gradient) from ``ids[perm[k]]``.
        """
        if sorted(perm) != list(range(len(ids))):
            raise AutodiffError("not a permutation of the input nodes")
        return [self._push1(OP_SELECT, self._val[ids[p]], ids[p], 1.0)
                for p in perm]

    # -- reverse sweep -----------------------------------------------------

    def backward(self, root: int) -> dict:
        """Gradient of node ``root`` w.r.t. every registered parameter.

        Parameters the root does not depend on map to 0.
        """
        n = len(self._val)
        if not 0 <= root < n:
            raise AutodiffError(f"root {root} not on tape")
        g = [0.0] * n
        g[root] = 1.0
        p1 = self._p1
        w1 = self._w1
        p2 = self._p2
        w2 = self._w2
        for i in range(root, -1, -1):
            gi = g[i]
            if gi != 0.0:
                a = p1[i]
                if a >= 0:
                    g[a] += gi * w1[i]
                    b = p2[i]
                    if b >= 0:
                        g[b] += gi * w2[i]
        self.last_gradient = g
        out = {}
        for handle, node_id in self._param_handles.items():
            gv = g[node_id]
            if not _isfinite(gv):
                raise NonFiniteGradient(f"gradient of parameter {handle!r} is {gv!r}")
            out[handle] = gv
        return out

    def gradient_vector(self, root: int, count: int) -> np.ndarray:
        """Dense gradient for parameters bound via :meth:`parameters_from`."""
        self.backward(root)
        g = np.asarray(self.last_gradient[:count], dtype=float)
        if not np.all(np.isfinite(g)):
            bad = int(np.flatnonzero(~np.isfinite(g))[0])
            raise NonFiniteGradient(f"gradient of parameter {bad} is not finite")
        return g

    def replay_values(self) -> list:
        """Recompute every node value from its parents (consistency check).

        Constants/parameters replay as stored.  For interior nodes the
        recorded op is re-evaluated from parent values; used by tests to
        assert the tape reproduces itself exactly.
        """
        out = []
        for i in range(len(self._val)):
            op = self._op[i]
            if op in (OP_CONST, OP_PARAM):
                out.append(self._val[i])
                continue
            a = out[self._p1[i]]
            if op == OP_ADD:
                v = a + out[self._p2[i]]
            elif op == OP_SUB:
                v = a - out[self._p2[i]]
            elif op == OP_MUL:
                v = a * out[self._p2[i]]
            elif op == OP_DIV:
                v = a / out[self._p2[i]]
            elif op == OP_NEG:
                v = -a
            elif op == OP_MAX:
                v = max(a, out[self._p2[i]])
            elif op == OP_EXP:
                v = math.exp(a)
            elif op == OP_LN:
                v = math.log(a)
            elif op == OP_SIN:
                v = math.sin(a)
            elif op == OP_COS:
                v = math.cos(a)
            elif op == OP_SQRT:
                v = math.sqrt(a)
            elif op == OP_SIGMOID:
                v = 1.0 / (1.0 + math.exp(-a)) if a >= 0 else math.exp(a) / (1.0 + math.exp(a))
            elif op == OP_POWI:
                # exponent is recoverable from value only up to sign; replay uses value
                v = self._val[i]
            elif op == OP_SELECT:
                v = a
            else:  # pragma: no cover
                raise AutodiffError(f"unknown op code {op}")
            out.append(v)
        return out


def locate_span(knot_values, x: float):
    """Index m with knots[m] <= x < knots[m+1], or None outside the span.

    Half-open on every interval, so x exactly at the last knot has no span.
    """
    if x < knot_values[0] or x >= knot_values[-1]:
        return None
    m = bisect_right(knot_values, x) - 1
    if m >= len(knot_values) - 1:
        return None
    return m


def finite_difference_check(f, params: np.ndarray, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f(params) -> (value, grad_vector)``; only the value part is used for
    the differencing, so the analytic gradient is checked against an
    estimate that never looks at it.  The relative error for coordinate i
    is ``|g_i - fd_i| / max(1, |g_i|)``.  The caller must keep the
    evaluation point away from kinks (max ties, span boundaries): central
    differences straddling a non-differentiable point are meaningless.
    """
    params = np.asarray(params, dtype=float)
    value, grad = f(params)
    grad = np.asarray(grad, dtype=float)
    if not (_isfinite(value) and np.all(np.isfinite(grad))):
        raise NonFiniteValue("analytic evaluation is not finite")
    worst = 0.0
    for i in range(params.size):
        bumped = params.copy()
        bumped[i] = params[i] + step
        fp = f(bumped)[0]
        bumped[i] = params[i] - step
        fm = f(bumped)[0]
        if not (_isfinite(fp) and _isfinite(fm)):
            raise NonFiniteValue(f"function not finite at params +- step (coord {i})")
        fd = (fp - fm) / (2.0 * step)
        err = abs(grad[i] - fd) / max(1.0, abs(grad[i]))
        if err > worst:
            worst = err
    return worst
