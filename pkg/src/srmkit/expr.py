"""Expression trees used in guards, rewards, awards and constraints.

Numeric expressions are polynomials in counters that stay affine in the
holes. Every numeric expression is normalized once into a list of monomials
``(coefficient, counters, hole)`` so that, for a fixed counter valuation, its
value is an affine form ``const + sum_j coef_j * h_j``. All evaluation paths
(full runs, partial runs, constraint checks) go through :func:`eval_affine`
or :func:`eval_affine_many`, which accumulate terms in the same order; this
is what makes partial evaluation reproduce full runs bit for bit.
"""

from __future__ import annotations

import operator
from dataclasses import dataclass
from typing import Mapping, Sequence, Union

import numpy as np


class ExprError(ValueError):
    pass


class NonAffineError(ExprError):
    pass


class EvalError(RuntimeError):
    """Raised when an expression references a symbol the machine never declared."""


# ---------------------------------------------------------------------------
# numeric layer


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Hole:
    name: str


@dataclass(frozen=True)
class Counter:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Num"


@dataclass(frozen=True)
class Add:
    terms: tuple


@dataclass(frozen=True)
class Mul:
    factors: tuple


Num = Union[Const, Hole, Counter, Neg, Add, Mul]

# ---------------------------------------------------------------------------
# boolean layer

COMPARATORS = ("<=", "<", "==", ">=", ">")

_CMP = {
    "<=": operator.le,
    "<": operator.lt,
    "==": operator.eq,
    ">=": operator.ge,
    ">": operator.gt,
}


@dataclass(frozen=True)
class BoolConst:
    value: bool


@dataclass(frozen=True)
class Event:
    name: str


@dataclass(frozen=True)
class Compare:
    lhs: Num
    op: str
    rhs: Num

    def __post_init__(self):
        if self.op not in _CMP:
            raise ExprError(f"unknown comparator {self.op!r}")


@dataclass(frozen=True)
class And:
    items: tuple


@dataclass(frozen=True)
class Or:
    items: tuple


@dataclass(frozen=True)
class Not:
    item: "BoolExpr"


BoolExpr = Union[BoolConst, Event, Compare, And, Or, Not]


# ---------------------------------------------------------------------------
# free symbols


def holes_in(e) -> set:
    out: set = set()
    _collect(e, Hole, out)
    return out


def counters_in(e) -> set:
    out: set = set()
    _collect(e, Counter, out)
    return out


def events_in(e) -> set:
    out: set = set()
    _collect(e, Event, out)
    return out


def _collect(e, kind, out):
    if isinstance(e, kind):
        out.add(e.name)
    elif isinstance(e, (Add,)):
        for t in e.terms:
            _collect(t, kind, out)
    elif isinstance(e, Mul):
        for t in e.factors:
            _collect(t, kind, out)
    elif isinstance(e, Neg):
        _collect(e.operand, kind, out)
    elif isinstance(e, Compare):
        _collect(e.lhs, kind, out)
        _collect(e.rhs, kind, out)
    elif isinstance(e, (And, Or)):
        for t in e.items:
            _collect(t, kind, out)
    elif isinstance(e, Not):
        _collect(e.item, kind, out)


def substitute_holes(e, values: Mapping[str, float]):
    """Replace holes by constants; returns a structurally new tree."""
    if isinstance(e, Hole):
        return Const(float(values[e.name])) if e.name in values else e
    if isinstance(e, Add):
        return Add(tuple(substitute_holes(t, values) for t in e.terms))
    if isinstance(e, Mul):
        return Mul(tuple(substitute_holes(t, values) for t in e.factors))
    if isinstance(e, Neg):
        return Neg(substitute_holes(e.operand, values))
    if isinstance(e, Compare):
        return Compare(substitute_holes(e.lhs, values), e.op, substitute_holes(e.rhs, values))
    if isinstance(e, And):
        return And(tuple(substitute_holes(t, values) for t in e.items))
    if isinstance(e, Or):
        return Or(tuple(substitute_holes(t, values) for t in e.items))
    if isinstance(e, Not):
        return Not(substitute_holes(e.item, values))
    return e


# ---------------------------------------------------------------------------
# polynomial normal form


@dataclass(frozen=True)
class Monomial:
    coef: float
    counters: tuple  # counter indices, repeated for powers
    hole: int  # hole index or -1


def _normalize(e, hole_index: Mapping[str, int], counter_index: Mapping[str, int]) -> list:
    if isinstance(e, Const):
        return [Monomial(float(e.value), (), -1)]
    if isinstance(e, Hole):
        if e.name not in hole_index:
            raise EvalError(f"undeclared hole {e.name}")
        return [Monomial(1.0, (), hole_index[e.name])]
    if isinstance(e, Counter):
        if e.name not in counter_index:
            raise EvalError(f"undeclared counter {e.name}")
        return [Monomial(1.0, (counter_index[e.name],), -1)]
    if isinstance(e, Neg):
        return [Monomial(-m.coef, m.counters, m.hole) for m in _normalize(e.operand, hole_index, counter_index)]
    if isinstance(e, Add):
        out = []
        for t in e.terms:
            out.extend(_normalize(t, hole_index, counter_index))
        return out
    if isinstance(e, Mul):
        acc = [Monomial(1.0, (), -1)]
        for f in e.factors:
            rhs = _normalize(f, hole_index, counter_index)
            nxt = []
            for a in acc:
                for b in rhs:
                    if a.hole >= 0 and b.hole >= 0:
                        raise NonAffineError("holes must combine affinely")
                    nxt.append(Monomial(a.coef * b.coef, a.counters + b.counters, max(a.hole, b.hole)))
            acc = nxt
        return acc
    raise ExprError(f"not a numeric expression: {e!r}")


def is_affine(e) -> bool:
    holes = {h: i for i, h in enumerate(sorted(holes_in(e)))}
    counters = {c: i for i, c in enumerate(sorted(counters_in(e)))}
    try:
        _normalize(e, holes, counters)
    except NonAffineError:
        return False
    return True


class AffineTemplate:
    """A numeric expression compiled against fixed hole and counter orders.

    ``at(counters)`` returns the affine form ``(const, ((j, coef_j), ...))``
    for the given counter valuation; only nonzero coefficients are kept and
    they are ordered by hole index.
    """

    __slots__ = ("monomials", "hole_free", "counter_free", "_static")

    def __init__(self, e, hole_index, counter_index):
        self.monomials = tuple(_normalize(e, hole_index, counter_index))
        self.hole_free = all(m.hole < 0 for m in self.monomials)
        self.counter_free = all(not m.counters for m in self.monomials)
        self._static = self._build(()) if self.counter_free else None

    @classmethod
    def difference(cls, lhs, rhs, hole_index, counter_index):
        return cls(Add((lhs, Neg(rhs))), hole_index, counter_index)

    def _build(self, counters):
        const = 0.0
        coefs: dict = {}
        for m in self.monomials:
            v = m.coef
            for c in m.counters:
                v *= counters[c]
            if m.hole < 0:
                const += v
            else:
                coefs[m.hole] = coefs.get(m.hole, 0.0) + v
        # -0.0 would otherwise survive into hole-free forms
        const += 0.0
        terms = tuple((j, coefs[j]) for j in sorted(coefs) if coefs[j] != 0.0)
        return const, terms

    def at(self, counters: Sequence[int]):
        if self._static is not None:
            return self._static
        return self._build(counters)


def eval_affine(form, h: Sequence[float]) -> float:
    const, terms = form
    v = const
    for j, c in terms:
        v += c * h[j]
    return v


def eval_affine_many(form, H: np.ndarray) -> np.ndarray:
    """Row-wise :func:`eval_affine`; identical rounding to the scalar path."""
    const, terms = form
    v = np.full(H.shape[0], const, dtype=np.float64)
    for j, c in terms:
        v += c * H[:, j]
    return v


def compare(u, op: str):
    """``u op 0`` for a scalar or array residual ``u``."""
    return _CMP[op](u, 0.0)
