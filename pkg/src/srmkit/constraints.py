"""Symbolic constraints over hole assignments.

A constraint is a conjunction of affine comparisons. Compilation turns each
atom into rows ``u_i(h) = a_i . h + b_i <= 0`` (``< 0`` for strict rows), which
gives an exact membership test and a smooth penalty for gradient descent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .expr import AffineTemplate, Compare, EvalError, NonAffineError, eval_affine, holes_in


class ConstraintError(ValueError):
    pass


class NonAffineAtom(ConstraintError):
    pass


@dataclass(frozen=True)
class ConstraintAtom:
    name: str
    expr: Compare


@dataclass(frozen=True)
class SymbolicConstraint:
    atoms: tuple = ()

    def __len__(self):
        return len(self.atoms)

    def holes(self) -> set:
        out: set = set()
        for a in self.atoms:
            out |= holes_in(a.expr)
        return out


@dataclass(frozen=True, eq=False)
class ConstraintRow:
    a: np.ndarray
    b: float
    name: str
    strict: bool = False
    form: tuple = (0.0, ())  # the same row as an affine form, for scalar evaluation

    def residual(self, h) -> float:
        return eval_affine(self.form, h)


@dataclass(frozen=True, eq=False)
class LinearConstraintSet:
    rows: tuple
    holes: tuple

    def __len__(self):
        return len(self.rows)

    @property
    def A(self) -> np.ndarray:
        if not self.rows:
            return np.zeros((0, len(self.holes)))
        return np.stack([r.a for r in self.rows])

    @property
    def b(self) -> np.ndarray:
        return np.array([r.b for r in self.rows], dtype=np.float64)

    @property
    def strict(self) -> np.ndarray:
        return np.array([r.strict for r in self.rows], dtype=bool)

    @property
    def names(self) -> tuple:
        return tuple(r.name for r in self.rows)


_FLIP = {">=": "<=", ">": "<"}


def compile_constraint(c: SymbolicConstraint, holes: Sequence[str], strict_slack: float = 0.0) -> LinearConstraintSet:
    """Rows ``a.h + b <= 0``; ``>=``/``>`` are negated, ``==`` splits into two rows.

    Strict rows keep ``strict=True`` so that membership stays exact; a
    positive ``strict_slack`` additionally shifts them by that amount.
    """
    holes = tuple(holes)
    hole_index = {hname: i for i, hname in enumerate(holes)}
    rows = []
    for atom in c.atoms:
        e = atom.expr
        if not isinstance(e, Compare):
            raise ConstraintError(f"constraint atom {atom.name} is not a comparison; only conjunctions of comparisons are allowed")
        if e.op == "==":
            parts = [(e.lhs, e.rhs, False), (e.rhs, e.lhs, False)]
        elif e.op in _FLIP:
            parts = [(e.rhs, e.lhs, e.op == ">")]
        else:
            parts = [(e.lhs, e.rhs, e.op == "<")]
        for lhs, rhs, strict in parts:
            try:
                tpl = AffineTemplate.difference(lhs, rhs, hole_index, {})
            except NonAffineError as err:
                raise NonAffineAtom(f"constraint atom {atom.name}: {err}") from None
            except EvalError as err:
                raise ConstraintError(f"constraint atom {atom.name}: {err}") from None
            const, terms = tpl.at(())
            if strict and strict_slack:
                const += strict_slack
            a = np.zeros(len(holes))
            for j, v in terms:
                a[j] = v
            rows.append(ConstraintRow(a, float(const), atom.name, strict, (float(const), terms)))
    return LinearConstraintSet(tuple(rows), holes)


def residuals(lcs: LinearConstraintSet, h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64).reshape(-1)
    if h.shape[0] != len(lcs.holes):
        raise ConstraintError(f"assignment has dimension {h.shape[0]}, constraint expects {len(lcs.holes)}")
    return np.array([r.residual(h) for r in lcs.rows], dtype=np.float64)


def satisfied(lcs: LinearConstraintSet, h):
    """``(ok, u)`` with ``ok`` true iff every row holds at ``h``."""
    u = residuals(lcs, h)
    strict = lcs.strict
    ok = bool(np.all(np.where(strict, u < 0, u <= 0))) if u.size else True
    return ok, u


def violated(lcs: LinearConstraintSet, h) -> tuple:
    """Names of failed atoms, in declaration order and without repeats."""
    _, u = satisfied(lcs, h)
    out = []
    for row, v in zip(lcs.rows, u):
        if (v > 0 or (row.strict and v >= 0)) and row.name not in out:
            out.append(row.name)
    return tuple(out)


def max_residual(lcs: LinearConstraintSet, h) -> float:
    u = residuals(lcs, h)
    return float(u.max()) if u.size else -math.inf


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def penalty(lcs: LinearConstraintSet, h, margin: float = 0.0):
    """Binary cross-entropy of ``sigmoid(relu(u_i + margin))`` against target 0.

    Returns ``(loss, grad)``. The loss is ``n log 2`` and the gradient exactly
    zero wherever every shifted residual is non-positive.
    """
    h = np.asarray(h, dtype=np.float64).reshape(-1)
    u = residuals(lcs, h) + margin
    r = np.maximum(u, 0.0)
    loss = float(np.sum(np.logaddexp(0.0, r)))
    grad = np.zeros_like(h)
    for row, v in zip(lcs.rows, u):
        if v > 0:
            grad += _sigmoid(v) * row.a
    return loss, grad


def sign_only(c: SymbolicConstraint, holes: Sequence[str]) -> SymbolicConstraint:
    """Keep the atoms that bound a single hole against a constant.

    Fallback for machines that do not declare a ``constraint sign`` variant.
    """
    keep = []
    for atom in c.atoms:
        lcs = compile_constraint(SymbolicConstraint((atom,)), holes)
        if all(np.count_nonzero(r.a) == 1 for r in lcs.rows):
            keep.append(atom)
    return SymbolicConstraint(tuple(keep))


def sign_constraint(srm) -> SymbolicConstraint:
    """The machine's declared non-relational constraint, else the filtered one."""
    if srm.sign_constraint is not None:
        return srm.sign_constraint
    return sign_only(srm.constraint or SymbolicConstraint(()), srm.holes)
