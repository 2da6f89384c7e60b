import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from machines import ev_bool, near_boundary, random_constraint
from srmkit import load_asset, parse_or_raise
from srmkit.constraints import (
    NonAffineAtom,
    compile_constraint,
    max_residual,
    penalty,
    satisfied,
    sign_constraint,
    sign_only,
    violated,
)
from srmkit.dsl import serialize

DK = load_asset("doorkey.srm")
KC = load_asset("keycorridor.srm")
HOLES = ("?1", "?2", "?3")


def _constraint(text, holes=HOLES):
    srm = parse_or_raise(f"srm X {{ holes {' '.join(holes)}; constraint {text}; state A init; }}")
    return srm.constraint


def _row(lcs, name):
    (r,) = [r for r in lcs.rows if r.name == name]
    return r


def test_doorkey_mu2_row():
    r = _row(compile_constraint(DK.constraint, DK.holes), "mu2")
    assert r.a.tolist() == [0, 0, 0, 1, 1] and r.b == 0


def test_doorkey_mu1_rows():
    lcs = compile_constraint(DK.constraint, DK.holes)
    rows = [r for r in lcs.rows if r.name.startswith("mu1")]
    assert len(rows) == 4
    for k, r in enumerate(rows):
        expect = np.zeros(5)
        expect[k + 1], expect[0] = 1, -1
        assert r.a.tolist() == expect.tolist() and r.b == 0


def test_ge_is_negated():
    (r,) = compile_constraint(_constraint("?3 >= 0"), HOLES).rows
    assert r.a.tolist() == [0, 0, -1] and r.b == 0 and not r.strict


def test_equality_splits():
    lcs = compile_constraint(_constraint("?1 + 1 == ?2"), HOLES)
    assert [r.a.tolist() for r in lcs.rows] == [[1, -1, 0], [-1, 1, 0]]
    assert [r.b for r in lcs.rows] == [1, -1]


def test_strict_rows_keep_flag_and_optional_slack():
    c = _constraint("?1 < 0")
    (r,) = compile_constraint(c, HOLES).rows
    assert r.strict and r.b == 0
    assert not satisfied(compile_constraint(c, HOLES), [0, 0, 0])[0]
    (r,) = compile_constraint(c, HOLES, strict_slack=0.1).rows
    assert r.b == pytest.approx(0.1)


def test_non_affine_atom():
    from srmkit.constraints import ConstraintAtom, SymbolicConstraint
    from srmkit.expr import Compare, Const, Hole, Mul
    c = SymbolicConstraint((ConstraintAtom("bad", Compare(Mul((Hole("?1"), Hole("?2"))), "<=", Const(0.0))),))
    with pytest.raises(NonAffineAtom):
        compile_constraint(c, HOLES)


def test_satisfied_zero_on_homogeneous_rows():
    lcs = compile_constraint(DK.constraint, DK.holes)
    ok, u = satisfied(lcs, np.zeros(5))
    assert ok and np.all(u == 0)


def test_keycorridor_motivating_assignment():
    h = np.array([1.0, 0.0, 0.0, 0.5, 0.1, 0.1, -0.1, -0.1])
    lcs = compile_constraint(sign_constraint(KC), KC.holes)
    ok, _ = satisfied(lcs, h)
    assert not ok and violated(lcs, h) == ("mu8",)
    h[1], h[5] = 0.1, 0.0
    assert satisfied(lcs, h)[0]


def test_sign_constraint_falls_back_to_single_hole_atoms():
    c = sign_constraint(DK)
    assert [a.name for a in c.atoms] == ["mu4"]
    assert sign_only(DK.constraint, DK.holes) == c


def test_sign_constraint_round_trips():
    assert parse_or_raise(serialize(KC)) == KC
    assert [a.name for a in KC.sign_constraint.atoms] == ["mu1", "mu2", "mu3", "mu4", "mu5", "mu6", "mu8", "mu9"]


def test_penalty_feasible():
    lcs = compile_constraint(DK.constraint, DK.holes)
    h = np.array([1.0, 0.2, -0.3, 0.1, -0.2])
    assert satisfied(lcs, h)[0]
    loss, g = penalty(lcs, h)
    assert loss == pytest.approx(len(lcs) * math.log(2), abs=1e-15)
    assert np.all(g == 0)


def test_penalty_single_row_value():
    lcs = compile_constraint(_constraint("?1 <= 0"), HOLES)
    loss, g = penalty(lcs, [2.0, 0, 0])
    assert loss == pytest.approx(2 + math.log1p(math.exp(-2)), abs=1e-12)
    assert loss == pytest.approx(2.1269, abs=1e-4)
    assert g.tolist() == pytest.approx([1 / (1 + math.exp(-2)), 0, 0], abs=1e-15)


def _fd(lcs, h, eps=1e-6, margin=0.0):
    g = np.zeros_like(h)
    for i in range(len(h)):
        e = np.zeros_like(h)
        e[i] = eps
        g[i] = (penalty(lcs, h + e, margin)[0] - penalty(lcs, h - e, margin)[0]) / (2 * eps)
    return g


def test_penalty_gradient_u2_matches_fd():
    lcs = compile_constraint(_constraint("?1 <= 0"), HOLES)
    h = np.array([2.0, 0.0, 0.0])
    g = penalty(lcs, h)[1]
    assert np.allclose(g, _fd(lcs, h), rtol=1e-6, atol=1e-12)


def test_margin_shifts_feasible_region():
    lcs = compile_constraint(_constraint("?1 <= 0"), HOLES)
    assert np.all(penalty(lcs, [-0.1, 0, 0], margin=0.05)[1] == 0)
    assert penalty(lcs, [-0.01, 0, 0], margin=0.05)[1][0] > 0


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_compile_agrees_with_direct_evaluation(seed):
    rng = np.random.default_rng(seed)
    c = random_constraint(rng, HOLES)
    lcs = compile_constraint(c, HOLES)
    for _ in range(5):
        h = rng.choice([-1.0, -0.5, 0.0, 0.5, 1.0], 3) if rng.random() < 0.5 else rng.normal(size=3)
        hv = dict(zip(HOLES, h))
        if any(near_boundary(a.expr, hv, {}) for a in c.atoms):
            continue
        direct = all(ev_bool(a.expr, set(), hv, {}) for a in c.atoms)
        assert satisfied(lcs, h)[0] == direct


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_penalty_gradient(seed):
    rng = np.random.default_rng(seed)
    lcs = compile_constraint(random_constraint(rng, HOLES), HOLES)
    h = rng.normal(size=3) * 2
    u = np.array([r.residual(h) for r in lcs.rows])
    loss, g = penalty(lcs, h)
    if np.all(u <= 0):
        assert np.all(g == 0)
        assert loss == pytest.approx(len(lcs) * math.log(2))
        return
    if np.min(np.abs(u)) < 1e-4:
        return  # finite differences straddle a kink
    fd = _fd(lcs, h)
    assert np.allclose(g, fd, rtol=1e-6, atol=1e-8 * max(1.0, np.abs(g).max()))
    active = [r.a for r, v in zip(lcs.rows, u) if v > 0]
    if any(np.any(a != 0) for a in active) and np.any(np.sum(active, axis=0) != 0):
        assert np.any(g != 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=4), st.integers(0, 3), st.floats(0, 3))
def test_penalty_monotone_in_residuals(us, i, delta):
    # rows ?k <= 0 make u_k = h_k
    holes = tuple(f"?{k + 1}" for k in range(len(us)))
    text = " && ".join(f"{h} <= 0" for h in holes)
    lcs = compile_constraint(_constraint(text, holes), holes)
    i %= len(us)
    h = np.array(us)
    bumped = h.copy()
    bumped[i] += delta
    assert penalty(lcs, bumped)[0] >= penalty(lcs, h)[0]


def test_max_residual():
    lcs = compile_constraint(DK.constraint, DK.holes)
    assert max_residual(lcs, np.zeros(5)) == 0
    assert max_residual(lcs, [1, 0.2, -0.3, 0.6, -0.2]) == pytest.approx(0.4)
