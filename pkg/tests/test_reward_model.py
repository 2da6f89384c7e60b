import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from srmkit import reward_model as rm
from srmkit.policy import log_softmax_rows
from srmkit.reward_model import Pairs, RewardModel


def _pairs(rng, n, S=5, eps_scale=1.0):
    s = rng.integers(0, S, n)
    a = rng.integers(0, 7, n)
    return Pairs(s, a, np.log(rng.dirichlet(np.ones(7), n)[np.arange(n), a]), rng.normal(size=n) * eps_scale)


def _fd(fun, L, eps=1e-5):
    G = np.zeros_like(L)
    for idx in np.ndindex(*L.shape):
        P, M = L.copy(), L.copy()
        P[idx] += eps
        M[idx] -= eps
        G[idx] = (fun(P) - fun(M)) / (2 * eps)
    return G


def test_zero_logits():
    m = RewardModel.zeros(3)
    assert rm.f(m, 1, 4) == pytest.approx(math.log(1 / 7), abs=1e-15)
    assert rm.f(m, 1, 4) == pytest.approx(-1.9459, abs=1e-4)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_f_is_log_probability(seed):
    rng = np.random.default_rng(seed)
    m = RewardModel(rng.normal(size=(4, 7)) * 5)
    for s in range(4):
        vals = rm.f(m, np.full(7, s), np.arange(7))
        assert np.all(vals <= 0)
        assert abs(np.exp(vals).sum() - 1) < 1e-12


def test_discriminator_examples():
    assert rm.discriminator(math.log(0.25), 0.0, math.log(0.25)) == pytest.approx(0.5)
    assert rm.discriminator(math.log(0.5), 0.0, math.log(0.25)) == pytest.approx(2 / 3)
    assert rm.discriminator(math.log(0.5), 50.0, math.log(0.25)) == pytest.approx(1.0)
    assert rm.discriminator(math.log(0.5), -800.0, math.log(0.25)) >= 0


def test_discriminator_at_uses_policy():
    m = RewardModel.zeros(2)
    pol = np.zeros((2, 7))
    assert rm.discriminator_at(m, 0.0, pol, np.array([0, 1]), np.array([3, 5])).tolist() == pytest.approx([0.5, 0.5])


@pytest.mark.parametrize("seed", range(10))
def test_adv_grad_matches_fd(seed):
    rng = np.random.default_rng(seed)
    L = rng.normal(size=(5, 7))
    ex, ag = _pairs(rng, 8), _pairs(rng, 12)
    rows, vals = rm.adv_grad(RewardModel(L), ex, ag)
    G = rm.dense(rows, vals, L.shape)
    fd = _fd(lambda X: rm.j_adv(RewardModel(X), ex, ag), L)
    assert np.allclose(G, fd, rtol=1e-4, atol=1e-8)


def test_single_expert_pair_closed_form():
    rng = np.random.default_rng(0)
    L = rng.normal(size=(1, 7))
    lp = math.log(0.2)
    ex = Pairs(np.array([0]), np.array([2]), np.array([lp]), np.array([0.0]))
    rows, vals = rm.adv_grad(RewardModel(L), ex, Pairs.empty())
    p = np.exp(log_softmax_rows(L))[0]
    D = rm.discriminator(math.log(p[2]), 0.0, lp)
    assert vals[0, 2] == pytest.approx((1 - D) * (1 - p[2]), rel=1e-12)
    fd = _fd(lambda X: rm.j_adv(RewardModel(X), ex, Pairs.empty()), L, eps=1e-6)
    assert vals[0, 2] == pytest.approx(fd[0, 2], rel=1e-6)


def test_empty_agent_batch_is_expert_term():
    rng = np.random.default_rng(1)
    m = RewardModel(rng.normal(size=(5, 7)))
    ex, ag = _pairs(rng, 6), _pairs(rng, 6)
    only = rm.dense(*rm.adv_grad(m, ex, Pairs.empty()), m.logits.shape)
    both = rm.dense(*rm.adv_grad(m, ex, ag), m.logits.shape)
    agent = rm.dense(*rm.adv_grad(m, Pairs.empty(), ag), m.logits.shape)
    assert np.allclose(only + agent, both, atol=1e-15)


def test_kl_examples():
    m = RewardModel(np.zeros((2, 7)))
    s, a = np.array([0]), np.array([1])
    f0 = rm.f(m, 0, 1)
    assert rm.kl_loss(m, s, a, np.array([f0])) == 0
    rows, vals = rm.kl_grad(m, s, a, np.array([f0]))
    assert np.all(vals == 0)
    # residual f - (l - b) = -1 gives loss 0.5 and dloss/df = -1
    assert rm.kl_loss(m, s, a, np.array([f0 + 1])) == pytest.approx(0.5)
    rows, vals = rm.kl_grad(m, s, a, np.array([f0 + 1]))
    p = np.full(7, 1 / 7)
    onehot = np.eye(7)[1]
    assert vals[0] == pytest.approx(-1 * (onehot - p))


@pytest.mark.parametrize("seed", range(10))
def test_kl_grad_matches_fd(seed):
    rng = np.random.default_rng(seed)
    L = rng.normal(size=(4, 7))
    s, a = rng.integers(0, 4, 10), rng.integers(0, 7, 10)
    target = rng.normal(size=10) - 2
    G = rm.dense(*rm.kl_grad(RewardModel(L), s, a, target, weight=0.7), L.shape)
    fd = _fd(lambda X: rm.kl_loss(RewardModel(X), s, a, target, weight=0.7), L)
    assert np.allclose(G, fd, rtol=1e-6, atol=1e-9)


def test_gaussian_kl_by_integration():
    rng = np.random.default_rng(0)
    x = np.linspace(-30, 30, 600_001)
    dx = x[1] - x[0]
    for _ in range(5):
        f, l = rng.normal(size=2) * 2
        p = np.exp(-0.5 * (x - f) ** 2) / math.sqrt(2 * math.pi)
        logp = -0.5 * (x - f) ** 2
        logq = -0.5 * (x - l) ** 2
        kl = float(np.sum(p * (logp - logq)) * dx)
        assert kl == pytest.approx(0.5 * (f - l) ** 2, abs=1e-6)


def test_saddle_antisymmetry_monte_carlo():
    rng = np.random.default_rng(0)
    e = rng.normal(size=10**6)
    v = (1 - np.exp(e)) / (1 + np.exp(e))
    se = v.std(ddof=1) / math.sqrt(v.size)
    assert abs(v.mean()) < 3 * se


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    T = np.zeros((20, 7))
    T[[2, 5, 11]] = rng.normal(size=(3, 7))
    p = tmp_path / "m.jsonl"
    rm.save_table(p, T, "reward_model_logits", note="x")
    back, head = rm.load_table(p)
    assert np.array_equal(back, T)
    assert head["kind"] == "reward_model_logits" and head["note"] == "x"
    assert len(p.read_text().splitlines()) == 4
