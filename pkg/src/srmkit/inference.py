"""Hierarchical inference of hole values from demonstrations.

One iteration:

1. roll out ``m`` episodes with the current policy;
2. reward them with the machine concretized at the sampler mean;
3. take a PPO step on those rewards;
4. draw ``K`` hole samples and evaluate them on all trajectories through
   cached partial runs;
5. move the reward model up the noisy adversarial objective and down the
   squared error to the sampled machine rewards;
6. move the sampler down the squared error (score-function gradient) and
   the constraint penalty at its mean, plus an entropy bonus.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from . import gridworld as gw
from . import reward_model as rm
from .constraints import LinearConstraintSet, compile_constraint, max_residual, penalty, satisfied, sign_constraint
from .core import Srm, Trajectory, run
from .partial import PartialRun
from .policy import LazyAdam, Policy, PPO, PPOConfig, log_softmax_rows, make_samples

log = logging.getLogger(__name__)

CSV_HEADER = "iter,frames,avg_return,j_adv,j_soft,j_con,max_residual"


class NonFiniteGradient(FloatingPointError):
    pass


class DimensionMismatch(ValueError):
    pass


# ---------------------------------------------------------------------------
# sampler


@dataclass
class HoleSampler:
    mu: np.ndarray
    logvar: np.ndarray
    b: float = 0.0

    @classmethod
    def init(cls, n_holes: int, std: float = 0.5, b: float = 0.0) -> "HoleSampler":
        return cls(np.zeros(n_holes), np.full(n_holes, 2.0 * math.log(std)), float(b))

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(0.5 * self.logvar)

    @property
    def dim(self) -> int:
        return int(self.mu.shape[0])

    def copy(self) -> "HoleSampler":
        return HoleSampler(self.mu.copy(), self.logvar.copy(), self.b)


def log_density(sampler: HoleSampler, H) -> np.ndarray:
    H = np.atleast_2d(H)
    z = (H - sampler.mu) / sampler.sigma
    return -0.5 * np.sum(z * z + sampler.logvar + math.log(2 * math.pi), axis=1)


def sample_holes(sampler: HoleSampler, K: int, rng: np.random.Generator):
    """``K`` assignments ``mu + sigma * z`` and their log-densities."""
    if K < 1:
        raise ValueError("K must be at least 1")
    H = sampler.mu + sampler.sigma * rng.standard_normal((K, sampler.dim))
    return H, log_density(sampler, H)


def most_likely(sampler: HoleSampler) -> np.ndarray:
    return sampler.mu.copy()


def score_function_grad(sampler: HoleSampler, H, g, baseline: bool = True):
    """Estimate of ``d/d(mu, logvar) E_q[g]`` from samples ``H`` with values ``g``.

    With ``baseline`` each sample is centred on the mean of the *other*
    samples, which keeps the estimate unbiased; it is skipped for ``K = 1``.
    """
    H = np.atleast_2d(np.asarray(H, dtype=np.float64))
    g = np.asarray(g, dtype=np.float64)
    K = g.shape[0]
    if baseline and K > 1:
        w = (g - g.mean()) * (K / (K - 1))
    else:
        w = g
    z = (H - sampler.mu) / sampler.sigma
    d_mu = z / sampler.sigma
    d_lv = 0.5 * (z * z - 1.0)
    return (w[:, None] * d_mu).mean(axis=0), (w[:, None] * d_lv).mean(axis=0)


def score_function_terms(sampler: HoleSampler, H, g):
    """Per-sample terms whose mean is the raw (baseline-free) estimator; for error bars."""
    H = np.atleast_2d(H)
    z = (H - sampler.mu) / sampler.sigma
    return np.asarray(g)[:, None] * z / sampler.sigma


# ---------------------------------------------------------------------------
# objectives


@dataclass(eq=False)
class EvalSet:
    """Trajectories with their partial runs and reward-model lookups."""

    trajectories: list
    partial: list
    state: list  # per trajectory, state indices for each step
    action: list

    @classmethod
    def build(cls, srm: Srm, trajectories: Sequence[Trajectory]) -> "EvalSet":
        trajectories = list(trajectories)
        for tau in trajectories:
            if tau.state_index is None or tau.actions is None:
                raise ValueError("trajectories need state indices and actions")
        return cls(trajectories, [PartialRun(srm, tau) for tau in trajectories],
                   [np.asarray(t.state_index[:len(t)], dtype=np.int64) for t in trajectories],
                   [np.asarray(t.actions[:len(t)], dtype=np.int64) for t in trajectories])

    def __len__(self):
        return len(self.trajectories)

    def rewards(self, H) -> list:
        return [p.substitute_many(H).rewards for p in self.partial]


def _pool_losses(fvals: list, rewards: list, b: float):
    """Per-sample mean over trajectories of sum_t 1/2 (f - (r - b))^2, and its b-derivative."""
    K = rewards[0].shape[0] if rewards else 0
    loss = np.zeros(K)
    db = np.zeros(K)
    for fv, R in zip(fvals, rewards):
        resid = fv[None, :] - (R - b)
        loss += 0.5 * np.sum(resid * resid, axis=1)
        db += np.sum(resid, axis=1)
    n = max(len(rewards), 1)
    return loss / n, db / n


def j_soft_value(H, agent: EvalSet, expert: EvalSet, model: rm.RewardModel, b: float, dim: Optional[int] = None):
    """Per-sample losses ``g(l_k)``: the two trajectory pools weigh equally.

    Returns ``(g, dg/db)``, both of shape (K,).
    """
    H = np.atleast_2d(np.asarray(H, dtype=np.float64))
    for pool in (agent, expert):
        if len(pool) and H.shape[1] != pool.partial[0].n_holes:
            raise DimensionMismatch(f"assignments have {H.shape[1]} holes, machine has {pool.partial[0].n_holes}")
    pools = [p for p in (agent, expert) if len(p)]
    g = np.zeros(H.shape[0])
    db = np.zeros(H.shape[0])
    for pool in pools:
        fvals = [rm.f(model, s, a) for s, a in zip(pool.state, pool.action)]
        lo, d = _pool_losses(fvals, pool.rewards(H), b)
        g += lo / len(pools)
        db += d / len(pools)
    return g, db


def j_soft_fresh(H, srm: Srm, agent: Sequence[Trajectory], expert: Sequence[Trajectory], model: rm.RewardModel, b: float):
    """Same as :func:`j_soft_value` but with full runs; the cross-check oracle."""
    H = np.atleast_2d(np.asarray(H, dtype=np.float64))
    pools = [list(p) for p in (agent, expert) if len(p)]
    g = np.zeros(H.shape[0])
    for pool in pools:
        for k, h in enumerate(H):
            acc = 0.0
            for tau in pool:
                T = len(tau)
                fv = rm.f(model, tau.state_index[:T], tau.actions[:T])
                resid = fv - (run(srm, tau, h).rewards - b)
                acc += 0.5 * float(np.sum(resid * resid))
            g[k] += acc / len(pool) / len(pools)
    return g


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    K: int = 16
    m: int = 16  # episodes per iteration
    iterations: int = 200
    alpha: float = 1e-3  # reward model step
    beta: float = 3e-4  # sampler step
    eta: float = 1e8  # constraint weight
    sampler_entropy: float = 1e-2
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    epochs: int = 4
    minibatches: int = 8
    batch_size: int = 128  # minimum env steps per iteration
    policy_lr: float = 0.05
    value_lr: float = 0.1
    policy_entropy: float = 0.01
    kl_weight: float = 1.0
    noise_draws: int = 1
    inner_steps: int = 1  # reward-model and sampler steps per iteration
    warmup: int = 0  # extra such steps on the first batch, before the first policy step
    constraint_step: Optional[float] = None  # norm cap of the eta-scaled step; None means 2 beta sqrt(d)
    constraint_margin: float = 0.0
    init_std: float = 0.5
    use_constraint: bool = True
    sign_only: bool = False
    max_frames: Optional[int] = None
    target_return: Optional[float] = None  # stop once the rolling mean return reaches this
    window: int = 32  # episodes in the rolling mean
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.m < 1:
            raise ValueError("m must be at least 1")
        if self.noise_draws < 1:
            raise ValueError("noise_draws must be at least 1")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Step sizes suited to tabular models and short runs."""
        base = dict(m=8, alpha=0.05, beta=0.03, warmup=50, constraint_margin=0.05, iterations=150)
        base.update(overrides)
        return cls(**base)

    def ppo(self) -> PPOConfig:
        return PPOConfig(clip=self.clip, epochs=self.epochs, minibatches=self.minibatches,
                         entropy_coef=self.policy_entropy, lr=self.policy_lr, value_lr=self.value_lr,
                         gamma=self.gamma, lam=self.lam)


class IterationReport(NamedTuple):
    iter: int
    frames: int
    avg_return: float
    j_adv: float
    j_soft: float
    j_con: float
    max_residual: float
    mu: tuple = ()

    def csv_row(self) -> str:
        return f"{self.iter},{self.frames},{self.avg_return:.6g},{self.j_adv:.6g},{self.j_soft:.6g},{self.j_con:.6g},{self.max_residual:.6g}"


# ---------------------------------------------------------------------------
# sampler update


class SamplerOptimizer:
    """Adam on (mu, logvar, b) for the data terms; the constraint term takes a
    separate gradient step of size ``beta * eta`` capped at ``constraint_step``."""

    def __init__(self, dim: int, config: TrainConfig):
        self.adam = LazyAdam((dim * 2 + 1,), config.beta)
        self.config = config

    def step(self, sampler: HoleSampler, grad_data: np.ndarray, grad_con: np.ndarray) -> HoleSampler:
        c = self.config
        if not (np.all(np.isfinite(grad_data)) and np.all(np.isfinite(grad_con))):
            raise NonFiniteGradient("sampler gradient is not finite")
        d = sampler.dim
        theta = np.concatenate([sampler.mu, sampler.logvar, [sampler.b]])
        self.adam.step(theta, np.arange(theta.size), grad_data)
        con = c.beta * c.eta * grad_con
        nrm = float(np.linalg.norm(con))
        cap = c.constraint_step if c.constraint_step is not None else 2.0 * c.beta * math.sqrt(d)
        if nrm > cap:
            con *= cap / nrm
        theta[:d] -= con
        theta[d:2 * d] = np.clip(theta[d:2 * d], -20.0, 5.0)
        return HoleSampler(theta[:d].copy(), theta[d:2 * d].copy(), float(theta[-1]))


def update_sampler(sampler: HoleSampler, H, g, g_db, lcs: Optional[LinearConstraintSet],
                   config: TrainConfig, opt: Optional[SamplerOptimizer] = None) -> HoleSampler:
    """One descent step on ``J_soft + eta J_con - c H(q)``."""
    opt = opt or SamplerOptimizer(sampler.dim, config)
    g = np.asarray(g, dtype=np.float64)
    d_mu, d_lv = score_function_grad(sampler, H, g, baseline=len(g) > 1)
    d_lv = d_lv - config.sampler_entropy * 0.5
    grad_data = np.concatenate([d_mu, d_lv, [float(np.mean(g_db))]])
    grad_con = np.zeros(sampler.dim)
    if lcs is not None and len(lcs):
        _, grad_con = penalty(lcs, sampler.mu, config.constraint_margin)
    return opt.step(sampler, grad_data, grad_con)


# ---------------------------------------------------------------------------
# rollouts and PPO plumbing


def _policy_log_pi(policy: Policy, s, a):
    return log_softmax_rows(policy.logits[s])[np.arange(len(s)), a]


def truncate_at_acceptance(srm: Srm, tau: Trajectory, h) -> Trajectory:
    res = run(srm, tau, h)
    acc = srm.compiled(tau.vocabulary).accepting[res.path_index[1:]]
    hit = np.flatnonzero(acc)
    if hit.size and hit[0] + 1 < len(tau):
        return tau.prefix(int(hit[0]) + 1)
    return tau


def _collect(grid: gw.GridConfig, policy: Policy, m: int, min_frames: int, rng):
    trajs = []
    frames = 0
    while len(trajs) < m or frames < min_frames:
        batch = gw.rollout(grid, policy.logits, m, rng)
        for tau in batch.trajectories():
            trajs.append(tau)
            frames += len(tau)
    return trajs


def _ppo_step(ppo: PPO, trajs: Sequence[Trajectory], rewards: Sequence[np.ndarray], rng):
    policy = ppo.policy
    s = np.concatenate([t.state_index[:len(t)] for t in trajs])
    a = np.concatenate([t.actions for t in trajs])
    r = np.concatenate(rewards)
    ends = np.zeros(len(s), dtype=bool)
    ends[np.cumsum([len(t) for t in trajs]) - 1] = True
    logp = _policy_log_pi(policy, s, a)
    cfg = ppo.config
    samples = make_samples(policy, s, a, logp, r, ends, cfg.gamma, cfg.lam)
    return ppo.update(samples, rng)


# ---------------------------------------------------------------------------
# the loop


@dataclass(eq=False)
class TrainResult:
    policy: Policy
    sampler: HoleSampler
    model: rm.RewardModel
    reports: list
    srm: Srm
    episodes: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))  # (cumulative frames, return)

    @property
    def frames(self) -> int:
        return self.reports[-1].frames if self.reports else 0


def _constraint_set(srm: Srm, config: TrainConfig) -> Optional[LinearConstraintSet]:
    if not config.use_constraint or srm.constraint is None or not srm.constraint.atoms:
        return None
    c = sign_constraint(srm) if config.sign_only else srm.constraint
    return compile_constraint(c, srm.holes)


def _model_and_sampler_step(agent: EvalSet, expert: EvalSet, policy: Policy, model: rm.RewardModel,
                            model_opt: LazyAdam, sampler: HoleSampler, sopt: SamplerOptimizer,
                            lcs: Optional[LinearConstraintSet], config: TrainConfig, rng):
    """Reward-model step then sampler step on fixed trajectory pools."""
    H, _ = sample_holes(sampler, config.K, rng)
    pools = []
    for pool in (expert, agent):
        s = np.concatenate(pool.state)
        a = np.concatenate(pool.action)
        target = np.concatenate([r.mean(axis=0) for r in pool.rewards(H)]) - sampler.b
        pools.append((s, a, target, [len(x) for x in pool.state]))
    # reward model: ascend the noisy adversarial objective, descend the squared error
    j_adv_total = 0.0
    grads = []
    for _ in range(config.noise_draws):
        pairs = []
        for s, a, _, lens in pools:
            eps = np.repeat(rng.standard_normal(len(lens)), lens)
            pairs.append(rm.Pairs(s, a, _policy_log_pi(policy, s, a), eps))
        ex, ag = pairs
        # per-pool means keep the expert and agent terms on the same scale
        j_adv_total += rm.j_adv(model, ex, rm.Pairs.empty()) / len(ex) + rm.j_adv(model, rm.Pairs.empty(), ag) / len(ag)
        r1, g1 = rm.adv_grad(model, ex, rm.Pairs.empty())
        r2, g2 = rm.adv_grad(model, rm.Pairs.empty(), ag)
        grads += [(r1, g1 / len(ex) / config.noise_draws), (r2, g2 / len(ag) / config.noise_draws)]
    for s, a, target, _ in pools:
        r3, g3 = rm.kl_grad(model, s, a, target, config.kl_weight / len(s) / len(pools))
        grads.append((r3, -g3))
    rows = np.unique(np.concatenate([r for r, _ in grads]))
    G = np.zeros((len(rows), model.logits.shape[1]))
    for r, g in grads:
        G[np.searchsorted(rows, r)] += g
    if not np.all(np.isfinite(G)):
        raise NonFiniteGradient("reward model gradient is not finite")
    model_opt.step(model.logits, rows, G, ascend=True)

    g, g_db = j_soft_value(H, agent, expert, model, sampler.b)
    sampler = update_sampler(sampler, H, g, g_db, lcs, config, sopt)
    return sampler, j_adv_total / config.noise_draws, float(np.mean(g))


def algorithm1(srm: Srm, grid: gw.GridConfig, demos: Sequence[Trajectory], config: TrainConfig,
               on_report: Optional[Callable[[IterationReport], None]] = None) -> TrainResult:
    if not demos:
        raise ValueError("need at least one demonstration")
    rng = np.random.default_rng(config.seed)
    n_states = grid.n_states
    policy = Policy.zeros(n_states)
    ppo = PPO(policy, config.ppo())
    model = rm.RewardModel.zeros(n_states)
    model_opt = LazyAdam(model.logits.shape, config.alpha)
    # with f = log(1/|A|) everywhere at the start, this offset makes every target zero, consistent with mu = 0
    sampler = HoleSampler.init(srm.n_holes, config.init_std, b=math.log(model.logits.shape[1]))
    sopt = SamplerOptimizer(srm.n_holes, config)
    lcs = _constraint_set(srm, config)
    full_lcs = compile_constraint(srm.constraint, srm.holes) if srm.constraint is not None and srm.constraint.atoms else None
    demos = list(demos)
    for tau in demos:
        if tau.state_index is None:
            raise ValueError("demonstrations need state indices")
    expert = EvalSet.build(srm, demos)
    reports = []
    episodes = []
    frames = 0
    for it in range(config.iterations):
        mu = most_likely(sampler)
        raw = _collect(grid, policy, config.m, config.batch_size, rng)
        frames = _log_episodes(raw, frames, episodes)
        avg_return = float(np.mean([t.default_rewards.sum() for t in raw]))
        trajs = [truncate_at_acceptance(srm, t, mu) for t in raw]
        if it == 0 and config.warmup:
            # fit reward model and sampler on the first batch before the policy sees any machine reward
            agent = EvalSet.build(srm, trajs)
            for _ in range(config.warmup):
                sampler, _, _ = _model_and_sampler_step(agent, expert, policy, model, model_opt,
                                                        sampler, sopt, lcs, config, rng)
            mu = most_likely(sampler)
            trajs = [truncate_at_acceptance(srm, t, mu) for t in raw]
        agent_rewards = [run(srm, t, mu).rewards for t in trajs]
        _ppo_step(ppo, trajs, agent_rewards, rng)

        agent = EvalSet.build(srm, trajs)
        for _ in range(config.inner_steps):
            sampler, j_adv_val, j_soft_val = _model_and_sampler_step(agent, expert, policy, model, model_opt,
                                                                    sampler, sopt, lcs, config, rng)

        mu_new = most_likely(sampler)
        j_con = penalty(full_lcs, mu_new)[0] if full_lcs is not None else 0.0
        mr = max_residual(full_lcs, mu_new) if full_lcs is not None else float("-inf")
        rep = IterationReport(it, frames, avg_return, j_adv_val, j_soft_val,
                              j_con, mr, tuple(float(x) for x in mu_new))
        reports.append(rep)
        if on_report is not None:
            on_report(rep)
        log.debug("iter %d frames %d return %.3f mu %s", it, frames, avg_return, np.round(mu_new, 3))
        if _should_stop(config, episodes, frames):
            break
    return TrainResult(policy, sampler, model, reports, srm, np.array(episodes).reshape(-1, 2))


def train_ppo(grid: gw.GridConfig, config: TrainConfig, srm: Optional[Srm] = None, h=None,
              on_report: Optional[Callable[[IterationReport], None]] = None) -> TrainResult:
    """PPO on the default reward, or on a fixed concretized machine when ``srm`` is given."""
    rng = np.random.default_rng(config.seed)
    policy = Policy.zeros(grid.n_states)
    ppo = PPO(policy, config.ppo())
    reports = []
    episodes = []
    frames = 0
    hv = None if srm is None else np.asarray(h, dtype=np.float64)
    for it in range(config.iterations):
        raw = _collect(grid, policy, config.m, config.batch_size, rng)
        frames = _log_episodes(raw, frames, episodes)
        avg_return = float(np.mean([t.default_rewards.sum() for t in raw]))
        if srm is None:
            trajs, rewards = raw, [t.default_rewards for t in raw]
        else:
            trajs = [truncate_at_acceptance(srm, t, hv) for t in raw]
            rewards = [run(srm, t, hv).rewards for t in trajs]
        _ppo_step(ppo, trajs, rewards, rng)
        rep = IterationReport(it, frames, avg_return, float("nan"), float("nan"), float("nan"), float("nan"))
        reports.append(rep)
        if on_report is not None:
            on_report(rep)
        if _should_stop(config, episodes, frames):
            break
    return TrainResult(policy, HoleSampler.init(0), rm.RewardModel.zeros(1), reports, srm,
                       np.array(episodes).reshape(-1, 2))


def _log_episodes(trajs, frames: int, episodes: list) -> int:
    for t in trajs:
        frames += len(t)
        episodes.append((frames, float(t.default_rewards.sum())))
    return frames


def _should_stop(config: TrainConfig, episodes, frames: int) -> bool:
    if config.max_frames is not None and frames >= config.max_frames:
        return True
    return config.target_return is not None and frames_to_return(episodes, config.target_return, config.window) is not None


def frames_to_return(episodes, threshold: float, window: int = 32) -> Optional[int]:
    """Frames consumed when the mean return of the last ``window`` episodes first reaches ``threshold``.

    ``episodes`` holds (cumulative frames, return) rows in collection order.
    """
    ep = np.asarray(episodes, dtype=np.float64).reshape(-1, 2)
    if len(ep) < window:
        return None
    c = np.concatenate([[0.0], np.cumsum(ep[:, 1])])
    means = (c[window:] - c[:-window]) / window
    hit = np.flatnonzero(means >= threshold)
    return int(ep[hit[0] + window - 1, 0]) if hit.size else None


def random_feasible(srm: Srm, n: int, rng: np.random.Generator, scale: float = 1.0, max_tries: int = 100000) -> np.ndarray:
    """``n`` assignments drawn uniformly from ``[-scale, scale]^d`` and kept if feasible."""
    lcs = compile_constraint(srm.constraint, srm.holes)
    out = []
    for _ in range(max_tries):
        h = rng.uniform(-scale, scale, srm.n_holes)
        if satisfied(lcs, h)[0]:
            out.append(h)
            if len(out) == n:
                return np.array(out)
    raise RuntimeError("could not find enough feasible assignments")
