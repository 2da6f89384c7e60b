"""Tabular softmax actor-critic trained with a clipped surrogate objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import kernels


class DivergenceGuard(RuntimeError):
    """Raised when the policy logits blow up."""


@dataclass
class Policy:
    logits: np.ndarray  # (S, A)
    value: np.ndarray  # (S,)

    @classmethod
    def zeros(cls, n_states: int, n_actions: int = kernels.N_ACTIONS) -> "Policy":
        return cls(np.zeros((n_states, n_actions)), np.zeros(n_states))

    @property
    def n_states(self) -> int:
        return self.logits.shape[0]


def softmax_rows(L: np.ndarray) -> np.ndarray:
    z = L - L.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(L: np.ndarray) -> np.ndarray:
    z = L - L.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def action_probs(policy: Policy, s: int) -> np.ndarray:
    if not 0 <= s < policy.n_states:
        raise IndexError(f"state index {s} out of range")
    return softmax_rows(policy.logits[s])


def gae(rewards, values, ends, gamma: float = 0.99, lam: float = 0.95):
    """Advantages and returns over concatenated complete episodes.

    ``ends[i]`` marks the last step of an episode; ``values`` holds V(s_t) for
    every step and the value after an episode's last step is taken as 0.
    """
    rewards = np.ascontiguousarray(rewards, dtype=np.float64)
    values = np.ascontiguousarray(values, dtype=np.float64)
    ends = np.ascontiguousarray(ends, dtype=np.bool_)
    if not (rewards.shape == values.shape == ends.shape):
        raise ValueError("rewards, values and ends must have equal length")
    if rewards.size and not ends[-1]:
        raise ValueError("the last step must close an episode")
    return kernels.gae(rewards, values, ends, float(gamma), float(lam))


class Samples(NamedTuple):
    """Flat per-step training data."""

    state: np.ndarray
    action: np.ndarray
    logp: np.ndarray  # log-prob under the collecting policy
    advantage: np.ndarray
    ret: np.ndarray

    @property
    def size(self) -> int:
        # not __len__: NamedTuple._make relies on len() counting the fields
        return int(self.state.shape[0])


def make_samples(policy: Policy, state, action, logp, rewards, ends, gamma=0.99, lam=0.95) -> Samples:
    state = np.asarray(state, dtype=np.int64)
    adv, ret = gae(rewards, policy.value[state], ends, gamma, lam)
    return Samples(state, np.asarray(action, dtype=np.int64), np.asarray(logp, dtype=np.float64), adv, ret)


# ---------------------------------------------------------------------------
# optimizer


class LazyAdam:
    """Adam that only touches the rows present in each sparse gradient."""

    def __init__(self, shape, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, param: np.ndarray, rows: np.ndarray, grad: np.ndarray, ascend: bool = False):
        self.t += 1
        m = self.b1 * self.m[rows] + (1 - self.b1) * grad
        v = self.b2 * self.v[rows] + (1 - self.b2) * grad * grad
        self.m[rows], self.v[rows] = m, v
        mh = m / (1 - self.b1 ** self.t)
        vh = v / (1 - self.b2 ** self.t)
        delta = self.lr * mh / (np.sqrt(vh) + self.eps)
        param[rows] += delta if ascend else -delta


def sparse_rows(state: np.ndarray, G: np.ndarray):
    """Sum per-sample gradient rows ``G`` into unique state rows."""
    rows, inv = np.unique(state, return_inverse=True)
    G = np.ascontiguousarray(G.reshape(G.shape[0], -1), dtype=np.float64)
    return rows, kernels.scatter_rows(inv.astype(np.int64), G, rows.shape[0])


# ---------------------------------------------------------------------------
# clipped surrogate


@dataclass
class PPOConfig:
    clip: float = 0.2
    epochs: int = 4
    minibatches: int = 8
    entropy_coef: float = 0.01
    lr: float = 0.05
    value_lr: float = 0.1
    gamma: float = 0.99
    lam: float = 0.95
    normalize_advantages: bool = True
    max_mean_abs_logit: float = 1e3


class PPOStats(NamedTuple):
    loss: float
    entropy: float
    clip_fraction: float
    value_loss: float


def clipped_surrogate(ratio, advantage, clip: float = 0.2):
    """Per-sample ``min(r A, clip(r, 1-e, 1+e) A)``."""
    ratio = np.asarray(ratio, dtype=np.float64)
    return np.minimum(ratio * advantage, np.clip(ratio, 1 - clip, 1 + clip) * advantage)


def surrogate_grad(logits_rows, action, logp_old, advantage, clip, entropy_coef):
    """Loss and its gradient w.r.t. each sample's logits row (loss is minimized).

    loss_i = -min(r A, clip(r) A) - c H(pi(.|s_i))
    """
    logp_all = log_softmax_rows(logits_rows)
    p = np.exp(logp_all)
    n = len(action)
    idx = np.arange(n)
    ratio = np.exp(logp_all[idx, action] - logp_old)
    surr = clipped_surrogate(ratio, advantage, clip)
    ent = -(p * logp_all).sum(axis=1)
    # the unclipped branch is the active minimum unless the ratio left the trust region in the helpful direction
    active = ~(((advantage > 0) & (ratio > 1 + clip)) | ((advantage < 0) & (ratio < 1 - clip)))
    onehot = np.zeros_like(p)
    onehot[idx, action] = 1.0
    G = -(active * advantage * ratio)[:, None] * (onehot - p)
    G += entropy_coef * p * (logp_all + ent[:, None])
    loss = -surr - entropy_coef * ent
    clipped = (ratio > 1 + clip) | (ratio < 1 - clip)
    return loss, G, ent, clipped


class PPO:
    def __init__(self, policy: Policy, config: Optional[PPOConfig] = None):
        self.policy = policy
        self.config = config or PPOConfig()
        self.opt = LazyAdam(policy.logits.shape, self.config.lr)
        self.vopt = LazyAdam(policy.value.shape, self.config.value_lr)

    def update(self, samples: Samples, rng: np.random.Generator) -> PPOStats:
        return ppo_update(self.policy, samples, self.config, rng, self.opt, self.vopt)


def ppo_update(policy: Policy, samples: Samples, config: PPOConfig, rng: np.random.Generator,
               opt: Optional[LazyAdam] = None, vopt: Optional[LazyAdam] = None) -> PPOStats:
    n = samples.size
    if n == 0:
        raise ValueError("empty batch")
    opt = opt or LazyAdam(policy.logits.shape, config.lr)
    vopt = vopt or LazyAdam(policy.value.shape, config.value_lr)
    adv = samples.advantage
    if config.normalize_advantages and n > 1:
        sd = adv.std()
        adv = (adv - adv.mean()) / (sd + 1e-8)
    losses, ents, clips, vls = [], [], [], []
    n_mb = max(1, min(config.minibatches, n))
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        for mb in np.array_split(perm, n_mb):
            s, a = samples.state[mb], samples.action[mb]
            loss, G, ent, clipped = surrogate_grad(policy.logits[s], a, samples.logp[mb], adv[mb],
                                                   config.clip, config.entropy_coef)
            rows, g = sparse_rows(s, G / len(mb))
            opt.step(policy.logits, rows, g)
            verr = policy.value[s] - samples.ret[mb]
            vrows, vg = sparse_rows(s, (verr / len(mb))[:, None])
            vopt.step(policy.value, vrows, vg[:, 0])
            losses.append(loss.mean())
            ents.append(ent.mean())
            clips.append(clipped.mean())
            vls.append(0.5 * float(np.mean(verr ** 2)))
            touched = policy.logits[rows]
            if not np.all(np.isfinite(touched)) or np.abs(touched).mean() > config.max_mean_abs_logit:
                raise DivergenceGuard(f"mean |logit| {np.abs(touched).mean():.3g} exceeds {config.max_mean_abs_logit}")
    return PPOStats(float(np.mean(losses)), float(np.mean(ents)), float(np.mean(clips)), float(np.mean(vls)))
