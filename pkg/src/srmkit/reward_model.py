"""Tabular surrogate reward ``f(s, a)``: a per-state log-softmax over actions.

``f`` plays two roles. Inside the noisy discriminator
``D_eps(s, a) = exp(f + eps) / (exp(f + eps) + pi_A(a|s))`` it separates expert
from agent pairs, and it is the regression target for the machine's rewards
through the per-step Gaussian term ``1/2 (f - (l - b))^2``. Gradients are
written by hand against the logits table and returned as sparse rows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .policy import log_softmax_rows, sparse_rows


@dataclass
class RewardModel:
    logits: np.ndarray  # (S, A)

    @classmethod
    def zeros(cls, n_states: int, n_actions: int = 7) -> "RewardModel":
        return cls(np.zeros((n_states, n_actions)))


def f(model: RewardModel, s, a):
    """log-softmax of the logits row at ``s``, read at action ``a`` (vectorized)."""
    s = np.asarray(s)
    a = np.asarray(a)
    out = log_softmax_rows(np.atleast_2d(model.logits[s.reshape(-1)]))[np.arange(s.size), a.reshape(-1)]
    return out.reshape(s.shape) if s.ndim else float(out[0])


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def discriminator(fv, eps, log_pi_a):
    """``D_eps`` from ``f``, the noise and ``log pi_A(a|s)``, computed in log space."""
    return np.exp(_log_sigmoid(np.asarray(fv) + eps - np.asarray(log_pi_a)))


def discriminator_at(model: RewardModel, eps, policy_logits, s, a):
    lp = log_softmax_rows(np.atleast_2d(policy_logits[np.asarray(s).reshape(-1)]))[np.arange(np.size(s)), np.asarray(a).reshape(-1)]
    return discriminator(f(model, s, a), eps, lp.reshape(np.shape(s)))


class Pairs(NamedTuple):
    """State-action pairs with ``log pi_A(a|s)`` and the noise drawn for their trajectory."""

    state: np.ndarray
    action: np.ndarray
    log_pi: np.ndarray
    eps: np.ndarray

    @classmethod
    def empty(cls):
        z = np.zeros(0)
        return cls(z.astype(np.int64), z.astype(np.int64), z, z)

    @property
    def size(self) -> int:
        # not __len__: NamedTuple._make relies on len() counting the fields
        return int(self.state.shape[0])


def j_adv(model: RewardModel, expert: Pairs, agent: Pairs) -> float:
    """``sum log D`` over expert pairs plus ``sum log(1 - D)`` over agent pairs."""
    out = 0.0
    if expert.size:
        x = f(model, expert.state, expert.action) + expert.eps - expert.log_pi
        out += float(np.sum(_log_sigmoid(x)))
    if agent.size:
        x = f(model, agent.state, agent.action) + agent.eps - agent.log_pi
        out += float(np.sum(_log_sigmoid(-x)))
    return out


def _through_log_softmax(model, s, a, df):
    """Chain ``d/df`` per pair into the logits rows: ``df * (onehot(a) - softmax)``."""
    L = log_softmax_rows(model.logits[s])
    G = -np.exp(L) * df[:, None]
    G[np.arange(len(s)), a] += df
    return sparse_rows(s, G)


def adv_grad(model: RewardModel, expert: Pairs, agent: Pairs):
    """Gradient of :func:`j_adv` w.r.t. the logits as ``(rows, values)``."""
    parts_s, parts_a, parts_d = [], [], []
    if expert.size:
        D = discriminator(f(model, expert.state, expert.action), expert.eps, expert.log_pi)
        parts_s.append(expert.state), parts_a.append(expert.action), parts_d.append(1.0 - D)
    if agent.size:
        D = discriminator(f(model, agent.state, agent.action), agent.eps, agent.log_pi)
        parts_s.append(agent.state), parts_a.append(agent.action), parts_d.append(-D)
    if not parts_s:
        return np.zeros(0, dtype=np.int64), np.zeros((0, model.logits.shape[1]))
    return _through_log_softmax(model, np.concatenate(parts_s), np.concatenate(parts_a), np.concatenate(parts_d))


def kl_loss(model: RewardModel, s, a, target, weight: float = 1.0) -> float:
    """``weight * sum 1/2 (f(s,a) - target)^2``; ``target`` is the machine reward minus the offset."""
    r = f(model, s, a) - target
    return weight * 0.5 * float(np.sum(r * r))


def kl_grad(model: RewardModel, s, a, target, weight: float = 1.0):
    s = np.asarray(s, dtype=np.int64)
    a = np.asarray(a, dtype=np.int64)
    r = f(model, s, a) - np.asarray(target, dtype=np.float64)
    return _through_log_softmax(model, s, a, weight * r)


def dense(rows, values, shape) -> np.ndarray:
    out = np.zeros(shape)
    out[rows] = values
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_table(path, table: np.ndarray, kind: str, **meta):
    """One JSON object per non-zero row: ``{"kind", "state", "values"}``; a header line carries the shape."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"kind": kind, "shape": list(table.shape), **meta}) + "\n")
        nz = np.flatnonzero(np.any(table.reshape(table.shape[0], -1) != 0, axis=1))
        for s in nz:
            v = table[s]
            fh.write(json.dumps({"state": int(s), "values": v.tolist() if np.ndim(v) else float(v)}) + "\n")


def load_table(path):
    with Path(path).open(encoding="utf-8") as fh:
        head = json.loads(fh.readline())
        table = np.zeros(head["shape"])
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                table[rec["state"]] = rec["values"]
    return table, head
