"""A two-room key/door/goal gridworld with event extraction and a planner.

Layout: an ``N x N`` grid including the outer walls, a vertical wall at
column ``N // 2`` with one door cell at a random row, the goal in the
bottom-right interior corner. Agent and key start in the left room. The
state is an int64 vector (see ``kernels``) so the same dynamics run inside
the compiled rollout loop.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import kernels as K
from .core import Trajectory

VOCABULARY = ("Pick_up_Key", "Drop_Key", "Open_Door", "Close_Door", "Unlock_Door", "Reach_Goal")
ACTIONS = ("up", "down", "left", "right", "pickup", "drop", "toggle")
DOOR_STATES = ("locked", "closed", "open")


class BadGeometry(ValueError):
    pass


class StepAfterDone(RuntimeError):
    pass


class PlanFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class GridConfig:
    size: int = 6
    max_steps: Optional[int] = None  # defaults to 10 * size**2
    binary_reward: bool = False
    extra_walls: tuple = ()  # (row, col) cells blocked in addition to the layout

    def __post_init__(self):
        object.__setattr__(self, "extra_walls", tuple((int(r), int(c)) for r, c in self.extra_walls))
        n = self.size
        if n < 5:
            raise BadGeometry(f"grid size must be at least 5, got {n}")
        if self.max_steps is not None and self.max_steps < 1:
            raise BadGeometry("max_steps must be positive")
        for r, c in self.extra_walls:
            if not (0 <= r < n and 0 <= c < n):
                raise BadGeometry(f"wall ({r}, {c}) lies outside the grid")
            if (r, c) == self.goal:
                raise BadGeometry("a wall cannot cover the goal")
            if c == self.wall_col:
                raise BadGeometry("extra walls cannot sit on the dividing wall")
        if len(self.left_cells()) < 2:
            raise BadGeometry("the left room needs room for the agent and the key")

    @property
    def horizon(self) -> int:
        return self.max_steps if self.max_steps is not None else 10 * self.size ** 2

    @property
    def wall_col(self) -> int:
        return self.size // 2

    @property
    def goal(self) -> tuple:
        return (self.size - 2, self.size - 2)

    def grid(self) -> np.ndarray:
        n = self.size
        g = np.zeros((n, n), dtype=np.int64)
        g[0, :] = g[-1, :] = g[:, 0] = g[:, -1] = K.WALL
        g[:, self.wall_col] = K.WALL
        for r, c in self.extra_walls:
            g[r, c] = K.WALL
        g[self.goal] = K.GOAL
        return g

    def geometry(self) -> np.ndarray:
        gr, gc = self.goal
        return np.array([self.size, self.wall_col, gr, gc, self.horizon, int(self.binary_reward)], dtype=np.int64)

    def left_cells(self) -> list:
        blocked = set(map(tuple, self.extra_walls))
        return [(r, c) for r in range(1, self.size - 1) for c in range(1, self.wall_col) if (r, c) not in blocked]

    @property
    def n_states(self) -> int:
        n = self.size
        return (n - 2) * 3 * (n * n + 1) * n * n


class GridState(NamedTuple):
    agent_row: int
    agent_col: int
    holding: int
    door: int  # 0 locked, 1 closed, 2 open
    key_row: int  # -1 while held
    key_col: int
    door_row: int
    t: int

    def array(self) -> np.ndarray:
        return np.array(self, dtype=np.int64)

    @classmethod
    def from_array(cls, a) -> "GridState":
        return cls(*(int(x) for x in a))


class EnvOutcome(NamedTuple):
    state: GridState
    reward: float
    done: bool
    events: frozenset


def reset(config: GridConfig, seed) -> GridState:
    rng = np.random.default_rng(seed)
    door_row = int(rng.integers(1, config.size - 1))
    cells = config.left_cells()
    i, j = rng.choice(len(cells), size=2, replace=False)
    (ar, ac), (kr, kc) = cells[int(i)], cells[int(j)]
    return GridState(ar, ac, 0, K.LOCKED, kr, kc, door_row, 0)


def is_done(config: GridConfig, s: GridState) -> bool:
    return (s.agent_row, s.agent_col) == config.goal or s.t >= config.horizon


def events_from_mask(mask: int) -> frozenset:
    return frozenset(e for i, e in enumerate(VOCABULARY) if mask >> i & 1)


def mask_from_events(events) -> int:
    m = 0
    for e in events:
        m |= 1 << VOCABULARY.index(e)
    return m


def extract_events(config: GridConfig, s: GridState, a: int, s2: GridState) -> frozenset:
    return events_from_mask(int(K.events_of(config.geometry(), np.asarray(s, dtype=np.int64), a,
                                            np.asarray(s2, dtype=np.int64))))


def env_step(config: GridConfig, s: GridState, action: int, _cache={}) -> EnvOutcome:
    if is_done(config, s):
        raise StepAfterDone("episode already finished; call reset")
    if not 0 <= int(action) < K.N_ACTIONS:
        raise ValueError(f"unknown action {action!r}")
    key = config
    if key not in _cache:
        _cache[key] = (config.grid(), config.geometry())
    grid, geo = _cache[key]
    out = np.empty(K.STATE_DIM, dtype=np.int64)
    r, done, ev = K.step_state(grid, geo, np.asarray(s, dtype=np.int64), int(action), out)
    return EnvOutcome(GridState.from_array(out), float(r), bool(done), events_from_mask(int(ev)))


def state_index(config: GridConfig, s) -> int:
    return int(K.state_index(config.geometry(), np.asarray(s, dtype=np.int64)))


class DoorKeyEnv:
    """Object wrapper used by the synchronous product."""

    vocabulary = VOCABULARY

    def __init__(self, config: Optional[GridConfig] = None):
        self.config = config or GridConfig()

    def reset(self, seed=None) -> GridState:
        return reset(self.config, seed)

    def step(self, state: GridState, action: int) -> EnvOutcome:
        return env_step(self.config, state, action)


# ---------------------------------------------------------------------------
# expert


def plan(config: GridConfig, start: GridState) -> list:
    """Shortest action sequence from ``start`` to the goal (breadth-first)."""
    grid, geo = config.grid(), config.geometry()
    s0 = np.asarray(start, dtype=np.int64)
    key0 = tuple(s0[:K.TSTEP])
    parent = {key0: None}
    frontier = deque([s0])
    out = np.empty(K.STATE_DIM, dtype=np.int64)
    while frontier:
        s = frontier.popleft()
        for a in range(K.N_ACTIONS):
            _, _, ev = K.step_state(grid, geo, s, a, out)
            k = tuple(out[:K.TSTEP])
            if k in parent:
                continue
            parent[k] = (tuple(s[:K.TSTEP]), a)
            if ev & K.EV_GOAL:
                actions = []
                while parent[k] is not None:
                    k, a = parent[k]
                    actions.append(a)
                return actions[::-1]
            nxt = out.copy()
            nxt[K.TSTEP] = 0  # the planner ignores the clock
            frontier.append(nxt)
    raise PlanFailure("the goal is unreachable from this layout")


def execute(config: GridConfig, start: GridState, actions: Sequence[int]) -> Trajectory:
    grid, geo = config.grid(), config.geometry()
    T = len(actions)
    states = np.empty((T + 1, K.STATE_DIM), dtype=np.int64)
    states[0] = np.asarray(start, dtype=np.int64)
    events = np.zeros(T, dtype=np.int64)
    rewards = np.zeros(T)
    for t, a in enumerate(actions):
        if t > 0 and is_done(config, GridState.from_array(states[t])):
            raise StepAfterDone("plan continues past the end of the episode")
        r, done, ev = K.step_state(grid, geo, states[t], int(a), states[t + 1])
        events[t], rewards[t] = ev, r
    sidx = np.array([K.state_index(geo, s) for s in states], dtype=np.int64)
    return Trajectory(events, VOCABULARY, states, np.asarray(actions, dtype=np.int64), rewards, sidx)


def demonstrate(config: GridConfig, n: int, seed) -> list:
    """``n`` successful expert trajectories on ``n`` distinct layouts when possible."""
    if n < 1:
        raise ValueError("need at least one demonstration")
    seq = np.random.SeedSequence(seed)
    out, seen = [], set()
    attempts = 0
    while len(out) < n:
        child = seq.spawn(1)[0]
        attempts += 1
        start = reset(config, child)
        layout = (start.door_row, start.agent_row, start.agent_col, start.key_row, start.key_col)
        if layout in seen and attempts < 50 * n:
            continue
        seen.add(layout)
        actions = plan(config, start)
        if len(actions) > config.horizon:
            raise PlanFailure(f"shortest plan needs {len(actions)} steps, horizon is {config.horizon}")
        out.append(execute(config, start, actions))
    return out


# ---------------------------------------------------------------------------
# batched rollouts


@dataclass(eq=False)
class RolloutBatch:
    """``m`` episodes from the compiled rollout loop, padded to the horizon."""

    states: np.ndarray  # (m, L+1, 8)
    state_index: np.ndarray  # (m, L+1)
    actions: np.ndarray  # (m, L)
    events: np.ndarray  # (m, L)
    rewards: np.ndarray  # (m, L) default rewards
    logp: np.ndarray  # (m, L)
    lengths: np.ndarray  # (m,)

    def __len__(self):
        return int(self.lengths.shape[0])

    def trajectory(self, i: int) -> Trajectory:
        T = int(self.lengths[i])
        return Trajectory(self.events[i, :T], VOCABULARY, self.states[i, :T + 1], self.actions[i, :T],
                          self.rewards[i, :T], self.state_index[i, :T + 1])

    def trajectories(self) -> list:
        return [self.trajectory(i) for i in range(len(self))]

    @property
    def frames(self) -> int:
        return int(self.lengths.sum())

    def returns(self) -> np.ndarray:
        return self.rewards.sum(axis=1)


def rollout(config: GridConfig, logits: np.ndarray, m: int, rng: np.random.Generator) -> RolloutBatch:
    """Sample ``m`` episodes from the softmax policy ``logits`` (S x 7)."""
    starts = np.stack([reset(config, s).array() for s in rng.integers(0, 2 ** 63 - 1, size=m)])
    u = rng.random((m, config.horizon))
    out = K.rollout(config.grid(), config.geometry(), starts, logits, u)
    return RolloutBatch(*out)


# ---------------------------------------------------------------------------
# line-delimited JSON


def write_trajectories(path, trajectories: Sequence[Trajectory]):
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for ep, tau in enumerate(trajectories):
            for t in range(len(tau)):
                rec = {
                    "episode": ep,
                    "t": t,
                    "state": [int(x) for x in tau.states[t]],
                    "action": int(tau.actions[t]),
                    "events": sorted(tau.event_set(t), key=VOCABULARY.index),
                    "default_reward": float(tau.default_rewards[t]),
                    "next_state": [int(x) for x in tau.states[t + 1]],
                }
                fh.write(json.dumps(rec) + "\n")


def read_trajectories(path, config: Optional[GridConfig] = None) -> list:
    episodes: dict = {}
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                episodes.setdefault(int(rec.get("episode", 0)), []).append(rec)
            except (ValueError, TypeError) as e:
                raise ValueError(f"{path}:{lineno}: malformed record ({e})") from None
    out = []
    for ep in sorted(episodes):
        recs = sorted(episodes[ep], key=lambda r: r["t"])
        try:
            states = [r["state"] for r in recs]
            if recs:
                states.append(recs[-1].get("next_state", recs[-1]["state"]))
            events = [mask_from_events(r["events"]) for r in recs]
            actions = [int(r["action"]) for r in recs]
            rewards = [float(r["default_reward"]) for r in recs]
        except (KeyError, ValueError) as e:
            raise ValueError(f"{path}: episode {ep}: malformed record ({e})") from None
        states = np.asarray(states, dtype=np.int64).reshape(-1, K.STATE_DIM) if states else None
        sidx = None
        if config is not None and states is not None:
            geo = config.geometry()
            sidx = np.array([K.state_index(geo, s) for s in states], dtype=np.int64)
        out.append(Trajectory(np.asarray(events, dtype=np.int64), VOCABULARY, states,
                              np.asarray(actions, dtype=np.int64), np.asarray(rewards), sidx))
    return out
