"""Hot loops.

Every kernel exists as a loop body written in the numba-compatible subset
(``*_loop``) and, where the operation vectorizes, as a numpy formulation
(``*_numpy``). The public names are bound at import time: numba-compiled
loops by default, the numpy/pure-Python versions when ``SRMKIT_DISABLE_NUMBA``
is set or numba is not importable. Both paths produce identical trajectories;
floating-point outputs agree up to last-bit differences in ``exp``/``log``.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

NUMBA_ENABLED = numba is not None and os.environ.get("SRMKIT_DISABLE_NUMBA", "").lower() not in ("1", "true", "yes")


def _jit(fn):
    if NUMBA_ENABLED:
        return numba.njit(cache=True, nogil=True)(fn)
    return fn


# -- gridworld layout constants ---------------------------------------------

# state vector slots
AR, AC, HOLD, DOOR, KR, KC, DROW, TSTEP = range(8)
STATE_DIM = 8

LOCKED, CLOSED, OPEN = 0, 1, 2

UP, DOWN, LEFT, RIGHT, PICKUP, DROP, TOGGLE = range(7)
N_ACTIONS = 7

EV_PICKUP, EV_DROP, EV_OPEN, EV_CLOSE, EV_UNLOCK, EV_GOAL = (1 << i for i in range(6))

FREE, WALL, GOAL = 0, 1, 3

# geometry vector slots
G_SIZE, G_WALLCOL, G_GOALR, G_GOALC, G_MAXSTEPS, G_BINARY = range(6)

_DR = np.array([-1, 1, 0, 0], dtype=np.int64)
_DC = np.array([0, 0, -1, 1], dtype=np.int64)


# -- counters -----------------------------------------------------------------


def _counter_trace_loop(events, inc_bit, reset_bit):
    T = events.shape[0]
    out = np.zeros(T, dtype=np.int64)
    v = 0
    for t in range(T):
        out[t] = v
        ev = events[t]
        if reset_bit >= 0 and (ev >> reset_bit) & 1:
            v = 0
        if inc_bit >= 0 and (ev >> inc_bit) & 1:
            v += 1
    return out


def _counter_trace_numpy(events, inc_bit, reset_bit):
    T = events.shape[0]
    if T == 0:
        return np.zeros(0, dtype=np.int64)
    inc = (events >> inc_bit) & 1 if inc_bit >= 0 else np.zeros(T, dtype=np.int64)
    cs = np.cumsum(inc)
    if reset_bit >= 0:
        idx = np.where((events >> reset_bit) & 1, np.arange(T), -1)
        last = np.maximum.accumulate(idx)
        safe = np.maximum(last, 0)
        base = np.where(last >= 0, cs[safe] - inc[safe], 0)
        after = cs - base
    else:
        after = cs
    out = np.empty(T, dtype=np.int64)
    out[0] = 0
    out[1:] = after[:-1]
    return out


# -- advantage estimation ---------------------------------------------------------


def _gae_loop(rewards, values, ends, gamma, lam):
    n = rewards.shape[0]
    adv = np.empty(n, dtype=np.float64)
    last = 0.0
    for i in range(n - 1, -1, -1):
        if ends[i]:
            next_v = 0.0
            last = 0.0
        else:
            next_v = values[i + 1]
        delta = rewards[i] + gamma * next_v - values[i]
        last = delta + gamma * lam * last
        adv[i] = last
    return adv, adv + values


# -- row scatter for tabular gradients --------------------------------------------


def _scatter_rows_loop(inverse, G, n_rows):
    out = np.zeros((n_rows, G.shape[1]), dtype=np.float64)
    for i in range(inverse.shape[0]):
        r = inverse[i]
        for j in range(G.shape[1]):
            out[r, j] += G[i, j]
    return out


def _scatter_rows_numpy(inverse, G, n_rows):
    out = np.zeros((n_rows, G.shape[1]), dtype=np.float64)
    np.add.at(out, inverse, G)
    return out


# -- gridworld dynamics ---------------------------------------------------------


def _state_index(geo, s):
    n = geo[G_SIZE]
    cells = n * n
    key = 0 if s[KR] < 0 else 1 + s[KR] * n + s[KC]
    return (((s[DROW] - 1) * 3 + s[DOOR]) * (cells + 1) + key) * cells + s[AR] * n + s[AC]


def _events_of(geo, s, a, s2):
    ev = 0
    if s[HOLD] == 0 and s2[HOLD] == 1:
        ev |= EV_PICKUP
    if s[HOLD] == 1 and s2[HOLD] == 0:
        ev |= EV_DROP
    if s[DOOR] == LOCKED and s2[DOOR] == OPEN:
        ev |= EV_UNLOCK | EV_OPEN
    elif s[DOOR] == CLOSED and s2[DOOR] == OPEN:
        ev |= EV_OPEN
    if s[DOOR] == OPEN and s2[DOOR] == CLOSED:
        ev |= EV_CLOSE
    at_goal = s2[AR] == geo[G_GOALR] and s2[AC] == geo[G_GOALC]
    was_goal = s[AR] == geo[G_GOALR] and s[AC] == geo[G_GOALC]
    if at_goal and not was_goal:
        ev |= EV_GOAL
    return ev


def _step_state(grid, geo, s, a, out):
    for i in range(STATE_DIM):
        out[i] = s[i]
    ar = s[AR]
    ac = s[AC]
    wc = geo[G_WALLCOL]
    dr = s[DROW]
    if a < 4:
        nr = ar + _DR[a]
        nc = ac + _DC[a]
        if nr == dr and nc == wc:
            blocked = s[DOOR] != OPEN
        else:
            blocked = grid[nr, nc] == WALL
        if not blocked:
            out[AR] = nr
            out[AC] = nc
    elif a == PICKUP:
        if s[HOLD] == 0 and s[KR] >= 0 and abs(s[KR] - ar) + abs(s[KC] - ac) <= 1:
            out[HOLD] = 1
            out[KR] = -1
            out[KC] = -1
    elif a == DROP:
        if s[HOLD] == 1 and not (ar == dr and ac == wc):
            out[HOLD] = 0
            out[KR] = ar
            out[KC] = ac
    elif a == TOGGLE:
        if abs(dr - ar) + abs(wc - ac) == 1:
            if s[DOOR] == LOCKED:
                if s[HOLD] == 1:
                    out[DOOR] = OPEN
            elif s[DOOR] == CLOSED:
                out[DOOR] = OPEN
            else:
                out[DOOR] = CLOSED
    out[TSTEP] = s[TSTEP] + 1
    ev = _events_of(geo, s, a, out)
    reward = 0.0
    done = False
    if ev & EV_GOAL:
        done = True
        if geo[G_BINARY]:
            reward = 1.0
        else:
            reward = 1.0 - 0.9 * s[TSTEP] / geo[G_MAXSTEPS]
    elif out[TSTEP] >= geo[G_MAXSTEPS]:
        done = True
    return reward, done, ev


_state_index = _jit(_state_index)
_events_of = _jit(_events_of)
_step_state = _jit(_step_state)


def _rollout_loop(grid, geo, init_states, logits, uniforms):
    m = init_states.shape[0]
    L = geo[G_MAXSTEPS]
    n_act = logits.shape[1]
    states = np.zeros((m, L + 1, STATE_DIM), dtype=np.int64)
    sidx = np.zeros((m, L + 1), dtype=np.int64)
    actions = np.zeros((m, L), dtype=np.int64)
    events = np.zeros((m, L), dtype=np.int64)
    rewards = np.zeros((m, L), dtype=np.float64)
    logp = np.zeros((m, L), dtype=np.float64)
    lengths = np.zeros(m, dtype=np.int64)
    s = np.empty(STATE_DIM, dtype=np.int64)
    nxt = np.empty(STATE_DIM, dtype=np.int64)
    p = np.empty(n_act, dtype=np.float64)
    for i in range(m):
        for j in range(STATE_DIM):
            s[j] = init_states[i, j]
        t = 0
        while True:
            for j in range(STATE_DIM):
                states[i, t, j] = s[j]
            k = _state_index(geo, s)
            sidx[i, t] = k
            mx = logits[k, 0]
            for j in range(1, n_act):
                if logits[k, j] > mx:
                    mx = logits[k, j]
            z = 0.0
            for j in range(n_act):
                p[j] = np.exp(logits[k, j] - mx)
                z += p[j]
            u = uniforms[i, t] * z
            a = n_act - 1
            acc = 0.0
            for j in range(n_act):
                acc += p[j]
                if u < acc:
                    a = j
                    break
            actions[i, t] = a
            logp[i, t] = logits[k, a] - mx - np.log(z)
            r, done, ev = _step_state(grid, geo, s, a, nxt)
            events[i, t] = ev
            rewards[i, t] = r
            for j in range(STATE_DIM):
                s[j] = nxt[j]
            t += 1
            if done:
                break
        for j in range(STATE_DIM):
            states[i, t, j] = s[j]
        sidx[i, t] = _state_index(geo, s)
        lengths[i] = t
    return states, sidx, actions, events, rewards, logp, lengths


# -- public bindings --------------------------------------------------------------

if NUMBA_ENABLED:
    counter_trace = _jit(_counter_trace_loop)
    gae = _jit(_gae_loop)
    scatter_rows = _jit(_scatter_rows_loop)
else:
    counter_trace = _counter_trace_numpy
    gae = _gae_loop
    scatter_rows = _scatter_rows_numpy

state_index = _state_index
events_of = _events_of
step_state = _step_state
rollout = _jit(_rollout_loop)


def backend() -> str:
    return "numba" if NUMBA_ENABLED else "numpy"
