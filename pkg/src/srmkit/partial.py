"""Hole-symbolic evaluation of a machine over a fixed trajectory.

Event masks and counter traces do not depend on the holes, so a trajectory
is processed once into *segments*: maximal stretches, starting from a given
``(t, q)``, where every guard is decided without knowing ``h``. A segment
stores the affine reward forms it emits and ends either at the end of the
trajectory or at a *fork*, a step where some guard still depends on the
holes. Substituting assignments walks the segments row-wise and splits the
rows at forks; segments are memoized, so repeated substitution only costs
the affine evaluations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import RunResult, Srm, Trajectory, _check_h
from .expr import eval_affine_many


@dataclass(eq=False)
class BatchRun:
    """Results of several assignments on one trajectory, one row each."""

    rewards: np.ndarray  # (K, T)
    totals: np.ndarray  # (K,)
    path_index: np.ndarray  # (K, T+1)
    dummy_mask: np.ndarray  # (K, T)


class _Segment:
    __slots__ = ("t0", "q0", "t_end", "path", "fired", "fork")

    def __init__(self, t0, q0):
        self.t0, self.q0 = t0, q0
        self.t_end = t0  # first step not covered by the segment
        self.path = None  # machine state after each covered step
        self.fired = []  # (t, compiled rule, reward form, other candidates)
        self.fork = None  # (t, q, [(compiled rule, True | Residual)]) or None


class PartialRun:
    """A trajectory pre-processed for repeated evaluation under many ``h``."""

    def __init__(self, srm: Srm, tau: Trajectory):
        self.srm = srm
        self.tau = tau
        self.cs = cs = srm.compiled(tau.vocabulary)
        self.events = tau.events
        self.T = T = len(tau)
        self.counters = cs.counter_trace(self.events)
        # steps at which some state could fire; everything else is a dummy step
        live = np.zeros(T, dtype=bool)
        for ev in np.unique(self.events):
            if not all(cs.quiet(q, int(ev)) for q in range(len(srm.states))):
                live |= self.events == ev
        self.live = np.flatnonzero(live)
        self._segments: dict = {}
        self._windows: dict = {}
        self._root = self._segment(0, cs.state_index[srm.init])

    @property
    def n_holes(self) -> int:
        return self.srm.n_holes

    @property
    def fork_times(self) -> tuple:
        """Steps whose guard outcome depends on the holes (materialized so far)."""
        return tuple(sorted({s.fork[0] for s in self._segments.values() if s.fork is not None}))

    @property
    def hole_free(self) -> bool:
        """True when the reachable guard decisions never depend on ``h``."""
        return self._root.fork is None

    # -- segment construction -------------------------------------------------

    def _segment(self, t0: int, q: int) -> _Segment:
        key = (t0, q)
        seg = self._segments.get(key)
        if seg is not None:
            return seg
        seg = _Segment(t0, q)
        cs = self.cs
        path = np.empty(self.T - t0, dtype=np.int64)
        start = int(np.searchsorted(self.live, t0))
        cur_t = t0
        for t in self.live[start:]:
            t = int(t)
            path[cur_t - t0:t - t0] = q
            cur_t = t
            ev = int(self.events[t])
            if cs.quiet(q, ev):
                continue
            cnt = self.counters[t]
            cands = []
            for cr in cs.rules_by_state[q]:
                v = cr.guard_partial(ev, cnt)
                if v is not False:
                    cands.append((cr, v))
            if not cands:
                continue
            if cands[0][1] is not True:
                seg.fork = (t, q, cands)
                seg.t_end = t
                seg.path = path[:t - t0]
                self._segments[key] = seg
                return seg
            cr = cands[0][0]
            seg.fired.append((t, cr, cr.reward.at(cnt), cands[1:]))
            q = cr.dst
            path[t - t0] = q
            cur_t = t + 1
        path[cur_t - t0:] = q
        seg.t_end = self.T
        seg.path = path
        self._segments[key] = seg
        return seg

    def _window(self, t, cr):
        key = (t, cr.index)
        w = self._windows.get(key)
        if w is None:
            start, locs = self.cs.hindsight_window(self.events, t, cr)
            ct = self.counters[t]
            w = (start, [(loc, tpl.at(ct)) for loc, tpl in locs])
            self._windows[key] = w
        return w

    # -- substitution -------------------------------------------------------

    def _evaluate(self, H: np.ndarray, overlaps: Optional[list] = None):
        K, T = H.shape[0], self.T
        rewards = np.zeros((K, T), dtype=np.float64)
        dummy = np.ones((K, T), dtype=bool)
        path = np.empty((K, T + 1), dtype=np.int64)
        path[:, 0] = self._root.q0
        triggers = []
        stack = [(self._root, np.arange(K))]
        while stack:
            seg, rows = stack.pop()
            Hr = H[rows]
            path[rows, seg.t0 + 1:seg.t_end + 1] = seg.path
            for t, cr, form, others in seg.fired:
                rewards[rows, t] = eval_affine_many(form, Hr)
                dummy[rows, t] = False
                if cr.awards is not None:
                    triggers.append((t, cr, rows))
                if overlaps is not None and others:
                    hit = np.zeros(len(rows), dtype=bool)
                    for _, v in others:
                        hit |= True if v is True else v.evaluate_many(Hr)
                    overlaps.extend((int(r), t) for r in rows[hit])
            if seg.fork is None:
                continue
            t, q, cands = seg.fork
            choice = np.full(len(rows), -1, dtype=np.int64)
            enabled = np.zeros(len(rows), dtype=np.int64)
            for i, (cr, v) in enumerate(cands):
                m = np.ones(len(rows), dtype=bool) if v is True else v.evaluate_many(Hr)
                choice[(choice < 0) & m] = i
                enabled += m
            if overlaps is not None:
                overlaps.extend((int(r), t) for r in rows[enabled > 1])
            cnt = self.counters[t]
            nxt: dict = {}
            for i in np.unique(choice):
                sub = rows[choice == i]
                if i < 0:
                    dst = q
                else:
                    cr = cands[i][0]
                    rewards[sub, t] = eval_affine_many(cr.reward.at(cnt), H[sub])
                    dummy[sub, t] = False
                    if cr.awards is not None:
                        triggers.append((t, cr, sub))
                    dst = cr.dst
                path[sub, t + 1] = dst
                nxt.setdefault(dst, []).append(sub)
            for dst, parts in nxt.items():
                stack.append((self._segment(t + 1, dst), np.sort(np.concatenate(parts))))
        triggers.sort(key=lambda x: x[0])
        for t, cr, rows in triggers:
            start, locs = self._window(t, cr)
            rewards[rows, start:t] = 0.0
            for loc, form in locs:
                if loc >= 0:
                    rewards[rows, loc] = eval_affine_many(form, H[rows])
        return rewards, path, dummy

    def substitute_many(self, H) -> BatchRun:
        H = np.atleast_2d(np.asarray(H, dtype=np.float64))
        if H.shape[1] != self.n_holes:
            raise ValueError(f"assignments have dimension {H.shape[1]}, machine declares {self.n_holes}")
        rewards, path, dummy = self._evaluate(H)
        totals = np.array([math.fsum(r) for r in rewards], dtype=np.float64)
        return BatchRun(rewards, totals, path, dummy)

    def substitute(self, h) -> RunResult:
        h = np.asarray(_check_h(self.srm, h), dtype=np.float64)
        overlaps: list = []
        rewards, path, dummy = self._evaluate(h[None, :], overlaps)
        ov = tuple(sorted({t for _, t in overlaps}))
        return RunResult(path[0], rewards[0], math.fsum(rewards[0]), dummy[0], self.srm.states, ov)

    def affine_rewards(self):
        """``(M, c)`` with ``rewards = M @ h + c``; only for fork-free runs."""
        if not self.hole_free:
            raise ValueError("guard outcomes depend on the holes; rewards are only piecewise affine")
        d = self.n_holes
        M = np.zeros((self.T, d))
        c = np.zeros(self.T)

        def put(t, form):
            M[t] = 0.0
            c[t] = form[0]
            for j, v in form[1]:
                M[t, j] = v

        for t, cr, form, _ in self._root.fired:
            put(t, form)
        for t, cr, form, _ in self._root.fired:
            if cr.awards is None:
                continue
            start, locs = self._window(t, cr)
            M[start:t] = 0.0
            c[start:t] = 0.0
            for loc, f in locs:
                if loc >= 0:
                    put(loc, f)
        return M, c


def partial_evaluate(srm: Srm, tau: Trajectory) -> PartialRun:
    return PartialRun(srm, tau)
