"""Symbolic reward machines: domain types and execution semantics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Any, Iterable, NamedTuple, Optional, Sequence

import numpy as np

from . import kernels
from .expr import (
    AffineTemplate,
    And,
    BoolConst,
    Compare,
    Event,
    EvalError,
    Not,
    Or,
    compare,
    counters_in,
    eval_affine,
    eval_affine_many,
    events_in,
    holes_in,
    substitute_holes,
)

log = logging.getLogger(__name__)

DUMMY_REWARD = 0.0


class SrmError(ValueError):
    pass


class VocabularyError(SrmError):
    pass


class StreamingRefused(SrmError):
    """Hindsight directives rewrite past rewards and cannot be streamed."""


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class CounterDecl:
    name: str
    inc_on: str
    reset_on: Optional[str] = None


@dataclass(frozen=True)
class Award:
    event: str  # locator: last occurrence of this event inside the window
    reward: Any


@dataclass(frozen=True)
class HindsightDirective:
    """Fires together with its owning rule.

    On firing at step ``t`` the rewards in ``(b, t)`` are zeroed, where ``b``
    is the last step before ``t`` carrying ``zero_since`` (or -1), and each
    award writes its value at the last step in ``(b, t]`` carrying its event.
    """

    zero_since: str
    awards: tuple = ()


@dataclass(frozen=True)
class Rule:
    src: str
    guard: Any
    reward: Any
    dst: str
    hindsight: Optional[HindsightDirective] = None
    priority: int = 0


@dataclass(frozen=True)
class Srm:
    name: str
    states: tuple
    init: str
    accepting: tuple
    holes: tuple
    counters: tuple
    rules: tuple
    constraint: Any = None  # constraints.SymbolicConstraint
    sign_constraint: Any = None  # non-relational variant used by the sign-only ablation
    vocabulary: tuple = ()  # optional closed event vocabulary

    def __post_init__(self):
        if self.init not in self.states:
            raise SrmError(f"initial state {self.init!r} is not declared")
        if len(set(self.states)) != len(self.states):
            raise SrmError("duplicate state ids")
        if len(set(self.holes)) != len(self.holes):
            raise SrmError("duplicate hole ids")
        for s in self.accepting:
            if s not in self.states:
                raise SrmError(f"accepting state {s!r} is not declared")
        known_holes = set(self.holes)
        known_counters = {c.name for c in self.counters}
        for r in self.rules:
            if r.src not in self.states or r.dst not in self.states:
                raise SrmError(f"rule {r.src}->{r.dst} references an undeclared state")
            for e in self._rule_exprs(r):
                if not holes_in(e) <= known_holes:
                    raise SrmError(f"undeclared hole in rule {r.src}->{r.dst}")
                if not counters_in(e) <= known_counters:
                    raise SrmError(f"undeclared counter in rule {r.src}->{r.dst}")
        for c in (self.constraint, self.sign_constraint):
            for atom in (c.atoms if c is not None else ()):
                if not holes_in(atom.expr) <= known_holes:
                    raise SrmError(f"constraint atom {atom.name} uses an undeclared hole")
        if self.vocabulary:
            unknown = self.events() - set(self.vocabulary)
            if unknown:
                raise SrmError(f"events outside the declared vocabulary: {sorted(unknown)}")

    @staticmethod
    def _rule_exprs(r: Rule):
        yield r.guard
        yield r.reward
        if r.hindsight is not None:
            for a in r.hindsight.awards:
                yield a.reward

    @property
    def n_holes(self) -> int:
        return len(self.holes)

    @property
    def has_hindsight(self) -> bool:
        return any(r.hindsight is not None for r in self.rules)

    def events(self) -> set:
        out = {c.inc_on for c in self.counters}
        out |= {c.reset_on for c in self.counters if c.reset_on}
        for r in self.rules:
            for e in self._rule_exprs(r):
                out |= events_in(e)
            if r.hindsight is not None:
                out.add(r.hindsight.zero_since)
                out |= {a.event for a in r.hindsight.awards}
        return out

    def compiled(self, vocabulary: Sequence[str]) -> "CompiledSrm":
        cache = self.__dict__.setdefault("_compiled_cache", {})
        key = tuple(vocabulary)
        if key not in cache:
            cache[key] = CompiledSrm(self, key)
        return cache[key]

    def without_constraint(self) -> "Srm":
        from .constraints import SymbolicConstraint

        return replace(self, constraint=SymbolicConstraint(()))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """A finite trajectory; only ``events`` is read by the machine.

    ``events[t]`` is a bitmask over ``vocabulary`` for step ``t``.
    """

    events: np.ndarray
    vocabulary: tuple
    states: Optional[np.ndarray] = None
    actions: Optional[np.ndarray] = None
    default_rewards: Optional[np.ndarray] = None
    state_index: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "events", np.ascontiguousarray(self.events, dtype=np.int64))

    @classmethod
    def from_events(cls, steps: Iterable[Iterable[str]], vocabulary: Optional[Sequence[str]] = None):
        steps = [frozenset(s) for s in steps]
        if vocabulary is None:
            vocabulary = sorted(set().union(*steps)) if steps else []
        vocabulary = tuple(vocabulary)
        bit = {e: i for i, e in enumerate(vocabulary)}
        masks = np.zeros(len(steps), dtype=np.int64)
        for t, s in enumerate(steps):
            for e in s:
                if e not in bit:
                    raise VocabularyError(f"event {e!r} is not in the vocabulary")
                masks[t] |= 1 << bit[e]
        return cls(masks, vocabulary)

    def __len__(self) -> int:
        return int(self.events.shape[0])

    @property
    def horizon(self) -> int:
        return len(self)

    def event_set(self, t: int) -> frozenset:
        m = int(self.events[t])
        return frozenset(e for i, e in enumerate(self.vocabulary) if m >> i & 1)

    def event_sets(self) -> list:
        return [self.event_set(t) for t in range(len(self))]

    def prefix(self, n: int) -> "Trajectory":
        """The first ``n`` steps."""
        def cut(a, extra=0):
            return None if a is None else a[: n + extra]

        return Trajectory(self.events[:n], self.vocabulary, cut(self.states, 1), cut(self.actions),
                          cut(self.default_rewards), cut(self.state_index))


@dataclass(eq=False)
class RunResult:
    path_index: np.ndarray  # (T+1,) indices into ``state_names``
    rewards: np.ndarray  # (T,)
    total: float
    dummy_mask: np.ndarray  # (T,) before hindsight
    state_names: tuple
    overlaps: tuple = ()

    @property
    def path(self) -> tuple:
        return tuple(self.state_names[i] for i in self.path_index)


class StepResult(NamedTuple):
    next: str
    reward: float
    dummy: bool


# ---------------------------------------------------------------------------
# compilation against an event vocabulary


class Residual:
    """A guard fragment whose truth value still depends on the holes."""

    __slots__ = ("kind", "items", "form", "op")

    def __init__(self, kind, items=(), form=None, op=None):
        self.kind, self.items, self.form, self.op = kind, items, form, op

    def evaluate(self, h) -> bool:
        k = self.kind
        if k == "atom":
            return bool(compare(eval_affine(self.form, h), self.op))
        if k == "and":
            return all([i.evaluate(h) for i in self.items])
        if k == "or":
            return any([i.evaluate(h) for i in self.items])
        return not self.items[0].evaluate(h)

    def evaluate_many(self, H: np.ndarray) -> np.ndarray:
        k = self.kind
        if k == "atom":
            return compare(eval_affine_many(self.form, H), self.op)
        vals = [i.evaluate_many(H) for i in self.items]
        if k == "and":
            return np.logical_and.reduce(vals)
        if k == "or":
            return np.logical_or.reduce(vals)
        return ~vals[0]


_UNKNOWN = object()


class CompiledRule:
    __slots__ = ("index", "rule", "dst", "guard_full", "guard_partial", "guard_static",
                 "guard_has_holes", "reward", "since_bit", "awards")


class CompiledSrm:
    """An SRM bound to a concrete event vocabulary (atoms become bit tests)."""

    def __init__(self, srm: Srm, vocabulary: tuple):
        self.srm = srm
        self.vocabulary = vocabulary
        self.bit = {e: i for i, e in enumerate(vocabulary)}
        self.hole_index = {h: i for i, h in enumerate(srm.holes)}
        self.counter_index = {c.name: i for i, c in enumerate(srm.counters)}
        self.state_index = {s: i for i, s in enumerate(srm.states)}
        self.accepting = np.zeros(len(srm.states), dtype=bool)
        for s in srm.accepting:
            self.accepting[self.state_index[s]] = True
        self.counter_bits = [(self._bit(c.inc_on), self._bit(c.reset_on)) for c in srm.counters]
        order = sorted(range(len(srm.rules)), key=lambda i: (srm.rules[i].priority, i))
        self.rules_by_state = [[] for _ in srm.states]
        for i in order:
            r = srm.rules[i]
            cr = CompiledRule()
            cr.index = i
            cr.rule = r
            cr.dst = self.state_index[r.dst]
            cr.guard_full = self._full(r.guard)
            cr.guard_partial = self._partial(r.guard)
            cr.guard_static = self._static(r.guard)
            cr.guard_has_holes = bool(holes_in(r.guard))
            cr.reward = AffineTemplate(r.reward, self.hole_index, self.counter_index)
            if r.hindsight is not None:
                cr.since_bit = self._bit(r.hindsight.zero_since)
                cr.awards = tuple((self._bit(a.event), AffineTemplate(a.reward, self.hole_index, self.counter_index))
                                  for a in r.hindsight.awards)
            else:
                cr.since_bit, cr.awards = None, None
            self.rules_by_state[self.state_index[r.src]].append(cr)
        self._quiet: dict = {}

    def quiet(self, q: int, ev: int) -> bool:
        """True when no rule leaving ``q`` can fire under event mask ``ev``,
        whatever the counter and hole values are."""
        key = (q, ev)
        v = self._quiet.get(key)
        if v is None:
            v = all(cr.guard_static(ev) is False for cr in self.rules_by_state[q])
            self._quiet[key] = v
        return v

    def _bit(self, name):
        if name is None:
            return -1
        return self.bit.get(name, -1)

    # full evaluation: (events mask, counter values, holes) -> bool
    def _full(self, g):
        if isinstance(g, BoolConst):
            v = g.value
            return lambda ev, cnt, h: v
        if isinstance(g, Event):
            b = self._bit(g.name)
            if b < 0:
                return lambda ev, cnt, h: False
            return lambda ev, cnt, h: (ev >> b) & 1 == 1
        if isinstance(g, Compare):
            tpl = AffineTemplate.difference(g.lhs, g.rhs, self.hole_index, self.counter_index)
            op = g.op
            return lambda ev, cnt, h: bool(compare(eval_affine(tpl.at(cnt), h), op))
        if isinstance(g, And):
            fs = [self._full(i) for i in g.items]

            def f_and(ev, cnt, h):
                for f in fs:
                    if not f(ev, cnt, h):
                        return False
                return True
            return f_and
        if isinstance(g, Or):
            fs = [self._full(i) for i in g.items]

            def f_or(ev, cnt, h):
                for f in fs:
                    if f(ev, cnt, h):
                        return True
                return False
            return f_or
        if isinstance(g, Not):
            f = self._full(g.item)
            return lambda ev, cnt, h: not f(ev, cnt, h)
        raise EvalError(f"not a guard: {g!r}")

    # partial evaluation: (events mask, counter values) -> True | False | Residual
    def _partial(self, g):
        if isinstance(g, (BoolConst, Event)):
            f = self._full(g)
            return lambda ev, cnt: f(ev, cnt, ())
        if isinstance(g, Compare):
            tpl = AffineTemplate.difference(g.lhs, g.rhs, self.hole_index, self.counter_index)
            op = g.op

            def p_cmp(ev, cnt):
                form = tpl.at(cnt)
                if not form[1]:
                    return bool(compare(form[0], op))
                return Residual("atom", form=form, op=op)
            return p_cmp
        if isinstance(g, (And, Or)):
            ps = [self._partial(i) for i in g.items]
            absorbing = isinstance(g, Or)  # True absorbs an Or, False an And
            kind = "or" if absorbing else "and"

            def p_junction(ev, cnt):
                rest = []
                for p in ps:
                    v = p(ev, cnt)
                    if v is absorbing:
                        return absorbing
                    if v is not (not absorbing):
                        rest.append(v)
                if not rest:
                    return not absorbing
                if len(rest) == 1:
                    return rest[0]
                return Residual(kind, items=tuple(rest))
            return p_junction
        if isinstance(g, Not):
            p = self._partial(g.item)

            def p_not(ev, cnt):
                v = p(ev, cnt)
                if v is True or v is False:
                    return not v
                return Residual("not", items=(v,))
            return p_not
        raise EvalError(f"not a guard: {g!r}")

    # static evaluation from the event mask alone: True | False | _UNKNOWN
    def _static(self, g):
        if isinstance(g, (BoolConst, Event)):
            f = self._full(g)
            return lambda ev: f(ev, (), ())
        if isinstance(g, Compare):
            tpl = AffineTemplate.difference(g.lhs, g.rhs, self.hole_index, self.counter_index)
            if tpl.counter_free and tpl.hole_free:
                v = bool(compare(tpl.at(())[0], g.op))
                return lambda ev: v
            return lambda ev: _UNKNOWN
        if isinstance(g, (And, Or)):
            ss = [self._static(i) for i in g.items]
            absorbing = isinstance(g, Or)

            def s_junction(ev):
                unknown = False
                for s in ss:
                    v = s(ev)
                    if v is absorbing:
                        return absorbing
                    if v is _UNKNOWN:
                        unknown = True
                return _UNKNOWN if unknown else (not absorbing)
            return s_junction
        if isinstance(g, Not):
            s = self._static(g.item)

            def s_not(ev):
                v = s(ev)
                return v if v is _UNKNOWN else (not v)
            return s_not
        raise EvalError(f"not a guard: {g!r}")

    # -- history -------------------------------------------------------------

    def counter_trace(self, events: np.ndarray) -> np.ndarray:
        """Counter values seen by the guards at each step, shape (T, C)."""
        T = events.shape[0]
        out = np.zeros((T, len(self.counter_bits)), dtype=np.int64)
        for c, (inc, reset) in enumerate(self.counter_bits):
            out[:, c] = kernels.counter_trace(events, inc, reset)
        return out

    def counters_after(self, before: Sequence[int], ev: int) -> tuple:
        out = []
        for v, (inc, reset) in zip(before, self.counter_bits):
            if reset >= 0 and (ev >> reset) & 1:
                v = 0
            if inc >= 0 and (ev >> inc) & 1:
                v += 1
            out.append(v)
        return tuple(out)

    def hindsight_window(self, events: np.ndarray, t: int, cr: CompiledRule):
        """Zeroed slice ``[start, t)`` and award locations for a trigger at ``t``."""
        start = 0
        if cr.since_bit >= 0:
            hits = np.flatnonzero((events[:t] >> cr.since_bit) & 1)
            if hits.size:
                start = int(hits[-1]) + 1
        locs = []
        for b, tpl in cr.awards:
            loc = -1
            if b >= 0:
                hits = np.flatnonzero((events[start:t + 1] >> b) & 1)
                if hits.size:
                    loc = start + int(hits[-1])
            locs.append((loc, tpl))
        return start, locs

    # -- one step ------------------------------------------------------------

    def fire(self, q: int, ev: int, cnt, h):
        """All enabled rules at ``q`` in priority order."""
        return [cr for cr in self.rules_by_state[q] if cr.guard_full(ev, cnt, h)]


def _check_h(srm: Srm, h) -> list:
    h = [float(x) for x in np.asarray(h, dtype=np.float64).reshape(-1)]
    if len(h) != srm.n_holes:
        raise SrmError(f"hole assignment has dimension {len(h)}, machine declares {srm.n_holes}")
    return h


def _rules_or_raise(srm: Srm, q: str):
    if q not in srm.states:
        raise EvalError(f"unknown state {q!r}")


def step(srm: Srm, q: str, prefix: Trajectory, h) -> StepResult:
    """Resolve the transition taken at the last step of ``prefix``."""
    if len(prefix) == 0:
        raise SrmError("step needs a non-empty trajectory prefix")
    h = _check_h(srm, h)
    _rules_or_raise(srm, q)
    cs = srm.compiled(prefix.vocabulary)
    t = len(prefix) - 1
    cnt = cs.counter_trace(prefix.events)[t]
    enabled = cs.fire(cs.state_index[q], int(prefix.events[t]), cnt, h)
    if not enabled:
        return StepResult(q, DUMMY_REWARD, True)
    if len(enabled) > 1:
        log.debug("overlapping guards at %s: rules %s", q, [cr.index for cr in enabled])
    cr = enabled[0]
    return StepResult(cr.rule.dst, eval_affine(cr.reward.at(cnt), h), False)


def run(srm: Srm, tau: Trajectory, h) -> RunResult:
    """Fold the machine over a whole trajectory, then apply hindsight rewrites."""
    h = _check_h(srm, h)
    cs = srm.compiled(tau.vocabulary)
    events = tau.events
    T = len(tau)
    counters = cs.counter_trace(events)
    path = np.empty(T + 1, dtype=np.int64)
    rewards = np.zeros(T, dtype=np.float64)
    dummy = np.ones(T, dtype=bool)
    q = cs.state_index[srm.init]
    path[0] = q
    triggers = []
    overlaps = []
    for t in range(T):
        ev = int(events[t])
        if not cs.quiet(q, ev):
            cnt = counters[t]
            enabled = cs.fire(q, ev, cnt, h)
            if enabled:
                if len(enabled) > 1:
                    overlaps.append(t)
                cr = enabled[0]
                rewards[t] = eval_affine(cr.reward.at(cnt), h)
                dummy[t] = False
                q = cr.dst
                if cr.awards is not None:
                    triggers.append((t, cr))
        path[t + 1] = q
    for t, cr in triggers:
        start, locs = cs.hindsight_window(events, t, cr)
        rewards[start:t] = 0.0
        for loc, tpl in locs:
            if loc >= 0:
                rewards[loc] = eval_affine(tpl.at(counters[t]), h)
    if overlaps:
        log.debug("%s: %d steps resolved by priority", srm.name, len(overlaps))
    return RunResult(path, rewards, math.fsum(rewards), dummy, srm.states, tuple(overlaps))


# ---------------------------------------------------------------------------
# concretization


@dataclass(frozen=True)
class ConstraintViolation:
    failed: tuple  # ((atom name, residual), ...)

    def __bool__(self):
        return False

    @property
    def names(self) -> tuple:
        return tuple(n for n, _ in self.failed)


@dataclass(frozen=True)
class ConcreteSrm:
    srm: Srm  # hole-free machine
    assignment: tuple

    def run(self, tau: Trajectory) -> RunResult:
        return run(self.srm, tau, ())


def concretize(srm: Srm, h):
    """``L[h/?]`` if the symbolic constraint holds at ``h``, else a violation."""
    from .constraints import compile_constraint, satisfied

    hv = _check_h(srm, h)
    if srm.constraint is not None and srm.constraint.atoms:
        lcs = compile_constraint(srm.constraint, srm.holes)
        ok, residuals = satisfied(lcs, hv)
        if not ok:
            failed = []
            for row, u in zip(lcs.rows, residuals):
                if u > 0 or (row.strict and u >= 0):
                    failed.append((row.name, float(u)))
            return ConstraintViolation(tuple(failed))
    values = dict(zip(srm.holes, hv))
    rules = []
    for r in srm.rules:
        hs = r.hindsight
        if hs is not None:
            hs = HindsightDirective(hs.zero_since, tuple(Award(a.event, substitute_holes(a.reward, values))
                                                         for a in hs.awards))
        rules.append(Rule(r.src, substitute_holes(r.guard, values), substitute_holes(r.reward, values),
                          r.dst, hs, r.priority))
    from .constraints import SymbolicConstraint

    out = replace(srm, holes=(), rules=tuple(rules), constraint=SymbolicConstraint(()))
    return ConcreteSrm(out, tuple(hv))


# ---------------------------------------------------------------------------
# synchronous product


@dataclass(frozen=True)
class ProductState:
    env_state: Any
    q: str
    events: tuple = ()  # event masks seen so far
    counters: tuple = ()  # counter values the next step's guards will see
    done: bool = False


def product_reset(env, srm: Srm, seed) -> ProductState:
    check_vocabulary(env, srm)
    return ProductState(env.reset(seed), srm.init, (), tuple(0 for _ in srm.counters), False)


def check_vocabulary(env, srm: Srm):
    missing = srm.events() - set(env.vocabulary)
    if missing:
        raise VocabularyError(f"machine uses events unknown to the environment: {sorted(missing)}")


def product_step(env, srm: Srm, ps: ProductState, action, h):
    """Advance environment and machine together.

    Returns ``(next product state, env reward, machine reward, done)``.
    """
    if srm.has_hindsight:
        raise StreamingRefused(f"{srm.name} rewrites past rewards; evaluate whole trajectories with run()")
    if ps.done:
        raise SrmError("product episode already finished")
    h = _check_h(srm, h)
    cs = srm.compiled(env.vocabulary)
    out = env.step(ps.env_state, action)
    ev = 0
    for e in out.events:
        ev |= 1 << cs.bit[e]
    q = cs.state_index[ps.q]
    enabled = cs.fire(q, ev, ps.counters, h)
    if enabled:
        cr = enabled[0]
        reward = eval_affine(cr.reward.at(ps.counters), h)
        q = cr.dst
    else:
        reward = DUMMY_REWARD
    done = bool(out.done or cs.accepting[q])
    nxt = ProductState(out.state, srm.states[q], ps.events + (ev,), cs.counters_after(ps.counters, ev), done)
    return nxt, out.reward, reward, done


class Product:
    """Stateful convenience wrapper around :func:`product_step`."""

    def __init__(self, env, srm: Srm, h):
        check_vocabulary(env, srm)
        if srm.has_hindsight:
            raise StreamingRefused(f"{srm.name} rewrites past rewards; evaluate whole trajectories with run()")
        self.env, self.srm, self.h = env, srm, _check_h(srm, h)
        self.state: Optional[ProductState] = None

    def reset(self, seed=None) -> ProductState:
        self.state = product_reset(self.env, self.srm, seed)
        return self.state

    def step(self, action):
        self.state, env_r, srm_r, done = product_step(self.env, self.srm, self.state, action, self.h)
        return self.state, env_r, srm_r, done
