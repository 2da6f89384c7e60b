"""Text format for symbolic reward machines.

Grammar (``#`` starts a line comment)::

    srm NAME {
      events E1 E2 ...;                      # optional closed vocabulary
      holes ?a ?b ...;
      counter C { inc on EV; [reset on EV2;] }
      constraint [NAME:] CMP && CMP ...;
      constraint sign [NAME:] CMP ...;       # optional non-relational variant
      state S [init] [accepting];
      S -> T : GUARD // REWARD [hindsight { zero since EV; award last(EV2) EXPR; ... }] [prio N];
    }

In numeric context a bare identifier is a counter, in boolean context an
event. Guards combine events and comparisons with ``&&``, ``||`` and ``!``;
numeric expressions use ``+``, ``-`` and ``*`` and must stay affine in the
holes.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Union

from .constraints import ConstraintAtom, SymbolicConstraint
from .core import Award, CounterDecl, HindsightDirective, Rule, Srm, SrmError
from .expr import (
    COMPARATORS,
    Add,
    And,
    BoolConst,
    Compare,
    Const,
    Counter,
    Event,
    Hole,
    Mul,
    Neg,
    Not,
    Or,
    counters_in,
    events_in,
    holes_in,
    is_affine,
)


@dataclass(frozen=True)
class SourceSpan:
    file: str
    line: int
    column: int
    length: int = 1

    def __str__(self):
        return f"{self.file}:{self.line}:{self.column}"


@dataclass(frozen=True)
class ParseDiagnostic:
    severity: str  # "error" | "warning"
    message: str
    span: SourceSpan

    def __str__(self):
        return f"{self.span}: {self.severity}: {self.message}"


class SrmParseError(ValueError):
    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("\n".join(str(d) for d in self.diagnostics))


# ---------------------------------------------------------------------------
# lexer

_TOKEN = re.compile(r"""
    (?P<ws>[ \t\r\n]+|\#[^\n]*)
  | (?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<hole>\?[A-Za-z0-9_]+)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>->|//|&&|\|\||<=|>=|==|[{}();:,!<>+\-*])
""", re.VERBOSE)


@dataclass(frozen=True)
class Token:
    kind: str  # num | hole | ident | op | eof
    text: str
    pos: int


class _Fail(Exception):
    def __init__(self, message, tok):
        super().__init__(message)
        self.message, self.tok = message, tok


class _Source:
    def __init__(self, text: str, file: str):
        self.text, self.file = text, file
        self.line_starts = [0] + [m.end() for m in re.finditer("\n", text)]

    def span(self, pos: int, length: int = 1) -> SourceSpan:
        pos = max(0, min(pos, max(len(self.text) - 1, 0)))
        lo, hi = 0, len(self.line_starts) - 1
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if self.line_starts[mid] <= pos:
                lo = mid
            else:
                hi = mid - 1
        col = pos - self.line_starts[lo] + 1
        room = len(self.text) - pos
        return SourceSpan(self.file, lo + 1, col, max(1, min(length, room)) if room > 0 else 1)


def tokenize(text: str, src: _Source):
    toks, pos, diags = [], 0, []
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            diags.append(ParseDiagnostic("error", f"unexpected character {text[pos]!r}", src.span(pos)))
            pos += 1
            continue
        kind = m.lastgroup
        if kind != "ws":
            toks.append(Token(kind, m.group(), pos))
        pos = m.end()
    toks.append(Token("eof", "", len(text)))
    return toks, diags


# ---------------------------------------------------------------------------
# parser


class _Parser:
    def __init__(self, text: str, file: str):
        self.src = _Source(text, file)
        self.toks, self.diags = tokenize(text, self.src)
        self.i = 0
        self.expr_spans: list = []  # (numeric expr, token) for affinity checks

    # token helpers
    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def at(self, text) -> bool:
        t = self.tok
        return t.kind in ("op", "ident") and t.text == text

    def eat(self, text) -> bool:
        if self.at(text):
            self.i += 1
            return True
        return False

    def expect(self, text, what=None) -> Token:
        if not self.at(text):
            raise _Fail(f"expected {what or repr(text)}, found {self._show(self.tok)}", self.tok)
        t = self.tok
        self.i += 1
        return t

    def ident(self, what="identifier") -> Token:
        if self.tok.kind != "ident":
            raise _Fail(f"expected {what}, found {self._show(self.tok)}", self.tok)
        t = self.tok
        self.i += 1
        return t

    @staticmethod
    def _show(t: Token) -> str:
        return "end of input" if t.kind == "eof" else repr(t.text)

    def error(self, message, tok: Token, severity="error"):
        self.diags.append(ParseDiagnostic(severity, message, self.src.span(tok.pos, len(tok.text) or 1)))

    def sync(self):
        """Skip past the next ``;`` at the current brace depth (or stop at ``}``)."""
        depth = 0
        while self.tok.kind != "eof":
            t = self.tok.text if self.tok.kind == "op" else None
            if t == "{":
                depth += 1
            elif t == "}":
                if depth == 0:
                    return
                depth -= 1
                if depth == 0:
                    self.i += 1
                    return
            elif t == ";" and depth == 0:
                self.i += 1
                return
            self.i += 1

    # -- numeric expressions ------------------------------------------------

    def num_expr(self):
        start = self.tok
        terms = [self.term()]
        while self.at("+") or self.at("-"):
            neg = self.tok.text == "-"
            self.i += 1
            t = self.term()
            terms.append(_negate(t) if neg else t)
        e = terms[0] if len(terms) == 1 else Add(tuple(terms))
        self.expr_spans.append((e, start))
        return e

    def term(self):
        factors = [self.factor()]
        while self.eat("*"):
            factors.append(self.factor())
        return factors[0] if len(factors) == 1 else Mul(tuple(factors))

    def factor(self):
        t = self.tok
        if self.eat("-"):
            if self.tok.kind == "num":
                v = float(self.tok.text)
                self.i += 1
                return Const(-v)
            return Neg(self.factor())
        if t.kind == "num":
            self.i += 1
            return Const(float(t.text))
        if t.kind == "hole":
            self.i += 1
            return Hole(t.text)
        if t.kind == "ident" and t.text not in ("true", "false"):
            self.i += 1
            return Counter(t.text)
        if self.eat("("):
            e = self.num_expr()
            self.expect(")")
            return e
        raise _Fail(f"expected a numeric expression, found {self._show(t)}", t)

    # -- boolean expressions -------------------------------------------------

    def bool_expr(self):
        items = [self.and_expr()]
        while self.eat("||"):
            items.append(self.and_expr())
        return items[0] if len(items) == 1 else Or(tuple(items))

    def and_expr(self):
        items = [self.unary()]
        while self.eat("&&"):
            items.append(self.unary())
        return items[0] if len(items) == 1 else And(tuple(items))

    def unary(self):
        if self.eat("!"):
            return Not(self.unary())
        return self.primary()

    def primary(self):
        t = self.tok
        if t.kind == "ident" and t.text in ("true", "false"):
            self.i += 1
            return BoolConst(t.text == "true")
        # a comparison if a numeric expression followed by a comparator parses here
        save, n_spans = self.i, len(self.expr_spans)
        try:
            lhs = self.num_expr()
            if self.tok.kind == "op" and self.tok.text in COMPARATORS:
                op = self.tok.text
                self.i += 1
                return Compare(lhs, op, self.num_expr())
        except _Fail:
            pass
        self.i = save
        del self.expr_spans[n_spans:]
        if self.eat("("):
            e = self.bool_expr()
            self.expect(")")
            return e
        if t.kind == "ident":
            self.i += 1
            return Event(t.text)
        raise _Fail(f"expected a guard, found {self._show(t)}", t)

    # -- statements ----------------------------------------------------------

    def parse(self):
        while self.tok.kind != "eof" and not self.at("srm"):
            self.error(f"unexpected {self._show(self.tok)} outside the srm block", self.tok)
            self.i += 1
        if self.tok.kind == "eof":
            self.error("missing srm block", self.tok)
            return None
        self.i += 1
        try:
            name = self.ident("machine name").text
            self.expect("{")
        except _Fail as f:
            self.error(f.message, f.tok)
            return None
        self.m = dict(name=name, events=None, holes=[], hole_tok={}, counters=[], atoms=[], sign_atoms=[],
                      states=[], state_tok={}, init=[], accepting=[], rules=[], rule_toks=[])
        while not self.at("}"):
            if self.tok.kind == "eof":
                self.error("unterminated srm block, expected '}'", self.tok)
                break
            try:
                self.statement()
            except _Fail as f:
                self.error(f.message, f.tok)
                self.sync()
        else:
            self.i += 1
            if self.tok.kind != "eof":
                self.error(f"unexpected {self._show(self.tok)} after the srm block", self.tok)
        return self.m

    def statement(self):
        t = self.tok
        m = self.m
        if self.eat("events"):
            if m["events"] is not None:
                self.error("duplicate events declaration", t)
            evs = []
            while not self.at(";"):
                evs.append(self.ident("event name").text)
            self.expect(";")
            m["events"] = evs
        elif self.eat("holes"):
            while self.tok.kind == "hole":
                h = self.tok
                if h.text in m["hole_tok"]:
                    self.error(f"duplicate hole {h.text}", h)
                else:
                    m["holes"].append(h.text)
                    m["hole_tok"][h.text] = h
                self.i += 1
            self.expect(";", "';' after hole list")
        elif self.eat("counter"):
            self.counter_decl(t)
        elif self.eat("constraint"):
            self.constraint_decl(t)
        elif self.eat("state"):
            s = self.ident("state name")
            flags = set()
            while self.at("init") or self.at("accepting"):
                flags.add(self.tok.text)
                self.i += 1
            self.expect(";")
            if s.text in m["state_tok"]:
                self.error(f"duplicate state {s.text}", s)
                return
            m["states"].append(s.text)
            m["state_tok"][s.text] = s
            if "init" in flags:
                m["init"].append(s)
            if "accepting" in flags:
                m["accepting"].append(s.text)
        elif t.kind == "ident":
            self.rule_decl()
        else:
            raise _Fail(f"unexpected {self._show(t)}", t)

    def counter_decl(self, kw):
        name = self.ident("counter name")
        self.expect("{")
        inc = reset = None
        while not self.at("}"):
            if self.eat("inc"):
                self.expect("on")
                inc = self.ident("event name").text
                self.expect(";")
            elif self.eat("reset"):
                self.expect("on")
                reset = self.ident("event name").text
                self.expect(";")
            else:
                raise _Fail(f"expected 'inc on' or 'reset on', found {self._show(self.tok)}", self.tok)
        self.expect("}")
        if inc is None:
            self.error(f"counter {name.text} has no 'inc on' event", name)
            return
        if any(c.name == name.text for c, _ in self.m["counters"]):
            self.error(f"duplicate counter {name.text}", name)
            return
        self.m["counters"].append((CounterDecl(name.text, inc, reset), name))

    def constraint_decl(self, kw):
        sign = self.at("sign") and self.toks[self.i + 1].text != ":"
        if sign:
            self.i += 1
        label = None
        if self.tok.kind == "ident" and self.toks[self.i + 1].text == ":":
            label = self.tok.text
            self.i += 2
        start = self.tok
        e = self.bool_expr()
        self.expect(";")
        items = e.items if isinstance(e, And) else (e,)
        if not all(isinstance(x, Compare) for x in items):
            self.error("constraints must be conjunctions of comparisons (no '||', '!' or bare events)", start)
            return
        atoms = self.m["sign_atoms" if sign else "atoms"]
        for k, x in enumerate(items):
            if label is None:
                name = f"c{len(atoms)}"
            elif len(items) == 1:
                name = label
            else:
                name = f"{label}[{k}]"
            atoms.append((ConstraintAtom(name, x), start))

    def rule_decl(self):
        src = self.ident("state name")
        self.expect("->")
        dst = self.ident("state name")
        self.expect(":")
        guard = self.bool_expr()
        self.expect("//", "'//' before the reward")
        reward = self.num_expr()
        hs = None
        prio = 0
        if self.at("hindsight"):
            hs = self.hindsight()
        if self.eat("prio"):
            neg = self.eat("-")
            n = self.tok
            if n.kind != "num" or not re.fullmatch(r"\d+", n.text):
                raise _Fail("priority must be an integer", n)
            self.i += 1
            prio = -int(n.text) if neg else int(n.text)
        self.expect(";", "';' after the rule")
        self.m["rules"].append((Rule(src.text, guard, reward, dst.text, hs, prio), src, dst))

    def hindsight(self):
        kw = self.expect("hindsight")
        self.expect("{")
        since = None
        awards = []
        while not self.at("}"):
            if self.eat("zero"):
                self.expect("since", "'since'")
                if since is not None:
                    raise _Fail("hindsight block has more than one 'zero since'", self.tok)
                since = self.ident("event name").text
                self.expect(";")
            elif self.eat("award"):
                self.expect("last", "'last(EVENT)'")
                self.expect("(")
                ev = self.ident("event name").text
                self.expect(")")
                r = self.num_expr()
                self.expect(";")
                awards.append(Award(ev, r))
            else:
                raise _Fail(f"malformed hindsight directive: expected 'zero since' or 'award last', found {self._show(self.tok)}", self.tok)
        self.expect("}")
        if since is None:
            raise _Fail("malformed hindsight directive: missing 'zero since EVENT;'", kw)
        return HindsightDirective(since, tuple(awards))


def _negate(t):
    if isinstance(t, Const):
        return Const(-t.value)
    return Neg(t)


# ---------------------------------------------------------------------------
# semantic checks and assembly


def _assemble(p: _Parser, m: dict):
    err = p.error
    states = m["states"]
    if not m["init"]:
        err("missing init state", p.toks[0])
    elif len(m["init"]) > 1:
        err("more than one init state", m["init"][1])
    holes = set(m["holes"])
    counters = {c.name for c, _ in m["counters"]}
    vocab = set(m["events"]) if m["events"] is not None else None

    def check_event(name, tok):
        if vocab is not None and name not in vocab:
            err(f"unknown event {name}", tok)
        if name in counters:
            err(f"{name} is a counter, not an event", tok)

    for c, tok in m["counters"]:
        check_event(c.inc_on, tok)
        if c.reset_on:
            check_event(c.reset_on, tok)

    def check_expr(e, tok):
        for h in sorted(holes_in(e) - holes):
            err(f"unknown hole {h}", tok)
        for c in sorted(counters_in(e) - counters):
            err(f"unknown counter {c}", tok)
        for ev in sorted(events_in(e)):
            check_event(ev, tok)

    for atom, tok in m["atoms"] + m["sign_atoms"]:
        check_expr(atom.expr, tok)
        if counters_in(atom.expr) or events_in(atom.expr):
            err(f"constraint {atom.name} may only mention holes and constants", tok)
    for r, src, dst in m["rules"]:
        for name, tok in ((r.src, src), (r.dst, dst)):
            if name not in m["state_tok"]:
                err(f"unknown state {name}", tok)
        check_expr(r.guard, src)
        check_expr(r.reward, src)
        if r.hindsight is not None:
            check_event(r.hindsight.zero_since, src)
            for a in r.hindsight.awards:
                check_event(a.event, src)
                check_expr(a.reward, src)
    for e, tok in p.expr_spans:
        if not is_affine(e):
            err("holes must combine affinely", tok)
    if any(d.severity == "error" for d in p.diags):
        return None
    try:
        srm = Srm(
            name=m["name"],
            states=tuple(states),
            init=m["init"][0].text,
            accepting=tuple(m["accepting"]),
            holes=tuple(m["holes"]),
            counters=tuple(c for c, _ in m["counters"]),
            rules=tuple(r for r, _, _ in m["rules"]),
            constraint=SymbolicConstraint(tuple(a for a, _ in m["atoms"])) if m["atoms"] else None,
            sign_constraint=SymbolicConstraint(tuple(a for a, _ in m["sign_atoms"])) if m["sign_atoms"] else None,
            vocabulary=tuple(m["events"]) if m["events"] is not None else (),
        )
    except SrmError as e:
        err(str(e), p.toks[0])
        return None
    object.__setattr__(srm, "_rule_spans", tuple(p.src.span(src.pos, len(src.text)) for _, src, _ in m["rules"]))
    return srm


def parse(text: str, file: str = "<string>") -> Union[Srm, list]:
    """Parse ``text`` into an :class:`Srm`, or return the error diagnostics."""
    p = _Parser(text, file)
    m = p.parse()
    srm = _assemble(p, m) if m is not None else None
    if srm is None:
        return p.diags
    return srm


def parse_or_raise(text: str, file: str = "<string>") -> Srm:
    out = parse(text, file)
    if isinstance(out, Srm):
        return out
    raise SrmParseError(out)


def load(path) -> Srm:
    path = Path(path)
    return parse_or_raise(path.read_text(encoding="utf-8"), str(path))


# ---------------------------------------------------------------------------
# validation


def validate(srm: Srm, atom_budget: int = 12, counter_budget: int = 3) -> list:
    """Best-effort determinism check of the rules leaving each state.

    Hole-free guard pairs are tested exhaustively over the subsets of the
    events they mention and counter values ``0..counter_budget``; pairs that
    involve holes are only reported.
    """
    spans = getattr(srm, "_rule_spans", None)

    def span(i):
        return spans[i] if spans else SourceSpan(f"<{srm.name}>", 1, 1, 1)

    out = []
    for q in srm.states:
        idx = [i for i, r in enumerate(srm.rules) if r.src == q]
        for i, j in itertools.combinations(idx, 2):
            a, b = srm.rules[i], srm.rules[j]
            label = f"rules {i} and {j} leaving {q}"
            if holes_in(a.guard) or holes_in(b.guard):
                out.append(ParseDiagnostic("warning", f"{label}: guard depends on holes; overlap is runtime-resolved by priority", span(j)))
                continue
            evs = sorted(events_in(a.guard) | events_in(b.guard))
            cnts = sorted(counters_in(a.guard) | counters_in(b.guard))
            if len(evs) > atom_budget:
                out.append(ParseDiagnostic("warning", f"{label}: {len(evs)} event atoms exceed the check budget", span(j)))
                continue
            if _overlap(srm, a, b, evs, cnts, counter_budget):
                out.append(ParseDiagnostic("warning", f"{label} can both fire; overlap resolved by priority", span(j)))
    return out


def _overlap(srm, a, b, evs, cnts, counter_budget) -> bool:
    cs = srm.compiled(tuple(evs))
    ci = [cs.counter_index[c] for c in cnts]
    ra = next(cr for crs in cs.rules_by_state for cr in crs if cr.rule is a)
    rb = next(cr for crs in cs.rules_by_state for cr in crs if cr.rule is b)
    base = [0] * len(srm.counters)
    for ev in range(1 << len(evs)):
        for vals in itertools.product(range(counter_budget + 1), repeat=len(ci)):
            cnt = list(base)
            for k, v in zip(ci, vals):
                cnt[k] = v
            if ra.guard_full(ev, cnt, ()) and rb.guard_full(ev, cnt, ()):
                return True
    return False


# ---------------------------------------------------------------------------
# serialization


def _num(v: float) -> str:
    return repr(float(v))


def fmt_num(e) -> str:
    if isinstance(e, Const):
        return _num(e.value)
    if isinstance(e, Hole):
        return e.name
    if isinstance(e, Counter):
        return e.name
    if isinstance(e, Neg):
        inner = e.operand
        if isinstance(inner, (Add, Mul, Neg, Const)):
            return f"-({fmt_num(inner)})"
        return "-" + fmt_num(inner)
    if isinstance(e, Add):
        return " + ".join(f"({fmt_num(t)})" if isinstance(t, Add) else fmt_num(t) for t in e.terms)
    if isinstance(e, Mul):
        return " * ".join(f"({fmt_num(f)})" if isinstance(f, (Add, Mul)) else fmt_num(f) for f in e.factors)
    raise TypeError(f"not a numeric expression: {e!r}")


def fmt_bool(e) -> str:
    if isinstance(e, BoolConst):
        return "true" if e.value else "false"
    if isinstance(e, Event):
        return e.name
    if isinstance(e, Compare):
        return f"{fmt_num(e.lhs)} {e.op} {fmt_num(e.rhs)}"
    if isinstance(e, And):
        return " && ".join(f"({fmt_bool(i)})" if isinstance(i, (And, Or)) else fmt_bool(i) for i in e.items)
    if isinstance(e, Or):
        return " || ".join(f"({fmt_bool(i)})" if isinstance(i, Or) else fmt_bool(i) for i in e.items)
    if isinstance(e, Not):
        i = e.item
        if isinstance(i, (And, Or, Compare)):
            return f"!({fmt_bool(i)})"
        return "!" + fmt_bool(i)
    raise TypeError(f"not a guard: {e!r}")


_INDEXED = re.compile(r"^(.*)\[(\d+)\]$")


def _constraint_lines(atoms, kw="constraint") -> list:
    lines, i = [], 0
    while i < len(atoms):
        m = _INDEXED.match(atoms[i].name)
        if m and m.group(2) == "0":
            base = m.group(1)
            j = i
            while j < len(atoms) and atoms[j].name == f"{base}[{j - i}]":
                j += 1
            if j - i >= 2:
                body = " && ".join(fmt_bool(a.expr) for a in atoms[i:j])
                lines.append(f"  {kw} {base}: {body};")
                i = j
                continue
        lines.append(f"  {kw} {atoms[i].name}: {fmt_bool(atoms[i].expr)};")
        i += 1
    return lines


def serialize(srm: Srm) -> str:
    out = [f"srm {srm.name} {{"]
    if srm.vocabulary:
        out.append("  events " + " ".join(srm.vocabulary) + ";")
    if srm.holes:
        out.append("  holes " + " ".join(srm.holes) + ";")
    for c in srm.counters:
        reset = f" reset on {c.reset_on};" if c.reset_on else ""
        out.append(f"  counter {c.name} {{ inc on {c.inc_on};{reset} }}")
    if srm.constraint is not None:
        out.extend(_constraint_lines(srm.constraint.atoms))
    if srm.sign_constraint is not None:
        out.extend(_constraint_lines(srm.sign_constraint.atoms, "constraint sign"))
    for s in srm.states:
        flags = (" init" if s == srm.init else "") + (" accepting" if s in srm.accepting else "")
        out.append(f"  state {s}{flags};")
    for r in srm.rules:
        line = f"  {r.src} -> {r.dst} : {fmt_bool(r.guard)} // {fmt_num(r.reward)}"
        if r.hindsight is not None:
            parts = [f"zero since {r.hindsight.zero_since};"]
            parts += [f"award last({a.event}) {fmt_num(a.reward)};" for a in r.hindsight.awards]
            line += " hindsight { " + " ".join(parts) + " }"
        if r.priority:
            line += f" prio {r.priority}"
        out.append(line + ";")
    out.append("}")
    return "\n".join(out) + "\n"


def asset_path(name: str) -> Path:
    return Path(__file__).with_name("assets") / name


def load_asset(name: str) -> Srm:
    return load(asset_path(name))
