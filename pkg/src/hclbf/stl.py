"""Restricted STL fragment: AST, parser, canonical printer and a sample-based monitor.

Accepted grammar::

    formula := tconj ('&' tconj)*
    tconj   := ('G'|'F') '[' num ',' num ']' '(' lit ('&' lit)* ')'
    lit     := ['!'] '(' atom ')' | ['!'] atom
    atom    := ('x'|'y') ('>='|'>'|'=') num

The parser reads a looser superset (disjunction, implication, nesting, negated
groups) so that out-of-fragment input is reported as a named
:class:`FragmentViolation` instead of a generic syntax error.
"""
from __future__ import annotations

import enum
import math
import re
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence


class Axis(enum.Enum):
    X = "x"
    Y = "y"


class Relation(enum.Enum):
    GE = ">="
    GT = ">"
    EQ = "="


class Temporal(enum.Enum):
    ALWAYS = "G"
    EVENTUALLY = "F"


# Rule identifiers carried by FragmentViolation.rule
RULE_DISJUNCTION = "no-disjunction"
RULE_IMPLICATION = "no-implication"
RULE_NESTING = "no-nested-temporal"
RULE_NEGATION = "negate-atoms-only"
RULE_WINDOW = "window-order"
RULE_RELATION = "relation"
RULE_TOP_LEVEL = "temporal-top-level"

RULE_DESCRIPTIONS = {
    RULE_DISJUNCTION: "disjunction is not allowed; only conjunction may combine formulas",
    RULE_IMPLICATION: "implication is not allowed; only conjunction may combine formulas",
    RULE_NESTING: "nesting of temporal operators is not allowed",
    RULE_NEGATION: "only atomic formulas may be negated",
    RULE_WINDOW: "temporal windows must satisfy 0 <= t1 < t2",
    RULE_RELATION: "atoms must use one of >=, >, =",
    RULE_TOP_LEVEL: "every top-level conjunct must be a single G[t1,t2] or F[t1,t2] operator",
}


class StlError(ValueError):
    """Base class for parse and monitor failures."""


class StlSyntaxError(StlError):
    """Malformed token stream. ``offset`` is a byte offset into the UTF-8 input."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class FragmentViolation(StlError):
    """Well-formed input that falls outside the restricted fragment."""

    def __init__(self, rule: str, offset: int | None = None, detail: str = ""):
        msg = f"[{rule}] {RULE_DESCRIPTIONS[rule]}"
        if detail:
            msg += f": {detail}"
        if offset is not None:
            msg += f" (at byte {offset})"
        super().__init__(msg)
        self.rule = rule
        self.offset = offset


class HorizonTooShort(StlError):
    pass


class EqualityAtomWarning(UserWarning):
    """EQ atoms hold on measure-zero sets of a continuous trajectory."""


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Atom:
    axis: Axis
    relation: Relation
    threshold: float

    def __post_init__(self):
        if not math.isfinite(self.threshold):
            raise ValueError(f"atom threshold must be finite, got {self.threshold}")


@dataclass(frozen=True)
class Literal:
    atom: Atom
    negated: bool = False


@dataclass(frozen=True)
class TemporalConjunct:
    operator: Temporal
    t1: float
    t2: float
    body: tuple[Literal, ...]

    def __post_init__(self):
        if not self.body:
            raise ValueError("temporal conjunct body must be nonempty")
        if not (0 <= self.t1 < self.t2) or not math.isfinite(self.t2):
            raise FragmentViolation(RULE_WINDOW, detail=f"[{self.t1}, {self.t2}]")
        object.__setattr__(self, "body", tuple(self.body))

    def holds_at(self, x: float, y: float) -> bool:
        return all(evaluate_literal(lit, x, y) for lit in self.body)


@dataclass(frozen=True)
class StlFormula:
    conjuncts: tuple[TemporalConjunct, ...]

    def __post_init__(self):
        if not self.conjuncts:
            raise ValueError("formula needs at least one temporal conjunct")
        object.__setattr__(self, "conjuncts", tuple(self.conjuncts))

    @property
    def max_t2(self) -> float:
        return max(c.t2 for c in self.conjuncts)

    def always(self) -> list[TemporalConjunct]:
        return [c for c in self.conjuncts if c.operator is Temporal.ALWAYS]

    def eventually(self) -> list[TemporalConjunct]:
        return [c for c in self.conjuncts if c.operator is Temporal.EVENTUALLY]

    def __str__(self) -> str:
        return pretty_print(self)


# ---------------------------------------------------------------------------
# Tokenizer

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)
  | (?P<op>->|=>|>=|<=|==|\|\||&&|[<>=!&|()\[\],~])
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Tok:
    kind: str  # num | op | name | eof
    text: str
    offset: int  # byte offset


def _tokenize(text: str) -> list[_Tok]:
    toks: list[_Tok] = []
    pos = 0
    byte_pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise StlSyntaxError(f"unexpected character {text[pos]!r}", byte_pos)
        kind = m.lastgroup
        chunk = m.group()
        if kind != "ws":
            if kind == "op":
                chunk = {"=>": "->", "||": "|", "&&": "&", "==": "=", "~": "!"}.get(chunk, chunk)
            toks.append(_Tok(kind, chunk, byte_pos))
        byte_pos += len(m.group().encode("utf-8"))
        pos = m.end()
    toks.append(_Tok("eof", "", byte_pos))
    return toks


# ---------------------------------------------------------------------------
# Loose parse tree. Nodes are tuples: (kind, offset, *payload).


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def advance(self) -> _Tok:
        t = self.toks[self.i]
        self.i += 1
        return t

    def expect(self, text: str) -> _Tok:
        if self.tok.text != text or self.tok.kind == "eof":
            found = self.tok.text or "end of input"
            raise StlSyntaxError(f"expected {text!r}, found {found!r}", self.tok.offset)
        return self.advance()

    def parse(self):
        node = self.implication()
        if self.tok.kind != "eof":
            raise StlSyntaxError(f"unexpected {self.tok.text!r}", self.tok.offset)
        return node

    def implication(self):
        left = self.disjunction()
        if self.tok.text == "->":
            op = self.advance()
            right = self.implication()
            return ("implies", op.offset, left, right)
        return left

    def disjunction(self):
        left = self.conjunction()
        while self.tok.text == "|":
            op = self.advance()
            right = self.conjunction()
            left = ("or", op.offset, left, right)
        return left

    def conjunction(self):
        parts = [self.unary()]
        start = parts[0][1]
        while self.tok.text == "&":
            self.advance()
            parts.append(self.unary())
        return parts[0] if len(parts) == 1 else ("and", start, parts)

    def unary(self):
        t = self.tok
        if t.text == "!":
            self.advance()
            return ("not", t.offset, self.unary())
        if t.kind == "name" and t.text in ("G", "F"):
            return self.temporal()
        if t.text == "(":
            self.advance()
            inner = self.implication()
            self.expect(")")
            return ("group", t.offset, inner)
        if t.kind == "name":
            return self.atom()
        found = t.text or "end of input"
        raise StlSyntaxError(f"expected a formula, found {found!r}", t.offset)

    def number(self) -> float:
        t = self.tok
        if t.kind != "num":
            found = t.text or "end of input"
            raise StlSyntaxError(f"expected a number, found {found!r}", t.offset)
        self.advance()
        value = float(t.text)
        if not math.isfinite(value):
            raise StlSyntaxError(f"number out of range {t.text!r}", t.offset)
        return value

    def temporal(self):
        op = self.advance()
        self.expect("[")
        t1 = self.number()
        self.expect(",")
        t2 = self.number()
        self.expect("]")
        if self.tok.text != "(":
            raise StlSyntaxError("temporal operator body must be parenthesized", self.tok.offset)
        body = self.unary()
        return ("temporal", op.offset, op.text, t1, t2, body)

    def atom(self):
        name = self.advance()
        if name.text not in ("x", "y"):
            raise StlSyntaxError(f"unknown signal {name.text!r}; expected 'x' or 'y'", name.offset)
        rel = self.tok
        if rel.text in ("<", "<="):
            raise FragmentViolation(RULE_RELATION, rel.offset, f"found {rel.text!r}")
        if rel.text not in (">=", ">", "="):
            found = rel.text or "end of input"
            raise StlSyntaxError(f"expected a relation, found {found!r}", rel.offset)
        self.advance()
        value = self.number()
        return ("atom", name.offset, Atom(Axis(name.text), Relation(rel.text), value))


def _strip_groups(node):
    while node[0] == "group":
        node = node[2]
    return node


def _flatten_and(node) -> list:
    node = _strip_groups(node)
    if node[0] == "and":
        out = []
        for part in node[2]:
            out.extend(_flatten_and(part))
        return out
    return [node]


def _reject_connectives(node):
    """Raise for disjunction/implication anywhere in the tree, outermost first."""
    kind = node[0]
    if kind == "or":
        raise FragmentViolation(RULE_DISJUNCTION, node[1])
    if kind == "implies":
        raise FragmentViolation(RULE_IMPLICATION, node[1])
    if kind in ("group", "not"):
        _reject_connectives(node[2])
    elif kind == "and":
        for p in node[2]:
            _reject_connectives(p)
    elif kind == "temporal":
        _reject_connectives(node[5])


def _to_literal(node) -> Literal:
    node = _strip_groups(node)
    kind = node[0]
    if kind == "atom":
        return Literal(node[2], False)
    if kind == "temporal":
        raise FragmentViolation(RULE_NESTING, node[1])
    if kind == "not":
        inner = _strip_groups(node[2])
        if inner[0] == "atom":
            return Literal(inner[2], True)
        if inner[0] == "temporal" and _contains_temporal(inner[5]):
            raise FragmentViolation(RULE_NESTING, inner[1])
        raise FragmentViolation(RULE_NEGATION, node[1])
    raise FragmentViolation(RULE_NEGATION, node[1])  # pragma: no cover


def _contains_temporal(node) -> bool:
    kind = node[0]
    if kind == "temporal":
        return True
    if kind in ("group", "not"):
        return _contains_temporal(node[2])
    if kind == "and":
        return any(_contains_temporal(p) for p in node[2])
    return False


def _to_conjunct(node) -> TemporalConjunct:
    node = _strip_groups(node)
    kind = node[0]
    if kind == "not":
        inner = _strip_groups(node[2])
        if inner[0] == "temporal":
            if _contains_temporal(inner[5]):
                raise FragmentViolation(RULE_NESTING, inner[1])
            raise FragmentViolation(RULE_NEGATION, node[1], "a temporal operator cannot be negated")
        if inner[0] == "atom":
            raise FragmentViolation(RULE_TOP_LEVEL, node[1])
        raise FragmentViolation(RULE_NEGATION, node[1])
    if kind != "temporal":
        raise FragmentViolation(RULE_TOP_LEVEL, node[1])
    _, offset, op, t1, t2, body = node
    if not (0 <= t1 < t2):
        raise FragmentViolation(RULE_WINDOW, offset, f"[{_fmt(t1)}, {_fmt(t2)}]")
    if _contains_temporal(body):
        # report the innermost offending operator
        for part in _flatten_and(body):
            p = _strip_groups(part)
            while p[0] == "not":
                p = _strip_groups(p[2])
            if p[0] == "temporal":
                raise FragmentViolation(RULE_NESTING, p[1])
    lits = tuple(_to_literal(p) for p in _flatten_and(body))
    return TemporalConjunct(Temporal(op), t1, t2, lits)


def parse(text: str) -> StlFormula:
    """Parse one formula of the restricted fragment.

    Raises StlSyntaxError for malformed input and FragmentViolation for
    well-formed input outside the fragment. EQ atoms trigger an
    EqualityAtomWarning.
    """
    tree = _Parser(text).parse()
    _reject_connectives(tree)
    formula = StlFormula(tuple(_to_conjunct(n) for n in _flatten_and(tree)))
    if any(lit.atom.relation is Relation.EQ for c in formula.conjuncts for lit in c.body):
        warnings.warn(
            "equality atoms only hold on grid-snapped coordinates",
            EqualityAtomWarning,
            stacklevel=2,
        )
    return formula


def read_spec_file(path) -> str:
    """Read a formula file, dropping ``#`` line comments and blank lines."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln.split("#", 1)[0].strip() for ln in fh]
    return " ".join(ln for ln in lines if ln)


# ---------------------------------------------------------------------------
# Printing


def _fmt(v: float) -> str:
    if float(v).is_integer() and abs(v) < 1e16:
        return str(int(v))
    return repr(float(v))


def format_literal(lit: Literal) -> str:
    a = lit.atom
    s = f"{a.axis.value} {a.relation.value} {_fmt(a.threshold)}"
    return f"!({s})" if lit.negated else s


def format_conjunct(c: TemporalConjunct) -> str:
    body = " & ".join(format_literal(lit) for lit in c.body)
    return f"{c.operator.value}[{_fmt(c.t1)},{_fmt(c.t2)}]({body})"


def pretty_print(f: StlFormula) -> str:
    return " & ".join(format_conjunct(c) for c in f.conjuncts)


# ---------------------------------------------------------------------------
# Semantics


def evaluate_atom(a: Atom, x: float, y: float) -> bool:
    v = x if a.axis is Axis.X else y
    if a.relation is Relation.GE:
        return v >= a.threshold
    if a.relation is Relation.GT:
        return v > a.threshold
    return v == a.threshold


def evaluate_literal(lit: Literal, x: float, y: float) -> bool:
    return evaluate_atom(lit.atom, x, y) != lit.negated


@dataclass(frozen=True)
class Signal:
    """Uniformly sampled planar trajectory."""

    t: tuple[float, ...]
    x: tuple[float, ...]
    y: tuple[float, ...]

    def __post_init__(self):
        n = len(self.t)
        if n == 0 or len(self.x) != n or len(self.y) != n:
            raise ValueError("signal needs equal-length, nonempty t/x/y")
        object.__setattr__(self, "t", tuple(float(v) for v in self.t))
        object.__setattr__(self, "x", tuple(float(v) for v in self.x))
        object.__setattr__(self, "y", tuple(float(v) for v in self.y))
        if n > 1:
            period = (self.t[-1] - self.t[0]) / (n - 1)
            if period <= 0:
                raise ValueError("signal timestamps must be strictly increasing")
            for k in range(1, n):
                step = self.t[k] - self.t[k - 1]
                if step <= 0 or abs(step - period) > 1e-9 * max(abs(period), abs(self.t[k])):
                    raise ValueError(f"non-uniform sample spacing at index {k}")

    @classmethod
    def from_samples(cls, samples: Iterable[tuple[float, float, float]]) -> "Signal":
        rows = list(samples)
        return cls(tuple(r[0] for r in rows), tuple(r[1] for r in rows), tuple(r[2] for r in rows))

    @classmethod
    def uniform(cls, period: float, xs: Sequence[float], ys: Sequence[float], t0: float = 0.0) -> "Signal":
        return cls(tuple(t0 + k * period for k in range(len(xs))), tuple(xs), tuple(ys))

    @property
    def period(self) -> float:
        if len(self.t) < 2:
            return 0.0
        return (self.t[-1] - self.t[0]) / (len(self.t) - 1)

    def __len__(self) -> int:
        return len(self.t)


@dataclass(frozen=True)
class ConjunctVerdict:
    index: int
    satisfied: bool
    # first satisfying sample (F) or first violating sample (G); None otherwise
    time: float | None


@dataclass(frozen=True)
class MonitorVerdict:
    satisfied: bool
    per_conjunct: tuple[ConjunctVerdict, ...]


def window_indices(c: TemporalConjunct, s: Signal) -> list[int]:
    """Sample indices inside the closed window, padded by half a period."""
    eps = s.period / 2
    lo, hi = c.t1 - eps, c.t2 + eps
    return [k for k, t in enumerate(s.t) if lo <= t <= hi]


def monitor(f: StlFormula, s: Signal) -> MonitorVerdict:
    eps = s.period / 2
    if s.t[-1] < f.max_t2 - eps:
        raise HorizonTooShort(f"signal ends at t={s.t[-1]:g}, formula needs t={f.max_t2:g}")
    verdicts = []
    for idx, c in enumerate(f.conjuncts):
        always = c.operator is Temporal.ALWAYS
        ok = always
        when = None
        for k in window_indices(c, s):
            holds = c.holds_at(s.x[k], s.y[k])
            if always and not holds:
                ok, when = False, s.t[k]
                break
            if not always and holds:
                ok, when = True, s.t[k]
                break
        verdicts.append(ConjunctVerdict(idx, ok, when))
    return MonitorVerdict(all(v.satisfied for v in verdicts), tuple(verdicts))
