"""Hypothesis strategies for formulas and signals, plus plain-rng generators."""
from __future__ import annotations

import numpy as np
from hypothesis import strategies as st

from hclbf.stl import Atom, Axis, Literal, Relation, StlFormula, Temporal, TemporalConjunct

finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False, allow_infinity=False)
# ordinary-looking thresholds, including values that print with a fraction
thresholds = st.one_of(st.integers(-50, 50).map(float), finite,
                       st.integers(-400, 400).map(lambda k: k / 8))

atoms = st.builds(Atom, st.sampled_from(list(Axis)), st.sampled_from([Relation.GE, Relation.GT]), thresholds)
literals = st.builds(Literal, atoms, st.booleans())


@st.composite
def windows(draw):
    t1 = draw(st.one_of(st.integers(0, 30).map(float), st.floats(0, 100, allow_nan=False)))
    width = draw(st.one_of(st.integers(1, 30).map(float), st.floats(1e-3, 100, allow_nan=False)))
    return t1, t1 + width


@st.composite
def conjuncts(draw):
    t1, t2 = draw(windows())
    body = tuple(draw(st.lists(literals, min_size=1, max_size=4)))
    return TemporalConjunct(draw(st.sampled_from(list(Temporal))), t1, t2, body)


formulas = st.builds(lambda cs: StlFormula(tuple(cs)), st.lists(conjuncts(), min_size=1, max_size=4))


# ---------------------------------------------------------------------------
# numpy-rng generators for the fixed-count acceptance loops


def random_formula(rng: np.random.Generator, horizon: float = 5.0, coord: float = 3.0) -> StlFormula:
    cs = []
    for _ in range(int(rng.integers(1, 4))):
        t1 = float(rng.integers(0, int(horizon * 4))) / 4
        t2 = min(horizon, t1 + float(rng.integers(1, int(horizon * 4) + 1)) / 4)
        if t2 <= t1:
            t1, t2 = 0.0, horizon
        lits = []
        for _ in range(int(rng.integers(1, 4))):
            rel = Relation.GE if rng.random() < 0.5 else Relation.GT
            thr = float(np.round(rng.uniform(-coord, coord) * 4) / 4)
            lits.append(Literal(Atom(Axis.X if rng.random() < 0.5 else Axis.Y, rel, thr), bool(rng.random() < 0.4)))
        op = Temporal.ALWAYS if rng.random() < 0.5 else Temporal.EVENTUALLY
        cs.append(TemporalConjunct(op, t1, t2, tuple(lits)))
    return StlFormula(tuple(cs))


def random_signal(rng: np.random.Generator, horizon: float = 5.0, coord: float = 3.0):
    period = float(rng.choice([0.05, 0.1, 0.25, 0.5]))
    n = int(round(horizon / period)) + 1
    # random walk, snapped to a quarter grid half of the time so boundaries get hit
    xs = np.cumsum(rng.normal(0, 0.5, n)) + rng.uniform(-coord, coord)
    ys = np.cumsum(rng.normal(0, 0.5, n)) + rng.uniform(-coord, coord)
    if rng.random() < 0.5:
        xs, ys = np.round(xs * 4) / 4, np.round(ys * 4) / 4
    t = [k * period for k in range(n)]
    return t, xs.tolist(), ys.tolist()


def as_tuples(f: StlFormula):
    """Plain-data view of a formula for the brute-force monitor oracle."""
    return [(c.operator.value, c.t1, c.t2,
             [(l.atom.axis.value, l.atom.relation.value, l.atom.threshold, l.negated) for l in c.body])
            for c in f.conjuncts]
