import json
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from scipy import ndimage
from hypothesis import given, settings
from hypothesis import strategies as st

from hclbf.field import (
    CellState, EmptyGoalIntersection, GridTransform, NoGoalCell, NonConverged, Rect, SolverParams,
    WorldSpec, compile_schedule, export_field, grid_to_world, harmonic_residual, read_field_csv, solve,
    solve_schedule, world_to_grid,
)
from hclbf.stl import parse

from oracles import direct_laplace, random_occupancy

DATA = Path(__file__).parent / "data"
F, G, U = CellState.FREE, CellState.GOAL, CellState.UNSAFE


def five_by_five():
    occ = np.full((5, 5), U, dtype=np.int8)
    occ[1:4, 1:4] = F
    occ[2, 2] = G
    return occ


# ---------------------------------------------------------------------------
# transform


def test_transform_midpoint_and_corner():
    tf = GridTransform(0, 1, 0, 1, 11, 11)
    assert world_to_grid(tf, 0.5, 0.5) == pytest.approx((5.0, 5.0))
    assert world_to_grid(tf, 0.0, 0.0) == (0.0, 0.0)


@given(st.floats(-50, 50), st.floats(-50, 50))
def test_transform_inverse(x, y):
    tf = GridTransform(-3, 7, 2, 4.5, 17, 9)
    i, j = world_to_grid(tf, x, y)
    assert grid_to_world(tf, i, j) == pytest.approx((x, y), abs=1e-12)


def test_world_validation():
    with pytest.raises(ValueError):
        WorldSpec(0, 1, 0, 1, 2, 5)
    with pytest.raises(ValueError):
        WorldSpec(1, 0, 0, 1, 5, 5)
    with pytest.raises(ValueError):
        WorldSpec(0, 1, 0, 1, 5, 5, obstacles=(Rect(0.5, 1.5, 0, 1),))


def test_world_dict_round_trip():
    w = WorldSpec(0, 10, -1, 1, 11, 5, (Rect(2, 3, -1, 0),), Rect(8, 9, 0, 1))
    assert WorldSpec.from_dict(w.to_dict()) == w


# ---------------------------------------------------------------------------
# schedule


def test_compile_always_half_planes():
    w = WorldSpec(-1, 1, -1, 1, 21, 21, goal=Rect(0.5, 0.7, 0.5, 0.7))
    s = compile_schedule(parse("G[0,10](x>0 & y>0)"), w, 10)
    assert len(s) == 1 and (s.epochs[0].t_start, s.epochs[0].t_end) == (0.0, 10.0)
    occ = s.epochs[0].occupancy
    # exact cell centers: -1 + k/10
    c = [Fraction(-1) + Fraction(k, 10) for k in range(21)]
    lo, hi = Fraction(1, 2), Fraction(7, 10)
    expected = np.full(occ.shape, F)
    for i in range(21):
        for j in range(21):
            if i in (0, 20) or j in (0, 20) or c[i] <= 0 or c[j] <= 0:
                expected[i, j] = U
            elif lo <= c[i] <= hi and lo <= c[j] <= hi:
                expected[i, j] = G
    np.testing.assert_array_equal(occ, expected)
    assert (occ == G).sum() == 9


def test_unsafe_overrides_goal_and_no_goal_fails():
    w = WorldSpec(-1, 1, -1, 1, 21, 21, goal=Rect(-0.7, -0.5, 0.5, 0.7))
    with pytest.raises(NoGoalCell):
        compile_schedule(parse("G[0,10](x>0)"), w, 10)


def test_eventually_windows_partition():
    w = WorldSpec(-1, 1, -1, 1, 11, 11)
    with pytest.raises(NoGoalCell) as e:
        compile_schedule(parse("F[2,5](x>0)"), w, 8)
    assert e.value.epoch == 0
    w = WorldSpec(-1, 1, -1, 1, 11, 11, goal=Rect(-0.6, -0.4, -0.1, 0.1))
    s = compile_schedule(parse("F[2,5](x>0)"), w, 8)
    assert [(e.t_start, e.t_end) for e in s.epochs] == [(0, 2), (2, 5), (5, 8)]
    n_goal = [(e.occupancy == G).sum() for e in s.epochs]
    assert n_goal[0] == n_goal[2] < n_goal[1]
    # the epochs tile [0, horizon]: half-open, last closed
    assert [s.epoch_at(t) for t in (0, 1.99, 2, 4.99, 5, 7.5, 8)] == [0, 0, 1, 1, 2, 2, 2]


def test_overlapping_eventually_intersect():
    w = WorldSpec(-1, 1, -1, 1, 11, 11)
    s = compile_schedule(parse("F[0,4](x>0) & F[2,4](y>0)"), w, 4)
    occ0, occ1 = s.epochs[0].occupancy, s.epochs[1].occupancy
    X, Y = w.transform.centers()
    interior = ~((X <= -1) | (X >= 1) | (Y <= -1) | (Y >= 1))
    assert np.array_equal(occ0 == G, (X > 0) & interior)
    assert np.array_equal(occ1 == G, (X > 0) & (Y > 0) & interior)


def test_disjoint_eventually_raises():
    w = WorldSpec(-1, 1, -1, 1, 11, 11)
    with pytest.raises(EmptyGoalIntersection):
        compile_schedule(parse("F[0,4](x>0.5) & F[0,4](!(x>-0.5))"), w, 4)


def test_horizon_shorter_than_formula():
    with pytest.raises(ValueError):
        compile_schedule(parse("F[0,4](x>0)"), WorldSpec(-1, 1, -1, 1, 5, 5), 3)


# ---------------------------------------------------------------------------
# solver


def test_fully_dirichlet_grid():
    occ = np.full((3, 3), U, dtype=np.int8)
    occ[1, 1] = G
    fld = solve(occ)
    assert fld.stats.iterations == 0
    np.testing.assert_array_equal(fld.V, [[1, 1, 1], [1, 0, 1], [1, 1, 1]])


def test_five_by_five_symmetry():
    fld = solve(five_by_five())
    V = fld.V
    for i, j in ((1, 2), (3, 2), (2, 1), (2, 3)):
        assert V[i, j] == pytest.approx(2 / 3, abs=1e-5)
    for i, j in ((1, 1), (1, 3), (3, 1), (3, 3)):
        assert V[i, j] == pytest.approx(5 / 6, abs=1e-5)
    np.testing.assert_allclose(direct_laplace(five_by_five()), read_field_csv(DATA / "golden_5x5.csv"), atol=1e-11)


@pytest.mark.parametrize("method", ["sor", "gauss-seidel", "jacobi"])
def test_methods_match_direct_solve(method):
    rng = np.random.default_rng(3)
    for _ in range(10):
        occ = random_occupancy(rng)
        fld = solve(occ, SolverParams(method=method, tol=1e-9, max_iters=500_000))
        np.testing.assert_allclose(fld.V, direct_laplace(occ), atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_maximum_principle_and_residual(seed):
    occ = random_occupancy(np.random.default_rng(seed))
    p = SolverParams()
    fld = solve(occ, p)
    V = fld.V
    assert V.min() >= 0 and V.max() <= 1
    assert np.all(V[occ == G] == 0) and np.all(V[occ == U] == 1)
    # strict bounds hold on Free components bordering both Dirichlet values;
    # pockets sealed off by Unsafe cells stay at 1
    labels, n = ndimage.label(occ == F)
    for k in range(1, n + 1):
        comp = labels == k
        ring = ndimage.binary_dilation(comp) & ~comp
        if (occ[ring] == G).any():
            # strictness is only resolvable above the solver tolerance
            exact = direct_laplace(occ)[comp]
            assert np.all(V[comp] > 0)
            assert np.all(V[comp][exact < 1 - 10 * p.tol] < 1)
        else:
            assert np.all(V[comp] == 1)
    assert harmonic_residual(V, occ) <= 10 * p.tol


def test_sweep_order_independence():
    rng = np.random.default_rng(8)
    for _ in range(10):
        occ = random_occupancy(rng)
        a = solve(occ, SolverParams()).V
        b = solve(occ, SolverParams(reverse=True)).V
        assert np.max(np.abs(a - b)) <= 10 * 1e-6


def test_non_converged_carries_stats_and_field():
    occ = np.full((12, 12), U, dtype=np.int8)
    occ[1:-1, 1:-1] = F
    occ[5, 5] = G
    with pytest.raises(NonConverged) as e:
        solve(occ, SolverParams(max_iters=3))
    assert e.value.stats.iterations == 3 and not e.value.stats.converged
    assert e.value.field is not None


def test_solver_preconditions():
    occ = np.full((5, 5), U, dtype=np.int8)
    with pytest.raises(NoGoalCell):
        solve(occ)
    occ[2, 2] = G
    occ[0, 2] = F
    with pytest.raises(ValueError):
        solve(occ)
    with pytest.raises(ValueError):
        SolverParams(omega=2.0)


def test_field_arrays_read_only():
    fld = solve(five_by_five())
    with pytest.raises(ValueError):
        fld.V[2, 2] = 1.0


def test_solve_schedule_shares_identical_epochs():
    w = WorldSpec(-1, 1, -1, 1, 11, 11, goal=Rect(-0.6, -0.4, -0.1, 0.1))
    s = compile_schedule(parse("F[2,5](x>0)"), w, 8)
    out = solve_schedule(s)
    assert len(out) == 3
    assert out[0][1] is out[2][1]
    assert out[1][1] is not out[0][1]
    zeros = [int((f.V == 0).sum()) for _, f in out]
    assert zeros[1] > zeros[0]
    single = compile_schedule(parse("G[0,1](x>-2)"), w, 1)
    assert len(solve_schedule(single)) == 1


def test_solve_schedule_reports_epoch():
    w = WorldSpec(-1, 1, -1, 1, 21, 21, goal=Rect(-0.6, -0.4, -0.1, 0.1))
    s = compile_schedule(parse("F[2,5](x>0)"), w, 8)
    with pytest.raises(NonConverged) as e:
        solve_schedule(s, SolverParams(max_iters=2))
    assert e.value.epoch == 0


# ---------------------------------------------------------------------------
# sampling and gradient


def test_sample_at_goal_and_edge_cell():
    fld = solve(five_by_five())
    assert fld.sample(2, 2).V == 0
    assert fld.sample(1, 2).V == pytest.approx(2 / 3, abs=1e-6)


def test_sample_midpoint_is_average():
    fld = solve(five_by_five())
    V = fld.V
    assert fld.sample(1.5, 2).V == pytest.approx(0.5 * (V[1, 2] + V[2, 2]), abs=1e-15)


def test_sample_out_of_bounds_is_clamped():
    fld = solve(five_by_five())
    s = fld.sample(-3.0, 2.0)
    assert s.clamped and s.V == pytest.approx(fld.V[0, 2])
    assert not fld.sample(2.0, 2.0).clamped


def test_gradient_grid_uses_world_units():
    occ = five_by_five()
    unit = solve(occ)
    scaled = solve(occ, transform=GridTransform(0, 8, 0, 2, 5, 5))
    np.testing.assert_allclose(scaled.gx, unit.gx / 2)
    np.testing.assert_allclose(scaled.gy, unit.gy * 2)
    # central difference at an interior cell
    assert unit.gx[2, 1] == pytest.approx((unit.V[3, 1] - unit.V[1, 1]) / 2)


def open_field():
    occ = np.full((40, 40), U, dtype=np.int8)
    occ[1:-1, 1:-1] = F
    occ[25:29, 10:14] = G
    return solve(occ, SolverParams(tol=1e-10, max_iters=200_000))


def fd_gradient(fld, x, y, h=0.25):
    return ((fld.sample(x + h, y).V - fld.sample(x - h, y).V) / (2 * h),
            (fld.sample(x, y + h).V - fld.sample(x, y - h).V) / (2 * h))


def test_gradient_exact_at_grid_points():
    # a +-h stencil straddling a grid point reproduces the central difference
    fld = open_field()
    for i, j in ((5, 5), (20, 30), (24, 12), (33, 20)):
        s = fld.sample(i, j)
        assert (s.gx, s.gy) == pytest.approx(fd_gradient(fld, i, j), rel=1e-9, abs=1e-15)


def second_difference_bound(V, i, j, axis):
    """Largest |second difference| of V along ``axis`` over the sampling stencil."""
    block = V[i - 2:i + 4, j - 2:j + 4]
    d2 = np.diff(block, n=2, axis=axis)
    return float(np.max(np.abs(d2)))


@pytest.mark.parametrize("seed", [0, 1])
def test_gradient_vs_fd_within_second_difference_bound(seed):
    # Between grid points the interpolated central difference and the slope of
    # bilinear V differ by a blend of second differences with total weight <= 3/4.
    rng = np.random.default_rng(seed)
    occ = random_occupancy(rng, max_size=12)
    occ = np.pad(occ, 6, constant_values=U)
    occ[3:-3, 3:-3][occ[3:-3, 3:-3] == U] = F
    occ[8, 8] = G
    occ[0, :] = occ[-1, :] = occ[:, 0] = occ[:, -1] = U
    fld = solve(occ, SolverParams(tol=1e-11, max_iters=500_000))
    W, H = occ.shape
    for _ in range(2000):
        x, y = rng.uniform(3, W - 4), rng.uniform(3, H - 4)
        i, j = int(x), int(y)
        s = fld.sample(x, y)
        fdx, fdy = fd_gradient(fld, x, y)
        assert abs(s.gx - fdx) <= 0.75 * second_difference_bound(fld.V, i, j, 0) + 1e-9
        assert abs(s.gy - fdy) <= 0.75 * second_difference_bound(fld.V, i, j, 1) + 1e-9


def test_gradient_relative_agreement_in_open_field():
    fld = open_field()
    occ = fld.occupancy
    rng = np.random.default_rng(5)
    errs = []
    while len(errs) < 1000:
        x, y = rng.uniform(1, 38, size=2)
        i, j = int(x), int(y)
        if (occ[i - 5:i + 7, j - 5:j + 7] != F).any():
            continue
        s = fld.sample(x, y)
        fdx, fdy = fd_gradient(fld, x, y)
        errs.append(np.hypot(s.gx - fdx, s.gy - fdy) / np.hypot(fdx, fdy))
    # well inside free space the mismatch is a few percent
    assert np.median(errs) < 0.02 and max(errs) < 0.1


# ---------------------------------------------------------------------------
# export


def test_export_matches_golden(tmp_path):
    fld = solve(five_by_five(), transform=GridTransform(0, 4, 0, 4, 5, 5))
    paths = export_field(fld, tmp_path / "f", with_gradient=True)
    assert [p.name for p in paths] == ["f.json", "f.csv", "f_grad.csv"]
    header = json.loads(paths[0].read_text())
    assert header["dims"] == [5, 5] and header["bounds"] == [0, 4, 0, 4]
    assert header["stats"]["iterations"] == fld.stats.iterations
    np.testing.assert_allclose(read_field_csv(paths[1]), read_field_csv(DATA / "golden_5x5.csv"), atol=1e-5)
    np.testing.assert_allclose(read_field_csv(paths[1]), fld.V, atol=1e-11)
