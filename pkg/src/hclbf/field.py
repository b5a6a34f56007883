"""Grid potential fields: STL-to-occupancy compilation and Laplace relaxation.

Conventions
-----------
Grid arrays have shape ``(W, H)`` and are indexed ``[i, j]`` with ``i`` along
x and ``j`` along y. Grid point ``(i, j)`` sits at world coordinate
``(x_min + i*hx, y_min + j*hy)`` with ``hx = (x_max - x_min)/(W - 1)``; a cell
is the set of points whose nearest grid point is ``(i, j)``.

Dirichlet values are 0 on Goal cells and 1 on Unsafe cells. Border cells are
always Unsafe.
"""
from __future__ import annotations

import csv
import enum
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numba
import numpy as np

from .stl import StlFormula, Temporal, TemporalConjunct


class CellState(enum.IntEnum):
    FREE = 0
    GOAL = 1
    UNSAFE = 2


class FieldError(ValueError):
    pass


class NoGoalCell(FieldError):
    def __init__(self, epoch: int | None = None, detail: str = ""):
        where = "" if epoch is None else f" in epoch {epoch}"
        super().__init__(f"no goal cell{where}" + (f": {detail}" if detail else ""))
        self.epoch = epoch


class EmptyGoalIntersection(FieldError):
    def __init__(self, epoch: int, conjuncts: Sequence[int]):
        super().__init__(
            f"eventually-regions of conjuncts {list(conjuncts)} do not intersect in epoch {epoch}"
        )
        self.epoch = epoch
        self.conjuncts = tuple(conjuncts)


class NonConverged(FieldError):
    def __init__(self, stats: "SolveStats", field: "PotentialField | None" = None, epoch: int | None = None):
        where = "" if epoch is None else f" (epoch {epoch})"
        super().__init__(
            f"relaxation did not converge{where}: {stats.iterations} iterations, "
            f"residual {stats.final_residual:.3e}"
        )
        self.stats = stats
        self.field = field
        self.epoch = epoch


# ---------------------------------------------------------------------------
# World description


@dataclass(frozen=True)
class Rect:
    x_min: float
    x_max: float
    y_min: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min <= self.x_max and self.y_min <= self.y_max):
            raise ValueError(f"degenerate rectangle {self}")

    @classmethod
    def from_seq(cls, v: Sequence[float]) -> "Rect":
        return cls(*map(float, v))

    def to_list(self) -> list[float]:
        return [self.x_min, self.x_max, self.y_min, self.y_max]

    def contains(self, x, y):
        return (x >= self.x_min) & (x <= self.x_max) & (y >= self.y_min) & (y <= self.y_max)

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))


@dataclass(frozen=True)
class GridTransform:
    """Affine world <-> grid map."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    width: int
    height: int

    @property
    def hx(self) -> float:
        return (self.x_max - self.x_min) / (self.width - 1)

    @property
    def hy(self) -> float:
        return (self.y_max - self.y_min) / (self.height - 1)

    def world_to_grid(self, x: float, y: float) -> tuple[float, float]:
        i = (x - self.x_min) / (self.x_max - self.x_min) * (self.width - 1)
        j = (y - self.y_min) / (self.y_max - self.y_min) * (self.height - 1)
        return i, j

    def grid_to_world(self, i: float, j: float) -> tuple[float, float]:
        x = self.x_min + i / (self.width - 1) * (self.x_max - self.x_min)
        y = self.y_min + j / (self.height - 1) * (self.y_max - self.y_min)
        return x, y

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        """Nearest grid point, clamped into the grid."""
        i, j = self.world_to_grid(x, y)
        ci = min(max(int(math.floor(i + 0.5)), 0), self.width - 1)
        cj = min(max(int(math.floor(j + 0.5)), 0), self.height - 1)
        return ci, cj

    def in_bounds(self, x: float, y: float) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Cell-center coordinate grids, each of shape (W, H)."""
        # convex combination keeps round numbers (0.7 on [-1, 1]) exact
        i, nw = np.arange(self.width), self.width - 1
        j, nh = np.arange(self.height), self.height - 1
        xs = (self.x_min * (nw - i) + self.x_max * i) / nw
        ys = (self.y_min * (nh - j) + self.y_max * j) / nh
        return np.meshgrid(xs, ys, indexing="ij")


def world_to_grid(transform: GridTransform, x: float, y: float) -> tuple[float, float]:
    return transform.world_to_grid(x, y)


def grid_to_world(transform: GridTransform, i: float, j: float) -> tuple[float, float]:
    return transform.grid_to_world(i, j)


@dataclass(frozen=True)
class WorldSpec:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    width: int
    height: int
    obstacles: tuple[Rect, ...] = ()
    goal: Rect | None = None

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError("world bounds must satisfy min < max")
        if self.width < 3 or self.height < 3:
            raise ValueError("grid must be at least 3x3")
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        for r in (*self.obstacles, *([self.goal] if self.goal else [])):
            if (r.x_min < self.x_min or r.x_max > self.x_max
                    or r.y_min < self.y_min or r.y_max > self.y_max):
                raise ValueError(f"rectangle {r.to_list()} leaves the world bounds")

    @property
    def transform(self) -> GridTransform:
        return GridTransform(self.x_min, self.x_max, self.y_min, self.y_max, self.width, self.height)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        bounds = d["bounds"]
        grid = d["grid"]
        return cls(
            *map(float, bounds),
            int(grid[0]),
            int(grid[1]),
            tuple(Rect.from_seq(r) for r in d.get("obstacles", [])),
            Rect.from_seq(d["goal"]) if d.get("goal") is not None else None,
        )

    def to_dict(self) -> dict:
        return {
            "bounds": [self.x_min, self.x_max, self.y_min, self.y_max],
            "grid": [self.width, self.height],
            "obstacles": [r.to_list() for r in self.obstacles],
            "goal": self.goal.to_list() if self.goal else None,
        }


def border_mask(width: int, height: int) -> np.ndarray:
    m = np.zeros((width, height), dtype=bool)
    m[0, :] = m[-1, :] = m[:, 0] = m[:, -1] = True
    return m


def rect_mask(transform: GridTransform, rect: Rect) -> np.ndarray:
    X, Y = transform.centers()
    return rect.contains(X, Y)


def conjunct_region(transform: GridTransform, c: TemporalConjunct) -> np.ndarray:
    """Cells whose center satisfies the conjunct body."""
    X, Y = transform.centers()
    mask = np.ones(X.shape, dtype=bool)
    for lit in c.body:
        a = lit.atom
        v = X if a.axis.value == "x" else Y
        if a.relation.value == ">=":
            m = v >= a.threshold
        elif a.relation.value == ">":
            m = v > a.threshold
        else:
            m = v == a.threshold
        mask &= ~m if lit.negated else m
    return mask


# ---------------------------------------------------------------------------
# Schedule


@dataclass(frozen=True)
class Epoch:
    index: int
    t_start: float
    t_end: float
    occupancy: np.ndarray = field(repr=False, compare=False)
    # (conjunct index, "goal" | "unsafe") for every conjunct active in this epoch
    provenance: tuple[tuple[int, str], ...] = ()

    def contains(self, t: float, last: bool) -> bool:
        if last:
            return self.t_start <= t <= self.t_end
        return self.t_start <= t < self.t_end


@dataclass(frozen=True)
class ConstraintSchedule:
    epochs: tuple[Epoch, ...]
    horizon: float
    transform: GridTransform

    def epoch_at(self, t: float, slack: float = 1e-9) -> int:
        """Index of the epoch containing t (half-open, last epoch closed)."""
        for e in self.epochs[:-1]:
            if t < e.t_end - slack:
                return e.index
        return self.epochs[-1].index

    def __len__(self) -> int:
        return len(self.epochs)


def epoch_boundaries(f: StlFormula, horizon: float) -> list[float]:
    pts = {0.0, float(horizon)}
    for c in f.conjuncts:
        pts.update(t for t in (c.t1, c.t2) if 0.0 <= t <= horizon)
    return sorted(pts)


def compile_schedule(f: StlFormula, w: WorldSpec, horizon: float) -> ConstraintSchedule:
    """Rasterize a formula into per-epoch Goal/Unsafe occupancy grids."""
    if horizon < f.max_t2:
        raise ValueError(f"horizon {horizon} shorter than formula window end {f.max_t2}")
    tf = w.transform
    static_unsafe = border_mask(w.width, w.height)
    for r in w.obstacles:
        static_unsafe |= rect_mask(tf, r)
    static_goal = rect_mask(tf, w.goal) if w.goal is not None else np.zeros_like(static_unsafe)
    regions = [conjunct_region(tf, c) for c in f.conjuncts]

    bounds = epoch_boundaries(f, horizon)
    epochs = []
    for k, (s, e) in enumerate(zip(bounds[:-1], bounds[1:])):
        active = [n for n, c in enumerate(f.conjuncts) if s < c.t2 and e > c.t1]
        unsafe = static_unsafe.copy()
        goal = static_goal.copy()
        prov = []
        ev = [n for n in active if f.conjuncts[n].operator is Temporal.EVENTUALLY]
        if ev:
            inter = np.logical_and.reduce([regions[n] for n in ev])
            if len(ev) > 1 and not inter.any():
                raise EmptyGoalIntersection(k, ev)
            goal |= inter
            prov += [(n, "goal") for n in ev]
        for n in active:
            if f.conjuncts[n].operator is Temporal.ALWAYS:
                unsafe |= ~regions[n]
                prov.append((n, "unsafe"))
        occ = np.full((w.width, w.height), CellState.FREE, dtype=np.int8)
        occ[goal] = CellState.GOAL
        occ[unsafe] = CellState.UNSAFE
        if not (occ == CellState.GOAL).any():
            raise NoGoalCell(k, f"window [{s:g}, {e:g}]")
        occ.setflags(write=False)
        epochs.append(Epoch(k, s, e, occ, tuple(sorted(prov))))
    return ConstraintSchedule(tuple(epochs), float(horizon), tf)


# ---------------------------------------------------------------------------
# Relaxation kernels


@numba.njit(cache=True)
def _sor_sweeps(V, fixed, omega, tol, max_iters, reverse):
    W, H = V.shape
    resid = 0.0
    for it in range(max_iters):
        resid = 0.0
        for ii in range(W):
            i = W - 1 - ii if reverse else ii
            for jj in range(H):
                j = H - 1 - jj if reverse else jj
                if fixed[i, j]:
                    continue
                old = V[i, j]
                new = (1.0 - omega) * old + 0.25 * omega * (
                    V[i - 1, j] + V[i + 1, j] + V[i, j - 1] + V[i, j + 1]
                )
                d = abs(new - old)
                if d > resid:
                    resid = d
                V[i, j] = new
        if resid < tol:
            return it + 1, resid
    return max_iters, resid


@numba.njit(cache=True)
def _jacobi_sweeps(V, fixed, tol, max_iters):
    W, H = V.shape
    U = V.copy()
    resid = 0.0
    for it in range(max_iters):
        resid = 0.0
        for i in range(W):
            for j in range(H):
                if fixed[i, j]:
                    continue
                new = 0.25 * (V[i - 1, j] + V[i + 1, j] + V[i, j - 1] + V[i, j + 1])
                d = abs(new - V[i, j])
                if d > resid:
                    resid = d
                U[i, j] = new
        V[:, :] = U
        if resid < tol:
            return it + 1, resid
    return max_iters, resid


METHODS = ("sor", "gauss-seidel", "jacobi")


@dataclass(frozen=True)
class SolverParams:
    omega: float = 1.8
    tol: float = 1e-6
    max_iters: int = 50_000
    method: str = "sor"
    reverse: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.method == "sor" and not (1.0 <= self.omega < 2.0):
            raise ValueError("omega must lie in [1, 2)")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")

    @classmethod
    def from_dict(cls, d: dict | None) -> "SolverParams":
        d = dict(d or {})
        return cls(**{k: d[k] for k in ("omega", "tol", "max_iters", "method", "reverse") if k in d})


@dataclass(frozen=True)
class SolveStats:
    iterations: int
    final_residual: float
    wall_time: float
    converged: bool = True


@dataclass(frozen=True)
class FieldSample:
    V: float
    gx: float
    gy: float
    clamped: bool = False
    flat: bool = False

    @property
    def grad(self) -> tuple[float, float]:
        return (self.gx, self.gy)


FLAT_GRAD = 1e-12


@dataclass(eq=False)
class PotentialField:
    V: np.ndarray
    gx: np.ndarray
    gy: np.ndarray
    transform: GridTransform
    stats: SolveStats
    occupancy: np.ndarray

    def __post_init__(self):
        for a in (self.V, self.gx, self.gy, self.occupancy):
            a.setflags(write=False)
        # nested lists index faster than numpy scalars in the control loop
        self._lists = (self.V.tolist(), self.gx.tolist(), self.gy.tolist())

    @property
    def shape(self) -> tuple[int, int]:
        return self.V.shape

    def sample(self, x: float, y: float) -> FieldSample:
        return sample(self, x, y)

    def harmonic_residual(self) -> float:
        return harmonic_residual(self.V, self.occupancy)


def sample(fld: PotentialField, x: float, y: float) -> FieldSample:
    """Bilinear V and gradient at a world point; out-of-bounds queries are clamped."""
    tf = fld.transform
    W, H = tf.width, tf.height
    gi, gj = tf.world_to_grid(x, y)
    clamped = False
    if not (0.0 <= gi <= W - 1):
        gi = min(max(gi, 0.0), W - 1.0)
        clamped = True
    if not (0.0 <= gj <= H - 1):
        gj = min(max(gj, 0.0), H - 1.0)
        clamped = True
    i0 = min(int(gi), W - 2)
    j0 = min(int(gj), H - 2)
    fi = gi - i0
    fj = gj - j0
    w00 = (1 - fi) * (1 - fj)
    w10 = fi * (1 - fj)
    w01 = (1 - fi) * fj
    w11 = fi * fj
    out = []
    for a in fld._lists:
        r0, r1 = a[i0], a[i0 + 1]
        out.append(w00 * r0[j0] + w10 * r1[j0] + w01 * r0[j0 + 1] + w11 * r1[j0 + 1])
    V, gx, gy = out
    flat = 0.0 < V < 1.0 and math.hypot(gx, gy) < FLAT_GRAD
    return FieldSample(V, gx, gy, clamped, flat)


def harmonic_residual(V: np.ndarray, occupancy: np.ndarray) -> float:
    """Max |V - mean of 4 neighbours| over Free cells."""
    free = occupancy[1:-1, 1:-1] == CellState.FREE
    if not free.any():
        return 0.0
    mean = 0.25 * (V[:-2, 1:-1] + V[2:, 1:-1] + V[1:-1, :-2] + V[1:-1, 2:])
    return float(np.max(np.abs(V[1:-1, 1:-1] - mean)[free]))


def gradient(V: np.ndarray, hx: float, hy: float) -> tuple[np.ndarray, np.ndarray]:
    """Central differences inside, one-sided on the grid border, per world unit."""
    gx, gy = np.gradient(V, hx, hy, edge_order=1)
    return gx, gy


def dirichlet_init(occupancy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    occ = np.asarray(occupancy)
    V = np.ones(occ.shape, dtype=np.float64)
    V[occ == CellState.GOAL] = 0.0
    fixed = occ != CellState.FREE
    return V, fixed


def solve(occupancy: np.ndarray, params: SolverParams | None = None,
          transform: GridTransform | None = None) -> PotentialField:
    """Relax the discrete Laplace problem with Goal=0 / Unsafe=1 Dirichlet cells.

    Raises NoGoalCell if no Goal cell exists and NonConverged (with the
    partially relaxed field attached) when ``max_iters`` is exhausted.
    """
    params = params or SolverParams()
    occ = np.asarray(occupancy, dtype=np.int8)
    if occ.ndim != 2 or min(occ.shape) < 3:
        raise ValueError("occupancy must be a 2-D grid of at least 3x3")
    if not (occ == CellState.GOAL).any():
        raise NoGoalCell()
    if (occ[border_mask(*occ.shape)] == CellState.FREE).any():
        raise ValueError("border cells must be Goal or Unsafe")
    if transform is None:
        W, H = occ.shape
        transform = GridTransform(0.0, W - 1.0, 0.0, H - 1.0, W, H)

    V, fixed = dirichlet_init(occ)
    t0 = time.perf_counter()
    if fixed.all():
        iters, resid = 0, 0.0
    elif params.method == "jacobi":
        iters, resid = _jacobi_sweeps(V, fixed, params.tol, params.max_iters)
    else:
        omega = 1.0 if params.method == "gauss-seidel" else params.omega
        iters, resid = _sor_sweeps(V, fixed, omega, params.tol, params.max_iters, params.reverse)
    wall = time.perf_counter() - t0
    converged = resid < params.tol
    np.clip(V, 0.0, 1.0, out=V)
    gx, gy = gradient(V, transform.hx, transform.hy)
    stats = SolveStats(int(iters), float(resid), wall, converged)
    fld = PotentialField(V, gx, gy, transform, stats, occ.copy())
    if not converged:
        raise NonConverged(stats, fld)
    return fld


def occupancy_key(occ: np.ndarray) -> str:
    a = np.ascontiguousarray(occ, dtype=np.int8)
    return hashlib.sha1(a.tobytes() + repr(a.shape).encode()).hexdigest()


def solve_schedule(s: ConstraintSchedule, params: SolverParams | None = None) -> list[tuple[Epoch, PotentialField]]:
    """One field per epoch; epochs with identical occupancy share a solve."""
    cache: dict[str, PotentialField] = {}
    out = []
    for e in s.epochs:
        key = occupancy_key(e.occupancy)
        if key not in cache:
            try:
                cache[key] = solve(e.occupancy, params, s.transform)
            except NonConverged as exc:
                raise NonConverged(exc.stats, exc.field, e.index) from None
            except NoGoalCell:
                raise NoGoalCell(e.index) from None
        out.append((e, cache[key]))
    return out


def warmup() -> None:
    """Trigger JIT compilation so that later timings measure the solve only."""
    occ = np.full((4, 4), CellState.UNSAFE, dtype=np.int8)
    occ[1, 1] = CellState.GOAL
    occ[2, 2] = CellState.FREE
    for m in METHODS:
        solve(occ, SolverParams(method=m))


# ---------------------------------------------------------------------------
# Export


def export_field(fld: PotentialField, stem: str | Path, *, with_gradient: bool = False,
                 epoch: Epoch | None = None) -> list[Path]:
    """Write ``<stem>.json`` (header) and ``<stem>.csv`` (V, one row per j).

    Row ``j`` of the CSV holds ``V[0, j], V[1, j], ..., V[W-1, j]``.
    """
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    tf = fld.transform
    header = {
        "dims": [tf.width, tf.height],
        "bounds": [tf.x_min, tf.x_max, tf.y_min, tf.y_max],
        "layout": "rows are j (y index) ascending, columns are i (x index) ascending",
        "stats": asdict(fld.stats),
        "values": stem.with_suffix(".csv").name,
    }
    if epoch is not None:
        header["epoch"] = {"index": epoch.index, "t_start": epoch.t_start, "t_end": epoch.t_end,
                           "provenance": [list(p) for p in epoch.provenance]}
    paths = [stem.with_suffix(".json"), stem.with_suffix(".csv")]
    _write_grid_csv(paths[1], fld.V)
    if with_gradient:
        gpath = stem.parent / (stem.name + "_grad.csv")
        with open(gpath, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "j", "gx", "gy"])
            for i in range(tf.width):
                for j in range(tf.height):
                    w.writerow([i, j, repr(float(fld.gx[i, j])), repr(float(fld.gy[i, j]))])
        header["gradient"] = gpath.name
        paths.append(gpath)
    paths[0].write_text(json.dumps(header, indent=2) + "\n")
    return paths


def _write_grid_csv(path: Path, V: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for j in range(V.shape[1]):
            w.writerow([f"{float(v):.12g}" for v in V[:, j]])


def read_field_csv(path: str | Path) -> np.ndarray:
    """Inverse of the CSV body written by export_field; returns shape (W, H)."""
    rows = np.loadtxt(path, delimiter=",", ndmin=2)
    return rows.T.copy()


def cells(mask: np.ndarray) -> Iterable[tuple[int, int]]:
    return (tuple(ix) for ix in np.argwhere(mask))
