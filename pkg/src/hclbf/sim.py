"""Planar point-mass control loop with a barrier safety filter, plus auditors."""
from __future__ import annotations

import csv
import json
import math
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import stl
from .field import (
    CellState, ConstraintSchedule, Epoch, PotentialField, Rect, SolverParams, WorldSpec,
    compile_schedule, solve_schedule,
)
from .policy import (
    Adversarial, GoalSeek, GridWorld, NoisyGoalSeek, PolicyState, QPolicy, QTable, ReplayPolicy,
)
from .safety_filter import (
    CLAMPED, FLAT_GRADIENT_STOP, OUT_OF_BOUNDS, PROJECTED, FilterDecision, FilterParams, apply_filter,
)

REACHED_GOAL = "ReachedGoal"
HORIZON_EXPIRED = "HorizonExpired"
STOPPED = "Stopped"

CSV_COLUMNS = ["t", "x", "y", "fx", "fy", "ux_nom", "uy_nom", "V", "gx", "gy", "lhs", "rhs",
               "violated", "ux_out", "uy_out", "flags", "epoch"]


class StartInCollision(ValueError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    kind: str = "goal_seek"  # goal_seek | noisy_goal_seek | adversarial | q | replay
    gain: float = 1.0
    epsilon: float = 0.3
    goal: tuple[float, float] | None = None
    path: str | None = None  # QTable JSON or replay CSV

    @classmethod
    def from_dict(cls, d: dict | None) -> "PolicyConfig":
        d = dict(d or {})
        if d.get("goal") is not None:
            d["goal"] = tuple(map(float, d["goal"]))
        return cls(**{k: d[k] for k in ("kind", "gain", "epsilon", "goal", "path") if k in d})

    def build(self, seed: int, world: WorldSpec):
        if self.kind == "goal_seek":
            return GoalSeek(self.gain, self.goal)
        if self.kind == "noisy_goal_seek":
            return NoisyGoalSeek(self.gain, self.epsilon, seed, self.goal)
        if self.kind == "adversarial":
            return Adversarial()
        if self.kind == "replay":
            return ReplayPolicy.from_csv(self.path)
        if self.kind == "q":
            table = QTable.load(self.path)
            return QPolicy(table, GridWorld.from_world(world, table.goal), self.gain)
        raise ValueError(f"unknown policy kind {self.kind!r}")


@dataclass(frozen=True)
class Scenario:
    world: WorldSpec
    formula: stl.StlFormula
    horizon: float = 20.0
    dt: float = 0.05
    start: tuple[float, float] = (0.0, 0.0)
    policy: PolicyConfig = PolicyConfig()
    filter: FilterParams = FilterParams()
    solver: SolverParams = SolverParams()
    seed: int = 0
    stop_after: int = 10

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        n = self.horizon / self.dt
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ValueError("horizon must be an integer number of ticks")

    @property
    def n_ticks(self) -> int:
        return int(round(self.horizon / self.dt))

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | Path | None = None) -> "Scenario":
        if "spec" in d:
            text = d["spec"]
        elif "spec_file" in d:
            p = Path(d["spec_file"])
            if base_dir is not None and not p.is_absolute():
                p = Path(base_dir) / p
            text = stl.read_spec_file(p)
        else:
            raise ValueError("scenario needs 'spec' or 'spec_file'")
        sim = d.get("sim", {})
        pol = PolicyConfig.from_dict(d.get("policy"))
        if pol.path and base_dir is not None and not Path(pol.path).is_absolute():
            pol = replace(pol, path=str(Path(base_dir) / pol.path))
        return cls(
            world=WorldSpec.from_dict(d),
            formula=stl.parse(text),
            horizon=float(sim.get("horizon", d.get("horizon", 20.0))),
            dt=float(sim.get("dt", d.get("dt", 0.05))),
            start=tuple(map(float, sim.get("start", d.get("start", (0.0, 0.0))))),
            policy=pol,
            filter=FilterParams.from_dict(d.get("filter")),
            solver=SolverParams.from_dict(d.get("solver")),
            seed=int(sim.get("seed", d.get("seed", 0))),
            stop_after=int(sim.get("stop_after", 10)),
        )

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), path.parent)

    def to_dict(self) -> dict:
        d = self.world.to_dict()
        d["spec"] = stl.pretty_print(self.formula)
        d["solver"] = asdict(self.solver)
        d["filter"] = asdict(self.filter)
        pol = asdict(self.policy)
        pol["goal"] = list(self.policy.goal) if self.policy.goal else None
        d["policy"] = pol
        d["sim"] = {"horizon": self.horizon, "dt": self.dt, "start": list(self.start),
                    "seed": self.seed, "stop_after": self.stop_after}
        return d


@dataclass(frozen=True)
class Step:
    t: float
    position: tuple[float, float]
    force: tuple[float, float]
    decision: FilterDecision
    next_position: tuple[float, float]
    epoch: int


@dataclass
class Trajectory:
    steps: list[Step]
    outcome: str
    dt: float
    horizon: float
    k_alpha: float = 1.0

    @property
    def final_time(self) -> float:
        return self.steps[-1].t + self.dt if self.steps else 0.0

    @property
    def final_position(self) -> tuple[float, float] | None:
        return self.steps[-1].next_position if self.steps else None

    def positions(self) -> list[tuple[float, float]]:
        pts = [s.position for s in self.steps]
        if self.steps:
            pts.append(self.steps[-1].next_position)
        return pts

    def projections(self) -> int:
        return sum(PROJECTED in s.decision.flags for s in self.steps)

    def to_signal(self, hold_until: float | None = None) -> stl.Signal:
        """Recorded positions plus the final state; optionally held at rest until ``hold_until``."""
        pts = self.positions()
        n = len(pts)
        if hold_until is not None:
            total = int(math.floor(hold_until / self.dt + 1e-9)) + 1
            pts = pts + [pts[-1]] * max(0, total - n)
        return stl.Signal.uniform(self.dt, [p[0] for p in pts], [p[1] for p in pts])

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for s in self.steps:
                d = s.decision
                w.writerow([
                    repr(s.t), repr(s.position[0]), repr(s.position[1]), repr(s.force[0]), repr(s.force[1]),
                    repr(d.nominal_u[0]), repr(d.nominal_u[1]), repr(d.V), repr(d.grad[0]), repr(d.grad[1]),
                    repr(d.lhs), repr(d.rhs), int(d.violated), repr(d.output_u[0]), repr(d.output_u[1]),
                    ";".join(sorted(d.flags)), s.epoch,
                ])
            if self.steps:
                fp = self.final_position
                w.writerow([repr(self.final_time), repr(fp[0]), repr(fp[1])] + [""] * (len(CSV_COLUMNS) - 3))


def read_trajectory_csv(path: str | Path) -> tuple[list[dict], stl.Signal]:
    """Rows of a trajectory CSV and the position signal they describe."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: empty trajectory")
    missing = {"t", "x", "y"} - set(rows[0])
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    sig = stl.Signal(tuple(float(r["t"]) for r in rows), tuple(float(r["x"]) for r in rows),
                     tuple(float(r["y"]) for r in rows))
    return rows, sig


def hold_signal(sig: stl.Signal, until: float) -> stl.Signal:
    """Extend a signal by holding its last sample until ``until``."""
    if sig.t[-1] >= until or len(sig) < 2:
        return sig
    p = sig.period
    extra = int(math.ceil((until - sig.t[-1]) / p - 1e-9))
    t = list(sig.t) + [sig.t[0] + (len(sig) + k) * p for k in range(extra)]
    return stl.Signal(tuple(t), sig.x + (sig.x[-1],) * extra, sig.y + (sig.y[-1],) * extra)


# ---------------------------------------------------------------------------
# Control loop


@dataclass
class EpochView:
    """What a policy may look at: the active epoch's occupancy and field."""

    epoch: Epoch
    field: PotentialField
    goal_centers: np.ndarray
    unsafe_centers: np.ndarray

    @classmethod
    def build(cls, epoch: Epoch, fld: PotentialField) -> "EpochView":
        X, Y = fld.transform.centers()
        occ = epoch.occupancy
        g = occ == CellState.GOAL
        u = occ == CellState.UNSAFE
        return cls(epoch, fld, np.column_stack([X[g], Y[g]]), np.column_stack([X[u], Y[u]]))


@dataclass
class Prepared:
    schedule: ConstraintSchedule
    fields: list[PotentialField]
    views: list[EpochView]


def prepare(sc: Scenario) -> Prepared:
    schedule = compile_schedule(sc.formula, sc.world, sc.horizon)
    solved = solve_schedule(schedule, sc.solver)
    fields = [f for _, f in solved]
    views = [EpochView.build(e, f) for e, f in solved]
    return Prepared(schedule, fields, views)


def cell_state(occ: np.ndarray, tf, x: float, y: float) -> int:
    if not tf.in_bounds(x, y):
        return CellState.UNSAFE
    return int(occ[tf.cell_of(x, y)])


def run(sc: Scenario, prepared: Prepared | None = None) -> Trajectory:
    """Simulate one scenario: policy -> admittance -> sample -> filter -> integrate."""
    prep = prepared or prepare(sc)
    schedule = prep.schedule
    tf = schedule.transform
    x, y = sc.start
    if cell_state(schedule.epochs[0].occupancy, tf, x, y) == CellState.UNSAFE:
        raise StartInCollision(f"start {sc.start} lies in an unsafe cell")
    policy = sc.policy.build(sc.seed, sc.world)
    fp = sc.filter
    steps: list[Step] = []
    vel = (0.0, 0.0)
    outcome = HORIZON_EXPIRED
    stop_run = 0
    for k in range(sc.n_ticks):
        t = k * sc.dt
        e = schedule.epoch_at(t)
        view = prep.views[e]
        if cell_state(view.epoch.occupancy, tf, x, y) == CellState.GOAL:
            outcome = REACHED_GOAL
            break
        F = policy.force(PolicyState((x, y), vel), view)
        smp = view.field.sample(x, y)
        dec = apply_filter(F, smp.V, smp.grad, fp)
        if smp.clamped:
            dec = replace(dec, flags=dec.flags | {OUT_OF_BOUNDS})
        ux, uy = dec.output_u
        nx, ny = x + ux * sc.dt, y + uy * sc.dt
        steps.append(Step(t, (x, y), (float(F[0]), float(F[1])), dec, (nx, ny), e))
        vel = (ux, uy)
        x, y = nx, ny
        if FLAT_GRADIENT_STOP in dec.flags:
            stop_run += 1
            if stop_run >= sc.stop_after:
                outcome = STOPPED
                break
        else:
            stop_run = 0
    else:
        e = schedule.epoch_at(sc.horizon)
        if cell_state(schedule.epochs[e].occupancy, tf, x, y) == CellState.GOAL:
            outcome = REACHED_GOAL
    return Trajectory(steps, outcome, sc.dt, sc.horizon, fp.k_alpha)


# ---------------------------------------------------------------------------
# Auditors


@dataclass(frozen=True)
class SafetyReport:
    safe: bool
    first_violation: tuple[float, tuple[int, int]] | None = None


SUBDIVISIONS = 4


def check_safety(traj: Trajectory, schedule: ConstraintSchedule) -> SafetyReport:
    """Every recorded position and inter-tick subdivision point avoids Unsafe cells."""
    tf = schedule.transform
    for s in traj.steps:
        occ = schedule.epochs[s.epoch].occupancy
        (x0, y0), (x1, y1) = s.position, s.next_position
        for m in range(SUBDIVISIONS + 1):
            if m == SUBDIVISIONS and s is not traj.steps[-1]:
                continue  # checked as the next step's position
            a = m / SUBDIVISIONS
            px, py = x0 + a * (x1 - x0), y0 + a * (y1 - y0)
            if cell_state(occ, tf, px, py) == CellState.UNSAFE:
                return SafetyReport(False, (s.t + a * traj.dt, tf.cell_of(px, py)))
    return SafetyReport(True)


@dataclass(frozen=True)
class AuditReport:
    max_ratio: float
    # (t, V_t, V_next)
    violations: tuple[tuple[float, float, float], ...]
    checked: int
    # steps the filter marked as not enforcing the decay rate; audited for V_next <= V_t + tol only
    relaxed: int = 0


RELAXED_FLAGS = frozenset({CLAMPED, FLAT_GRADIENT_STOP})


def barrier_decrease_audit(traj: Trajectory, fields: Sequence[PotentialField], tol_audit: float = 1e-3,
                           eps: float = 1e-12, relaxed_flags: frozenset[str] = RELAXED_FLAGS) -> AuditReport:
    """Flag steps where V fails to shrink by the factor (1 - k_alpha*dt).

    Steps whose successor lies in another epoch are skipped because the field
    changes discontinuously there. Steps carrying any of ``relaxed_flags``
    (speed clamp, flat-gradient stop) only promise that V does not grow, so
    they are held to V_next <= V_t + tol_audit instead.
    """
    steps = traj.steps
    factor = 1.0 - traj.k_alpha * traj.dt
    ratio = 0.0
    bad = []
    checked = relaxed = 0
    for k, s in enumerate(steps):
        if k + 1 < len(steps):
            nxt = steps[k + 1]
            if nxt.epoch != s.epoch:
                continue
            v1 = nxt.decision.V
        else:
            v1 = fields[s.epoch].sample(*s.next_position).V
        v0 = s.decision.V
        if s.decision.flags & relaxed_flags:
            relaxed += 1
            bound = v0
        else:
            checked += 1
            bound = factor * v0
            ratio = max(ratio, v1 / max(v0, eps))
        if v1 > bound + tol_audit:
            bad.append((s.t, v0, v1))
    return AuditReport(ratio, tuple(bad), checked, relaxed)


def transition_distance(occupancy: np.ndarray, tf, x: float, y: float) -> float:
    """Chebyshev distance, in cells, from a point to the nearest non-Free cell.

    Cells are unit squares around their centers, so the result is 0 on a
    Free/non-Free boundary or inside a non-Free cell.
    """
    gi, gj = tf.world_to_grid(x, y)
    nf = np.argwhere(occupancy != CellState.FREE)
    if len(nf) == 0:
        return math.inf
    di = np.maximum(np.abs(nf[:, 0] - gi) - 0.5, 0.0)
    dj = np.maximum(np.abs(nf[:, 1] - gj) - 0.5, 0.0)
    return float(np.min(np.maximum(di, dj)))


def always_satisfied(traj: Trajectory, formula: stl.StlFormula) -> bool:
    """Monitor every Always conjunct on the run, holding the final state to the horizon."""
    always = formula.always()
    if not always:
        return True
    sig = traj.to_signal(hold_until=max(traj.horizon, formula.max_t2))
    return stl.monitor(stl.StlFormula(tuple(always)), sig).satisfied


# ---------------------------------------------------------------------------
# Batch evaluation


@dataclass(frozen=True)
class RunRecord:
    seed: int
    safe: bool
    reached: bool
    always_ok: bool
    steps: int
    projections: int
    outcome: str


@dataclass(frozen=True)
class Summary:
    n: int
    safe_count: int
    reach_count: int
    always_count: int
    mean_steps: float
    mean_projections: float

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(sc: Scenario) -> RunRecord:
    prep = prepare(sc)
    traj = run(sc, prep)
    rep = check_safety(traj, prep.schedule)
    return RunRecord(sc.seed, rep.safe, traj.outcome == REACHED_GOAL, always_satisfied(traj, sc.formula),
                     len(traj.steps), traj.projections(), traj.outcome)


def summarize(records: Sequence[RunRecord]) -> Summary:
    n = len(records)
    if n == 0:
        return Summary(0, 0, 0, 0, 0.0, 0.0)
    return Summary(
        n,
        sum(r.safe for r in records),
        sum(r.reached for r in records),
        sum(r.always_ok for r in records),
        sum(r.steps for r in records) / n,
        sum(r.projections for r in records) / n,
    )


def batch(scenarios: Iterable[Scenario], workers: int = 1) -> tuple[Summary, list[RunRecord]]:
    """Evaluate scenarios independently; results are ordered as given."""
    scenarios = list(scenarios)
    if workers > 1 and len(scenarios) > 1:
        with ProcessPoolExecutor(workers) as ex:
            records = list(ex.map(evaluate, scenarios, chunksize=8))
    else:
        records = [evaluate(sc) for sc in scenarios]
    return summarize(records), records


# ---------------------------------------------------------------------------
# Randomized scenario family used by the acceptance suite and scripts/


@dataclass(frozen=True)
class RandomScenarioConfig:
    size: int = 50
    coverage: tuple[float, float] = (0.05, 0.25)
    rect_cells: tuple[int, int] = (2, 10)
    goal_cells: int = 3
    keep_in_margin: tuple[int, int] = (1, 6)
    min_start_goal_dist: float = 8.0
    horizon: float = 20.0
    dt: float = 0.05
    k_alpha: float = 1.0
    alpha_adm: float = 2.0
    speed_limit: float | None = 2.0
    noisy_epsilon: float = 0.3


def _free_components(free: np.ndarray) -> np.ndarray:
    """4-connected component labels of a boolean grid (-1 outside)."""
    labels = np.full(free.shape, -1, dtype=int)
    W, H = free.shape
    n = 0
    for i0, j0 in zip(*np.nonzero(free)):
        if labels[i0, j0] >= 0:
            continue
        labels[i0, j0] = n
        q = deque([(i0, j0)])
        while q:
            i, j = q.popleft()
            for a, b in ((i + 1, j), (i - 1, j), (i, j + 1), (i, j - 1)):
                if 0 <= a < W and 0 <= b < H and free[a, b] and labels[a, b] < 0:
                    labels[a, b] = n
                    q.append((a, b))
        n += 1
    return labels


def random_scenario(seed: int, policy: str = "adversarial", filtered: bool = True,
                    cfg: RandomScenarioConfig = RandomScenarioConfig()) -> Scenario:
    """Random rectangles on a unit-cell grid, a keep-in Always box and a goal box.

    All region edges fall on half-integer world coordinates, i.e. on cell
    boundaries, so cell-level safety and the monitor agree.
    """
    rng = np.random.default_rng(seed)
    N = cfg.size
    hi = float(N - 1)
    while True:
        target = rng.uniform(*cfg.coverage)
        obstacles: list[Rect] = []
        blocked = np.zeros((N, N), dtype=bool)
        while blocked[1:-1, 1:-1].mean() < target:
            w, h = rng.integers(cfg.rect_cells[0], cfg.rect_cells[1] + 1, size=2)
            i, j = rng.integers(1, N - 1 - w), rng.integers(1, N - 1 - h)
            obstacles.append(Rect(i - 0.5, i + w - 0.5, j - 0.5, j + h - 0.5))
            blocked[i:i + w, j:j + h] = True
        if blocked[1:-1, 1:-1].mean() > cfg.coverage[1]:
            continue
        m = rng.integers(cfg.keep_in_margin[0], cfg.keep_in_margin[1] + 1, size=4)
        box = (m[0] + 0.5, N - 1 - m[1] - 0.5, m[2] + 0.5, N - 1 - m[3] - 0.5)
        free = ~blocked
        free[:int(box[0] + 0.5), :] = free[int(box[1] + 0.5):, :] = False
        free[:, :int(box[2] + 0.5)] = free[:, int(box[3] + 0.5):] = False
        free[0, :] = free[-1, :] = free[:, 0] = free[:, -1] = False
        g = cfg.goal_cells
        # goal plus a one-cell free ring: Goal next to Unsafe has no smooth harmonic field
        cand = [(i, j) for i in range(1, N - g) for j in range(1, N - g)
                if free[i - 1:i + g + 1, j - 1:j + g + 1].all()]
        if not cand:
            continue
        gi, gj = cand[int(rng.integers(len(cand)))]
        goal = Rect(gi - 0.5, gi + g - 0.5, gj - 0.5, gj + g - 0.5)
        labels = _free_components(free)
        comp = labels[gi, gj]
        # start: same component, all 8 neighbours free, away from the goal
        pad = np.pad(free, 1)
        clear = np.ones_like(free)
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                clear &= pad[1 + di:N + 1 + di, 1 + dj:N + 1 + dj]
        ii, jj = np.nonzero(clear & (labels == comp))
        far = np.hypot(ii - (gi + (g - 1) / 2), jj - (gj + (g - 1) / 2)) >= cfg.min_start_goal_dist
        ii, jj = ii[far], jj[far]
        if len(ii) == 0:
            continue
        k = int(rng.integers(len(ii)))
        start = (float(ii[k]), float(jj[k]))
        break

    keep_in = (f"x >= {box[0]} & !(x >= {box[1]}) & y >= {box[2]} & !(y >= {box[3]})")
    h = cfg.horizon
    if rng.random() < 0.5:
        text = f"G[0,{h:g}]({keep_in})"
        world_goal = goal
    else:
        text = (f"G[0,{h:g}]({keep_in}) & F[0,{h:g}](x >= {goal.x_min} & !(x >= {goal.x_max}) "
                f"& y >= {goal.y_min} & !(y >= {goal.y_max}))")
        world_goal = None
    world = WorldSpec(0.0, hi, 0.0, hi, N, N, tuple(obstacles), world_goal)
    return Scenario(
        world=world,
        formula=stl.parse(text),
        horizon=h,
        dt=cfg.dt,
        start=start,
        policy=PolicyConfig(kind=policy, epsilon=cfg.noisy_epsilon),
        filter=FilterParams(k_alpha=cfg.k_alpha, alpha_adm=cfg.alpha_adm, speed_limit=cfg.speed_limit,
                            enabled=filtered),
        seed=seed,
    )


@dataclass(frozen=True)
class OpenArenaConfig:
    size: int = 50
    goal_cells: int = 5
    horizon: float = 20.0
    dt: float = 0.05
    k_alpha: float = 0.1
    alpha_adm: float = 10.0


def open_arena_scenario(seed: int, policy: str = "goal_seek", filtered: bool = True,
                        cfg: OpenArenaConfig = OpenArenaConfig()) -> Scenario:
    """Obstacle-free unit-cell world with a square goal at the center.

    The start is a random cell center that is neither border-adjacent nor
    inside (or touching) the goal.
    """
    rng = np.random.default_rng(seed)
    N = cfg.size
    c = (N - 1) / 2
    h = cfg.goal_cells / 2
    world = WorldSpec(0.0, N - 1.0, 0.0, N - 1.0, N, N, (), Rect(c - h, c + h, c - h, c + h))
    while True:
        start = rng.integers(2, N - 2, size=2).astype(float)
        if np.max(np.abs(start - c)) > h + 1:
            break
    text = f"G[0,{cfg.horizon:g}](x >= 0.5 & !(x >= {N - 1.5}) & y >= 0.5 & !(y >= {N - 1.5}))"
    return Scenario(
        world=world,
        formula=stl.parse(text),
        horizon=cfg.horizon,
        dt=cfg.dt,
        start=(float(start[0]), float(start[1])),
        policy=PolicyConfig(kind=policy),
        filter=FilterParams(k_alpha=cfg.k_alpha, alpha_adm=cfg.alpha_adm, enabled=filtered),
        seed=seed,
    )
