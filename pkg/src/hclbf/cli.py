"""Command-line entry point: ``hclbf <subcommand> [options]``."""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import stl
from .field import (
    METHODS, CellState, EmptyGoalIntersection, NoGoalCell, NonConverged, SolverParams,
    compile_schedule, export_field, solve, solve_schedule, warmup,
)
from .policy import GridWorld, QHyper, RewardParams, evaluate_greedy, q_train
from .render import field_image, write_ppm, write_svg
from .sim import Scenario, StartInCollision, check_safety, hold_signal, prepare, read_trajectory_csv, run

log = logging.getLogger("hclbf")

EXIT_OK = 0
EXIT_SPEC = 2
EXIT_NOT_FOUND = 3
EXIT_NON_CONVERGED = 4
EXIT_NO_GOAL = 5
EXIT_VIOLATED = 6
EXIT_START_COLLISION = 7
EXIT_HORIZON = 8
EXIT_INVALID = 9
EXIT_USAGE = 64

EPILOG = """\
exit codes:
  0   success (verify: formula satisfied)
  2   specification syntax error or fragment violation (rule name and byte offset on stderr)
  3   input file not found
  4   field solver did not converge (iterations and residual on stderr)
  5   an epoch has no goal cell, or Eventually regions have an empty intersection
  6   verify: formula violated
  7   run: start position lies in an unsafe cell
  8   verify: trajectory shorter than the formula horizon (use --hold to pad)
  9   invalid scenario or input file contents
  64  command-line usage error

specification text:
  formula := tconj ('&' tconj)*
  tconj   := ('G'|'F') '[' t1 ',' t2 ']' '(' lit ('&' lit)* ')'
  lit     := atom | '!' atom | '!(' atom ')'
  atom    := ('x'|'y') ('>='|'>'|'=') number
  Lines starting with '#' in a --spec file are comments.

scenario JSON:
  {
    "bounds": [x_min, x_max, y_min, y_max],
    "grid": [W, H],
    "obstacles": [[x_min, x_max, y_min, y_max], ...],
    "goal": [x_min, x_max, y_min, y_max] | null,   (static goal, optional)
    "spec": "<formula>"  or  "spec_file": "<path relative to scenario>",
    "sim": {"horizon": 20, "dt": 0.05, "start": [x, y], "seed": 0, "stop_after": 10},
    "policy": {"kind": "goal_seek|noisy_goal_seek|adversarial|q|replay",
               "gain": 1.0, "epsilon": 0.3, "goal": [x, y], "path": "<qtable.json|forces.csv>"},
    "filter": {"k_alpha": 1.0, "alpha_adm": 0.1, "grad_epsilon": 1e-9,
               "speed_limit": null, "enabled": true},
    "solver": {"omega": 1.8, "tol": 1e-6, "max_iters": 50000, "method": "sor|gauss-seidel|jacobi"}
  }

output files:
  solve   <out>/field_epoch<k>.json, .csv (V, row j = y index), optional _grad.csv
  render  <out>/field_epoch<k>.ppm (P6, one pixel per cell), .svg (arrows along -grad V)
  run     <out>/trajectory.csv (t,x,y,fx,fy,ux_nom,uy_nom,V,gx,gy,lhs,rhs,violated,
          ux_out,uy_out,flags,epoch; last row holds the final state), <out>/summary.json
  train   <out> (QTable JSON)
  bench   <out> (CSV: size,method,tol,iterations,wall_time,final_residual,converged)
"""


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_formula(args) -> stl.StlFormula:
    if args.spec_text is not None:
        return stl.parse(args.spec_text)
    if args.spec is not None:
        return stl.parse(stl.read_spec_file(args.spec))
    if getattr(args, "scenario", None):
        return _load_scenario(args).formula
    raise CliError(EXIT_USAGE, "need --spec-text, --spec or --scenario")


def _load_scenario(args) -> Scenario:
    if not args.scenario:
        raise CliError(EXIT_USAGE, "--scenario is required")
    sc = Scenario.load(args.scenario)
    if args.seed is not None:
        sc = replace(sc, seed=args.seed)
    return sc


def _out_dir(args, default: str = ".") -> Path:
    p = Path(args.out or default)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2))


# ---------------------------------------------------------------------------
# Subcommands


def cmd_check(args) -> int:
    f = _read_formula(args)
    print(stl.pretty_print(f))
    return EXIT_OK


def _solved(args):
    sc = _load_scenario(args)
    schedule = compile_schedule(sc.formula, sc.world, sc.horizon)
    return sc, schedule, solve_schedule(schedule, sc.solver)


def cmd_solve(args) -> int:
    _, _, solved = _solved(args)
    out = _out_dir(args)
    report = []
    for e, fld in solved:
        paths = export_field(fld, out / f"field_epoch{e.index}", with_gradient=args.gradient, epoch=e)
        report.append({"epoch": e.index, "t_start": e.t_start, "t_end": e.t_end,
                       "iterations": fld.stats.iterations, "residual": fld.stats.final_residual,
                       "files": [str(p) for p in paths]})
    _emit(report)
    return EXIT_OK


def cmd_render(args) -> int:
    _, _, solved = _solved(args)
    out = _out_dir(args)
    trajs = []
    if args.trajectory:
        _, sig = read_trajectory_csv(args.trajectory)
        trajs.append(list(zip(sig.x, sig.y)))
    files = []
    for e, fld in solved:
        stem = out / f"field_epoch{e.index}"
        write_ppm(stem.with_suffix(".ppm"), field_image(fld, e.occupancy), args.scale)
        write_svg(stem.with_suffix(".svg"), fld, every=args.every, trajectories=trajs)
        files += [str(stem.with_suffix(".ppm")), str(stem.with_suffix(".svg"))]
    _emit(files)
    return EXIT_OK


def cmd_run(args) -> int:
    sc = _load_scenario(args)
    if args.no_filter:
        sc = replace(sc, filter=replace(sc.filter, enabled=False))
    prep = prepare(sc)
    traj = run(sc, prep)
    out = _out_dir(args)
    traj.write_csv(out / "trajectory.csv")
    safety = check_safety(traj, prep.schedule)
    sig = traj.to_signal(hold_until=max(sc.horizon, sc.formula.max_t2))
    verdict = stl.monitor(sc.formula, sig)
    summary = {
        "outcome": traj.outcome,
        "steps": len(traj.steps),
        "final_time": traj.final_time,
        "final_position": list(traj.final_position) if traj.steps else list(sc.start),
        "projections": traj.projections(),
        "safe": safety.safe,
        "first_violation": safety.first_violation,
        "satisfied": verdict.satisfied,
        "per_conjunct": [v.satisfied for v in verdict.per_conjunct],
        "seed": sc.seed,
        "epochs": [{"index": e.index, "t_start": e.t_start, "t_end": e.t_end} for e in prep.schedule.epochs],
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    _emit(summary)
    return EXIT_OK


def cmd_verify(args) -> int:
    if not args.trajectory:
        raise CliError(EXIT_USAGE, "--trajectory is required")
    f = _read_formula(args)
    _, sig = read_trajectory_csv(args.trajectory)
    if args.hold is not None:
        sig = hold_signal(sig, args.hold)
    v = stl.monitor(f, sig)
    _emit({"satisfied": v.satisfied,
           "per_conjunct": [{"conjunct": stl.format_conjunct(f.conjuncts[c.index]),
                             "satisfied": c.satisfied, "time": c.time} for c in v.per_conjunct]})
    return EXIT_OK if v.satisfied else EXIT_VIOLATED


def _train_goal(args, sc: Scenario) -> tuple[float, float]:
    if args.goal is not None:
        return tuple(args.goal)
    if sc.policy.goal is not None:
        return sc.policy.goal
    if sc.world.goal is not None:
        return sc.world.goal.center
    ev = sc.formula.eventually()
    if ev:
        schedule = compile_schedule(sc.formula, sc.world, sc.horizon)
        occ = schedule.epochs[0].occupancy
        cells = np.argwhere(occ == CellState.GOAL)
        if len(cells):
            i, j = cells[len(cells) // 2]
            return schedule.transform.grid_to_world(float(i), float(j))
    raise CliError(EXIT_INVALID, "cannot determine a training goal; pass --goal X Y")


def cmd_train(args) -> int:
    sc = _load_scenario(args)
    goal = _train_goal(args, sc)
    seed = args.seed if args.seed is not None else sc.seed
    hyper = QHyper(args.gamma, args.alpha_lr, args.epsilon)
    rp = RewardParams(goal)
    gw = GridWorld.from_world(sc.world, goal)
    table = q_train(gw, rp, hyper, args.episodes, seed, shielded=args.shielded_training,
                    filter_params=sc.filter)
    out = Path(args.out or "qtable.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    table.save(out)
    rate = evaluate_greedy(table, gw, args.eval_episodes, seed)
    _emit({"table": str(out), "episodes": args.episodes, "seed": seed, "goal": list(goal),
           "visited_cells": len(table.values), "greedy_success": rate})
    return EXIT_OK


def bench_grid(size: int, coverage: float, seed: int) -> np.ndarray:
    """Square grid with a Dirichlet border, random rectangles and a central goal block."""
    rng = np.random.default_rng(seed)
    occ = np.zeros((size, size), dtype=np.int8)
    occ[0, :] = occ[-1, :] = occ[:, 0] = occ[:, -1] = CellState.UNSAFE
    c = size // 2
    g = max(1, size // 50)
    target = coverage * (size - 2) ** 2
    placed = 0
    while placed < target:
        w, h = rng.integers(2, max(3, size // 10) + 1, size=2)
        i, j = rng.integers(1, size - 1 - w), rng.integers(1, size - 1 - h)
        block = occ[i:i + w, j:j + h]
        placed += int(np.sum(block == CellState.FREE))
        block[...] = CellState.UNSAFE
    occ[c - g - 1:c + g + 1, c - g - 1:c + g + 1] = CellState.FREE
    occ[c - g:c + g, c - g:c + g] = CellState.GOAL
    return occ


def cmd_bench(args) -> int:
    warmup()
    rows = []
    seed = args.seed if args.seed is not None else 0
    for size, method, tol in itertools.product(args.sizes, args.methods, args.tols):
        occ = bench_grid(size, args.obstacles, seed)
        params = SolverParams(omega=args.omega, tol=tol, max_iters=args.max_iters, method=method)
        try:
            fld = solve(occ, params)
            st = fld.stats
        except NonConverged as exc:
            st = exc.stats
        rows.append({"size": size, "method": method, "tol": tol, "iterations": st.iterations,
                     "wall_time": st.wall_time, "final_residual": st.final_residual,
                     "converged": st.converged})
        log.info("size=%d method=%s tol=%g iters=%d time=%.4fs", size, method, tol, st.iterations,
                 st.wall_time)
    out = Path(args.out or "bench.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    _emit(rows)
    return EXIT_OK


# ---------------------------------------------------------------------------


def _floats(text: str) -> list[float]:
    return [float(s) for s in text.split(",") if s]


def _ints(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s]


def _methods(text: str) -> list[str]:
    ms = [s for s in text.split(",") if s]
    for m in ms:
        if m not in METHODS:
            raise argparse.ArgumentTypeError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    return ms


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", help="scenario JSON file")
    common.add_argument("--out", help="output directory (solve/render/run) or file (train/bench)")
    common.add_argument("--seed", type=int, help="override the scenario seed")
    common.add_argument("--verbose", "-v", action="store_true", help="log progress to stderr")
    spec = argparse.ArgumentParser(add_help=False)
    spec.add_argument("--spec-text", help="formula given inline")
    spec.add_argument("--spec", help="file holding one formula")

    p = _Parser(prog="hclbf", description="STL-driven harmonic safety-filter toolkit.",
                epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    kw = dict(formatter_class=argparse.RawDescriptionHelpFormatter, epilog=EPILOG)

    s = sub.add_parser("check", parents=[common, spec], help="parse and pretty-print a formula", **kw)
    s.set_defaults(func=cmd_check)

    s = sub.add_parser("solve", parents=[common], help="solve and export the field of every epoch", **kw)
    s.add_argument("--gradient", action="store_true", help="also write <stem>_grad.csv")
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("render", parents=[common], help="render every epoch as PPM and SVG", **kw)
    s.add_argument("--every", type=int, default=2, help="gradient arrow spacing in cells")
    s.add_argument("--scale", type=int, default=1, help="PPM pixels per cell")
    s.add_argument("--trajectory", help="trajectory CSV to overlay on the SVG")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("run", parents=[common], help="simulate a scenario", **kw)
    s.add_argument("--no-filter", action="store_true", help="disable the safety filter")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("verify", parents=[common, spec], help="monitor a trajectory CSV", **kw)
    s.add_argument("--trajectory", help="trajectory CSV (t, x, y columns)")
    s.add_argument("--hold", type=float, help="hold the last sample until this time")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("train", parents=[common], help="tabular Q-learning on the scenario grid", **kw)
    s.add_argument("--episodes", type=int, default=5000)
    s.add_argument("--gamma", type=float, default=0.95)
    s.add_argument("--alpha-lr", type=float, default=0.5)
    s.add_argument("--epsilon", type=float, default=0.2)
    s.add_argument("--goal", type=float, nargs=2, metavar=("X", "Y"))
    s.add_argument("--eval-episodes", type=int, default=200)
    s.add_argument("--shielded-training", action="store_true",
                   help="filter exploratory actions through the safety filter")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("bench", parents=[common], help="solver sweep: sizes x methods x tolerances", **kw)
    s.add_argument("--sizes", type=_ints, default=[50, 100, 200])
    s.add_argument("--methods", type=_methods, default=list(METHODS))
    s.add_argument("--tols", type=_floats, default=[1e-4, 1e-6])
    s.add_argument("--obstacles", type=float, default=0.1, help="obstacle cell fraction")
    s.add_argument("--omega", type=float, default=1.8)
    s.add_argument("--max-iters", type=int, default=200000)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except stl.FragmentViolation as e:
        print(f"error: fragment violation {e}", file=sys.stderr)
        return EXIT_SPEC
    except stl.StlSyntaxError as e:
        print(f"error: syntax error: {e}", file=sys.stderr)
        return EXIT_SPEC
    except FileNotFoundError as e:
        print(f"error: file not found: {e.filename or e}", file=sys.stderr)
        return EXIT_NOT_FOUND
    except NonConverged as e:
        st = e.stats
        print(f"error: solver did not converge (epoch {e.epoch}): iterations={st.iterations} "
              f"residual={st.final_residual:.3e}", file=sys.stderr)
        return EXIT_NON_CONVERGED
    except (NoGoalCell, EmptyGoalIntersection) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NO_GOAL
    except StartInCollision as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_START_COLLISION
    except stl.HorizonTooShort as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_HORIZON
    except (ValueError, KeyError, TypeError, json.JSONDecodeError) as e:
        print(f"error: invalid input: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
