#!/usr/bin/env python3
"""Field-and-trajectories figure: heatmap, gradient arrows and filtered runs.

Picks one cluttered world, solves its field, runs the adversarial and the
noisy goal-seeking policy from the same start, and draws both paths on the SVG.
"""
import argparse
from dataclasses import replace
from pathlib import Path

from hclbf.render import field_image, write_ppm, write_svg
from hclbf.sim import PolicyConfig, check_safety, prepare, random_scenario, run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=3)
    ap.add_argument("--every", type=int, default=2, help="arrow spacing in cells")
    ap.add_argument("--scale", type=int, default=8, help="PPM pixels per cell")
    ap.add_argument("--out", default="figure")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sc = random_scenario(args.seed, "adversarial")
    prep = prepare(sc)
    paths = []
    for kind in ("adversarial", "noisy_goal_seek"):
        traj = run(replace(sc, policy=PolicyConfig(kind=kind)), prep)
        ok = check_safety(traj, prep.schedule).safe
        print(f"{kind}: {traj.outcome} after {len(traj.steps)} steps, "
              f"{traj.projections()} projections, safe={ok}")
        paths.append(traj.positions())
        traj.write_csv(out / f"trajectory_{kind}.csv")
    fld = prep.fields[0]
    write_ppm(out / "field.ppm", field_image(fld, prep.schedule.epochs[0].occupancy), args.scale)
    write_svg(out / "field.svg", fld, every=args.every, trajectories=paths)
    print(f"wrote {out / 'field.ppm'} and {out / 'field.svg'}")


if __name__ == "__main__":
    main()
