#!/usr/bin/env python3
"""Run the randomized cluttered-world batch with and without the filter.

Writes a JSON summary with safe/reach counts for the filtered runs (policies
alternate adversarial / noisy goal seeking by seed) and for the unfiltered
adversarial runs on the same worlds.
"""
import argparse
import json
import time
from dataclasses import asdict

from hclbf.field import warmup
from hclbf.sim import batch, random_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=1000, help="number of seeds")
    ap.add_argument("--first-seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="safety_batch.json")
    args = ap.parse_args()

    warmup()
    seeds = range(args.first_seed, args.first_seed + args.n)
    t0 = time.perf_counter()
    filtered, records = batch([random_scenario(s, "adversarial" if s % 2 == 0 else "noisy_goal_seek")
                               for s in seeds], args.workers)
    t1 = time.perf_counter()
    raw, raw_records = batch([random_scenario(s, "adversarial", filtered=False) for s in seeds], args.workers)
    t2 = time.perf_counter()

    result = {
        "filtered": filtered.to_dict() | {"seconds": t1 - t0},
        "unfiltered_adversarial": raw.to_dict() | {"seconds": t2 - t1},
        "unsafe_filtered_seeds": [r.seed for r in records if not (r.safe and r.always_ok)],
        "outcomes": {o: sum(r.outcome == o for r in records) for o in sorted({r.outcome for r in records})},
    }
    with open(args.out, "w") as fh:
        json.dump(result, fh, indent=2)
    print(json.dumps(result, indent=2))


if __name__ == "__main__":
    main()
