#!/usr/bin/env python3
"""Batch-size ablation for the coverage selector.

Runs the six per-round batch sizes (1, ceil(0.1 k) .. ceil(0.4 k), and
k-1) over a small schedule grid and reports each variant's accuracy
alongside the per-schedule best ("opt").  m=1 is the most fine-grained
selection and the slowest; k-1 selects everything in a single round.
"""

import argparse
from pathlib import Path

import numpy as np

import tokencore as tc
from tokencore.harness import (
    StackConfig,
    best_per_schedule,
    coreset_m_grid,
    decay_schedule_grid,
    records_to_csv,
)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--redundancy", type=float, default=0.9)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--p-values", default="0.25,0.5")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", default="m_ablation.csv")
    args = ap.parse_args()

    task = tc.SyntheticTask(redundancy=args.redundancy, seed=0)
    schedules = decay_schedule_grid(
        task.seq_len, 4, [float(p) for p in args.p_values.split(",")], [2]
    )
    records = tc.sweep(
        selectors=coreset_m_grid(),
        schedules=schedules,
        seeds=list(range(args.seeds)),
        task=task,
        stack=StackConfig(),
        train=tc.TrainConfig(epochs=args.epochs),
        n_train=160,
        n_eval=200,
        threads=args.threads,
    )
    Path(args.out).write_text(records_to_csv(records))
    print(f"wrote {len(records)} rows to {args.out}\n")

    print(f"{'variant':<18}" + "".join(f"{s.schedule_id():>12}" for s in schedules))
    for kind in coreset_m_grid():
        cells = []
        for sched in schedules:
            rows = [
                r.accuracy for r in records
                if r.selector == kind.label() and r.schedule_id == sched.schedule_id()
                and not r.error
            ]
            cells.append(f"{np.mean(rows):>12.3f}" if rows else f"{'--':>12}")
        print(f"{kind.label():<18}" + "".join(cells))

    best = best_per_schedule(records)
    print("\nper-schedule best (opt):")
    for sched_id, record in sorted(best.items()):
        print(f"  {sched_id:<12} {record.accuracy:.3f}  ({record.selector}, seed {record.seed})")


if __name__ == "__main__":
    main()
