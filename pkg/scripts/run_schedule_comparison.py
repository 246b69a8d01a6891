#!/usr/bin/env python3
"""Decay-generated length schedules versus random monotone ones.

Both schedule families get the same coverage selector and training
budget; the comparison is the spread of (accuracy, analytic cost)
operating points each family makes reachable.
"""

import argparse
from pathlib import Path

import numpy as np

import tokencore as tc
from tokencore.harness import StackConfig, decay_schedule_grid, records_to_csv


def summarize(name, rows):
    accs = [r.accuracy for r in rows if not r.error]
    reds = [r.space_reduction for r in rows if not r.error]
    print(
        f"{name:<8} accuracy [{min(accs):.3f}, {max(accs):.3f}] "
        f"mean {np.mean(accs):.3f} | space reduction "
        f"[{min(reds):.3f}, {max(reds):.3f}]"
    )


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--n-random", type=int, default=6, help="random schedules to draw")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", default="schedule_comparison.csv")
    args = ap.parse_args()

    task = tc.SyntheticTask(redundancy=0.9, seed=0)
    decay = decay_schedule_grid(task.seq_len, 4, [0.25, 0.5, 0.75], [1, 2])
    random_schedules = [
        tc.generate_random_schedule(task.seq_len, 4, seed) for seed in range(args.n_random)
    ]
    common = dict(
        selectors=[tc.SelectorKind.coreset(1)],
        seeds=list(range(args.seeds)),
        task=task,
        stack=StackConfig(),
        train=tc.TrainConfig(epochs=args.epochs),
        n_train=160,
        n_eval=200,
        threads=args.threads,
    )
    decay_rows = tc.sweep(schedules=decay, **common)
    random_rows = tc.sweep(schedules=random_schedules, **common)
    Path(args.out).write_text(records_to_csv(decay_rows + random_rows))
    print(f"wrote {len(decay_rows) + len(random_rows)} rows to {args.out}\n")
    summarize("decay", decay_rows)
    summarize("random", random_rows)


if __name__ == "__main__":
    main()
