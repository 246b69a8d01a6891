#!/usr/bin/env python3
"""Depth-wise redundancy of token embeddings.

Trains a stack at full retention, then measures per layer (a) the
cosine similarity between the CLS row and every other token and (b) the
number of epsilon-graph clusters the tokens form under cosine
dissimilarity.  Rising similarity and falling cluster counts with depth
are the redundancy that makes mid-stack token selection cheap.
"""

import argparse

import numpy as np

import tokencore as tc
from tokencore.analysis import redundancy_report
from tokencore.harness import make_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-examples", type=int, default=60)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--eps", type=float, default=0.2)
    ap.add_argument("--redundancy", type=float, default=0.6)
    ap.add_argument("--out-prefix", default="")
    args = ap.parse_args()

    task = tc.SyntheticTask(redundancy=args.redundancy, duplicate_pool=2, seed=0)
    train_ds = make_dataset(task, 160)
    stack = tc.init_stack(seed=3)
    pipe = tc.PipelineConfig(
        schedule=tc.full_retention_schedule(task.seq_len, 4),
        selector=tc.SelectorKind.first_k(),
    )
    stack, _ = tc.finetune(stack, train_ds, pipe, tc.TrainConfig(epochs=args.epochs))

    probe_task = tc.SyntheticTask(redundancy=args.redundancy, duplicate_pool=2, seed=17)
    probe = make_dataset(probe_task, args.n_examples)
    traces = [
        tc.forward_from_ids(stack, probe.tokens[i], pipe, example_key=i)
        for i in range(probe.n)
    ]
    layers = list(range(1, stack.num_layers + 1))
    report = redundancy_report(traces, layers, eps=args.eps)

    print(f"{'layer':>6} {'mean cls-sim':>13} {'mean clusters':>14} {'min':>5} {'max':>5}")
    for j in layers:
        counts = report.cluster_counts[j]
        print(
            f"{j:>6} {float(np.mean(report.similarity_values[j])):>13.3f} "
            f"{float(np.mean(counts)):>14.2f} {min(counts):>5} {max(counts):>5}"
        )

    if args.out_prefix:
        for j in layers:
            edges, counts = report.histograms[j]
            lines = ["# cls-cosine-similarity histogram: bin_left bin_right count"]
            lines += [
                f"{edges[b]:.6f} {edges[b + 1]:.6f} {counts[b]}"
                for b in range(counts.size)
            ]
            path = f"{args.out_prefix}_layer{j}.hist"
            with open(path, "w") as fh:
                fh.write("\n".join(lines) + "\n")
        print(f"\nhistograms written with prefix {args.out_prefix}")


if __name__ == "__main__":
    main()
