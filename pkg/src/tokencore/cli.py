"""Command-line front end.

Every command is batch-oriented and deterministic given its flags,
config file and seeds; wall-clock timing fields are the only exception
and live in their own output columns.  Exit codes: 0 success, 1 I/O
failure, 2 invalid arguments, 3 hard-invariant violation (including
training divergence).
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace as dc_replace
from pathlib import Path

import numpy as np

from . import analysis, fileio, harness
from .encoder import AFTER_ATTENTION, PipelineConfig, init_stack
from .errors import (
    InvalidArgumentError,
    InvariantViolationError,
    TrainingFailureError,
)
from .schedule import (
    FLOOR,
    ROUNDINGS,
    full_retention_schedule,
    generate_reference_suite,
    generate_schedule,
    input_truncation_schedule,
    schedules_to_csv,
)
from .selectors import (
    EUCLIDEAN,
    METRICS,
    EmbeddingMatrix,
    kcenter_exact,
    kcenter_greedy_batch,
    parse_selector,
    select_first_k,
    select_random,
)


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.12g}"
    return str(value)


# ---------------------------------------------------------------------
# config -> harness objects
# ---------------------------------------------------------------------


def _task_from(cfg: fileio.Config) -> harness.SyntheticTask:
    return harness.SyntheticTask(
        vocab_size=cfg.get_int("vocab", 16),
        seq_len=cfg.get_int("seq_len", 32),
        classes=cfg.get_int("classes", 2),
        redundancy=cfg.get_float("redundancy", 0.9),
        duplicate_pool=cfg.get_int("duplicate_pool", 1),
        seed=cfg.get_int("task_seed", 0),
    )


def _stack_from(cfg: fileio.Config) -> harness.StackConfig:
    return harness.StackConfig(
        layers=cfg.get_int("layers", 4),
        heads=cfg.get_int("heads", 2),
        dim=cfg.get_int("dim", 32),
        ffn_dim=cfg.get_int("ffn_dim", 64),
    )


def _train_from(cfg: fileio.Config) -> harness.TrainConfig:
    return harness.TrainConfig(
        learning_rate=cfg.get_float("lr", 0.05),
        epochs=cfg.get_int("epochs", 12),
        batch_size=cfg.get_int("batch_size", 16),
        seed=cfg.get_int("train_seed", 0),
        optimizer=cfg.get_str("optimizer", "momentum"),
        momentum=cfg.get_float("momentum", 0.9),
        clip_norm=cfg.get_float("clip_norm", 1.0),
    )


def _prepared_stack(cfg: fileio.Config, task, stack_cfg, train_cfg, seed: int):
    """Random-init stack, fine-tuned at full retention when train=true."""
    stack = init_stack(
        layers=stack_cfg.layers, heads=stack_cfg.heads, dim=stack_cfg.dim,
        ffn_dim=stack_cfg.ffn_dim, classes=task.classes,
        vocab=task.vocab_size, max_len=task.seq_len, seed=[seed, 2],
    )
    if cfg.get_bool("train", False):
        ds = harness.make_dataset(
            dc_replace(task, seed=[task.seed, seed, 0]),
            cfg.get_int("n_train", 200),
        )
        pipe = PipelineConfig(
            schedule=full_retention_schedule(task.seq_len, stack_cfg.layers),
            selector=parse_selector("first_k"),
        )
        stack, _ = harness.finetune(stack, ds, pipe, dc_replace(train_cfg, seed=seed))
    return stack


# ---------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------


def cmd_gen_configs(args) -> int:
    suite = generate_reference_suite(
        input_len=args.n, layers=args.layers, rounding=args.rounding
    )
    Path(args.out).write_text(schedules_to_csv(suite))
    print(f"wrote {len(suite)} configurations to {args.out}")
    return 0


def cmd_select(args) -> int:
    emb = EmbeddingMatrix(fileio.read_matrix(args.input))
    method = args.method.replace("-", "_")
    if method == "coreset":
        result = kcenter_greedy_batch(emb, args.k, m=args.m, metric=args.metric)
    elif method == "coreset_exact":
        result = kcenter_exact(emb, args.k, metric=args.metric)
    elif method == "first_k":
        result = select_first_k(emb, args.k, metric=args.metric)
    elif method == "random":
        result = select_random(emb, args.k, args.seed, metric=args.metric)
    else:
        raise InvalidArgumentError(f"unknown method {args.method!r}")
    print("indices," + ",".join(str(i) for i in result.selected))
    print("importance," + ",".join(_fmt(v) for v in result.importance))
    print("cover_radius," + _fmt(result.cover_radius))
    return 0


def _schedules_from(cfg: fileio.Config, task, stack_cfg):
    schedules = []
    if "p_values" in cfg.values:
        ratios = cfg.get_float_list("p_values")
        prune_uptos = cfg.get_int_list("prune_upto", "2")
        rounding = cfg.get_str("rounding", FLOOR)
        schedules += harness.decay_schedule_grid(
            task.seq_len, stack_cfg.layers, ratios, prune_uptos, rounding
        )
    if "input_keep" in cfg.values:
        for keep in cfg.get_int_list("input_keep"):
            schedules.append(
                input_truncation_schedule(task.seq_len, stack_cfg.layers, keep)
            )
    if not schedules:
        raise InvalidArgumentError("config needs p_values and/or input_keep")
    return schedules


def cmd_sweep(args) -> int:
    cfg = fileio.load_config(args.config)
    task = _task_from(cfg)
    stack_cfg = _stack_from(cfg)
    train_cfg = _train_from(cfg)
    selectors = [parse_selector(s) for s in cfg.get_list("selectors")]
    schedules = _schedules_from(cfg, task, stack_cfg)
    records = harness.sweep(
        selectors=selectors,
        schedules=schedules,
        seeds=cfg.get_int_list("seeds", "0"),
        task=task,
        stack=stack_cfg,
        train=train_cfg,
        n_train=cfg.get_int("n_train", 200),
        n_eval=cfg.get_int("n_eval", 200),
        modes=tuple(cfg.get_list("modes", "finetune")),
        placements=tuple(cfg.get_list("placements", AFTER_ATTENTION)),
        threads=args.threads,
        measure_time=not args.no_timing,
    )
    Path(args.out).write_text(harness.records_to_csv(records))
    failed = sum(1 for r in records if r.error)
    print(f"wrote {len(records)} rows to {args.out} ({failed} failed cells)")
    return 0


def cmd_pareto(args) -> int:
    with open(args.input, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise InvalidArgumentError(f"{args.input}: no data rows")
    for col in (args.speedup_col, args.metric_col):
        if col not in rows[0]:
            raise InvalidArgumentError(f"{args.input}: missing column {col!r}")
    points = [
        (float(r[args.speedup_col]), float(r[args.metric_col]))
        for r in rows
        if r.get("error", "") == "" or r.get("error") is None or r["error"] == ""
    ]
    targets = [float(t) for t in args.targets.split(",")]
    values = analysis.pareto_at(points, targets)
    lines = ["target," + args.metric_col]
    for t, v in zip(targets, values):
        lines.append(f"{_fmt(t)}," + ("NA" if v is None else _fmt(v)))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_bound_check(args) -> int:
    cfg = fileio.load_config(args.config)
    task = _task_from(cfg)
    stack_cfg = _stack_from(cfg)
    train_cfg = _train_from(cfg)
    seed = cfg.get_int("seed", 0)
    n_examples = cfg.get_int("n_examples", 20)

    stack = _prepared_stack(cfg, task, stack_cfg, train_cfg, seed)
    if cfg.get_bool("all_duplicates", False):
        data = harness.make_all_duplicate_embeddings(
            task.seq_len, stack_cfg.dim, n_examples, seed=[seed, 1]
        )
    else:
        ds = harness.make_dataset(dc_replace(task, seed=[task.seed, seed, 1]), n_examples)
        data = (list(ds.tokens), list(ds.labels))
    config = PipelineConfig(
        schedule=generate_schedule(
            task.seq_len, stack_cfg.layers,
            ratio=cfg.get_float("p", 0.5),
            prune_upto=cfg.get_int("prune_upto", 2),
        ),
        selector=parse_selector(cfg.get_str("selector", "coreset:m=1")),
        placement=cfg.get_str("placement", AFTER_ATTENTION),
    )
    report = analysis.selection_loss(stack, data, config)

    gaps = [r.loss_gap for r in report.records]
    bounds = [r.assembled_bound for r in report.records if r.assembled_bound is not None]
    print(f"examples,{len(report.records)}")
    print(f"mean_loss_gap,{_fmt(float(np.mean(gaps)))}")
    print(f"max_loss_gap,{_fmt(float(np.max(gaps)))}")
    print(f"max_delta,{_fmt(report.max_delta())}")
    print("mean_assembled_bound," + (_fmt(float(np.mean(bounds))) if bounds else "undefined"))
    print(f"ap0_violations,{report.ap0_violations}")
    print("layer,mean_delta,replaced,mean_displacement,mean_bound")
    layer_count = len(report.records[0].layer_audits)
    for j in range(layer_count):
        audits = [r.layer_audits[j] for r in report.records]
        print(
            f"{j + 1},{_fmt(float(np.mean([a.delta for a in audits])))},"
            f"{audits[0].replaced},"
            f"{_fmt(float(np.mean([a.displacement_sum for a in audits])))},"
            f"{_fmt(float(np.mean([a.bound for a in audits])))}"
        )
    if report.ap0_violations:
        raise InvariantViolationError(
            f"{report.ap0_violations} displacement-bound violations"
        )
    return 0


def cmd_ablate_importance(args) -> int:
    cfg = fileio.load_config(args.config)
    task = _task_from(cfg)
    stack_cfg = _stack_from(cfg)
    train_cfg = _train_from(cfg)
    seed = cfg.get_int("seed", 0)
    stack = _prepared_stack(cfg, task, stack_cfg, train_cfg, seed)
    ds = harness.make_dataset(
        dc_replace(task, seed=[task.seed, seed, 1]), cfg.get_int("n_examples", 100)
    )
    selector = parse_selector(cfg.get_str("selector", "coreset:m=1"))
    out_lines = ["layer,rank,mean_importance,mi"]
    for layer_j in cfg.get_int_list("encoder_layers", "1"):
        curve = analysis.importance_ablation(
            stack, (list(ds.tokens), list(ds.labels)), layer_j, selector
        )
        for p in curve.points:
            out_lines.append(
                f"{layer_j},{p.rank},{_fmt(p.mean_importance)},{_fmt(p.mi)}"
            )
        print(
            f"layer {layer_j}: spearman(importance, mi) = "
            f"{_fmt(curve.spearman_importance_vs_mi())}"
        )
    Path(args.out).write_text("\n".join(out_lines) + "\n")
    print(f"wrote curve to {args.out}")
    return 0


def cmd_redundancy(args) -> int:
    cfg = fileio.load_config(args.config)
    task = _task_from(cfg)
    stack_cfg = _stack_from(cfg)
    train_cfg = _train_from(cfg)
    seed = cfg.get_int("seed", 0)
    stack = _prepared_stack(cfg, task, stack_cfg, train_cfg, seed)
    ds = harness.make_dataset(
        dc_replace(task, seed=[task.seed, seed, 1]), cfg.get_int("n_examples", 50)
    )
    layer_js = cfg.get_int_list("layers_probed", "1," + str(stack_cfg.layers))
    full = PipelineConfig(
        schedule=full_retention_schedule(task.seq_len, stack_cfg.layers),
        selector=parse_selector("first_k"),
    )
    from .encoder import forward_from_ids

    traces = [
        forward_from_ids(stack, ds.tokens[i], full, example_key=i)
        for i in range(ds.n)
    ]
    report = analysis.redundancy_report(
        traces, layer_js,
        eps=cfg.get_float("eps", 0.2),
        min_pts=cfg.get_int("min_pts", 1),
        bins=cfg.get_int("bins", 20),
    )
    prefix = args.out_prefix
    for j in layer_js:
        edges, counts = report.histograms[j]
        lines = ["# cls-cosine-similarity histogram: bin_left bin_right count"]
        for b in range(counts.size):
            lines.append(f"{edges[b]:.6f} {edges[b + 1]:.6f} {counts[b]}")
        Path(f"{prefix}_layer{j}.hist").write_text("\n".join(lines) + "\n")
    cluster_lines = ["layer,example,clusters"]
    for j in layer_js:
        for i, c in enumerate(report.cluster_counts[j]):
            cluster_lines.append(f"{j},{i},{c}")
    Path(f"{prefix}_clusters.csv").write_text("\n".join(cluster_lines) + "\n")
    for j in layer_js:
        mean_sim = float(np.mean(report.similarity_values[j]))
        mean_clusters = float(np.mean(report.cluster_counts[j]))
        print(
            f"layer {j}: mean cls-similarity {_fmt(mean_sim)}, "
            f"mean clusters {_fmt(mean_clusters)}"
        )
    print(f"wrote histograms and cluster counts with prefix {prefix}")
    return 0


# ---------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tokencore",
        description="Core-set token selection: schedules, selectors, sweeps and audits.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-configs", help="write the reference schedule grid as CSV")
    p.add_argument("--n", type=int, default=128, help="input sequence length")
    p.add_argument("--layers", type=int, default=12)
    p.add_argument("--rounding", choices=ROUNDINGS, default=FLOOR)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_configs)

    p = sub.add_parser("select", help="run a selector on a binary matrix file")
    p.add_argument("--input", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--m", type=int, default=1)
    p.add_argument(
        "--method", default="coreset",
        choices=["coreset", "coreset-exact", "first-k", "random"],
    )
    p.add_argument("--metric", choices=list(METRICS), default=EUCLIDEAN)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("sweep", help="selector x schedule x seed grid, CSV out")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--no-timing", action="store_true",
                   help="skip wall-clock measurement (timing columns become 0)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("pareto", help="frontier interpolation at target speedups")
    p.add_argument("--input", required=True)
    p.add_argument("--targets", required=True, help="comma-separated speedups")
    p.add_argument("--speedup-col", default="speedup")
    p.add_argument("--metric-col", default="accuracy")
    p.add_argument("--out")
    p.set_defaults(func=cmd_pareto)

    p = sub.add_parser("bound-check", help="loss-gap measurement and displacement audit")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_bound_check)

    p = sub.add_parser("ablate-importance", help="drop-one-token mutual-information curve")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate_importance)

    p = sub.add_parser("redundancy", help="cls-similarity histograms and cluster counts")
    p.add_argument("--config", required=True)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_redundancy)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args) or 0
    except InvalidArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1
    except (InvariantViolationError, TrainingFailureError) as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
