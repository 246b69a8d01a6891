"""Synthetic data, fine-tuning, evaluation and experiment sweeps.

The synthetic classification task plants one key token (out of C class
markers) at a random position of each sequence and fills the rest with
filler tokens; the redundancy dial controls what fraction of fillers
come from a tiny duplicate pool versus the wide part of the vocabulary.
High redundancy is the regime where subset selection by coverage has a
provable edge: duplicates cost nothing to drop.

Sweeps run the Cartesian product of selectors x schedules x seeds, one
trained-and-evaluated stack per cell, and emit rows suitable for Pareto
extraction.  Every cell is a pure function of its configuration and
seed; wall-clock timings are the only nondeterministic outputs and are
kept in their own columns.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace as dc_replace
from typing import NamedTuple, Sequence

import numpy as np

from .analysis import space_reduction
from .errors import InvalidArgumentError, TrainingFailureError
from .encoder import (
    AFTER_ATTENTION,
    EncoderStack,
    PipelineConfig,
    backward,
    count_flops,
    forward_from_ids,
    init_stack,
)
from .schedule import LengthSchedule, full_retention_schedule, generate_schedule
from .selectors import SelectorKind


class Dataset(NamedTuple):
    tokens: np.ndarray  # (n, seq_len) integer ids, column 0 is CLS
    labels: np.ndarray  # (n,)

    @property
    def n(self) -> int:
        return self.tokens.shape[0]


@dataclass(frozen=True)
class SyntheticTask:
    """Key-token classification with tunable filler redundancy.

    Vocabulary layout: id 0 is CLS, ids 1..classes are the key tokens
    (one per class), the next ``duplicate_pool`` ids form the small
    high-redundancy filler pool, and the remainder is the wide filler
    range.  The label of a sequence is the class of the key token it
    contains.
    """

    vocab_size: int = 16
    seq_len: int = 32
    classes: int = 2
    redundancy: float = 0.9
    duplicate_pool: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.redundancy <= 1.0:
            raise InvalidArgumentError("redundancy must be in [0, 1]")
        if self.classes < 2:
            raise InvalidArgumentError("need at least two classes")
        if self.seq_len < 3:
            raise InvalidArgumentError("sequences need CLS, a key and a filler slot")
        if self.duplicate_pool < 1:
            raise InvalidArgumentError("duplicate pool must have at least one id")
        if self.vocab_size < self.classes + self.duplicate_pool + 2:
            raise InvalidArgumentError(
                "vocabulary too small for CLS + keys + pools "
                f"(need >= {self.classes + self.duplicate_pool + 2})"
            )

    @property
    def key_ids(self) -> range:
        return range(1, self.classes + 1)

    @property
    def pool_ids(self) -> range:
        return range(self.classes + 1, self.classes + 1 + self.duplicate_pool)

    @property
    def wide_ids(self) -> range:
        return range(self.classes + 1 + self.duplicate_pool, self.vocab_size)

    def label_of(self, tokens: np.ndarray) -> int:
        """The documented labeling rule: class of the first key token."""
        for t in tokens[1:]:
            if 1 <= t <= self.classes:
                return int(t) - 1
        raise InvalidArgumentError("sequence contains no key token")


def make_dataset(task: SyntheticTask, n: int) -> Dataset:
    """n sequences, deterministically from the task seed.  Labels are
    balanced exactly (up to one remainder example per class) and each
    sequence carries exactly one key token."""
    if n < 1:
        raise InvalidArgumentError("need at least one example")
    rng = np.random.default_rng(task.seed)
    labels = rng.permutation(np.arange(n) % task.classes)
    tokens = np.zeros((n, task.seq_len), dtype=np.int64)

    coin = rng.random((n, task.seq_len))
    pool = rng.integers(task.pool_ids.start, task.pool_ids.stop, size=(n, task.seq_len))
    wide = rng.integers(task.wide_ids.start, task.wide_ids.stop, size=(n, task.seq_len))
    filler = np.where(coin < task.redundancy, pool, wide)
    tokens[:, 1:] = filler[:, 1:]

    key_pos = rng.integers(1, task.seq_len, size=n)
    tokens[np.arange(n), key_pos] = labels + 1
    return Dataset(tokens=tokens, labels=labels)


def make_all_duplicate_embeddings(
    seq_len: int, dim: int, n: int, seed: int = 0
) -> tuple[list[np.ndarray], np.ndarray]:
    """Embedding sequences whose non-CLS rows are exact copies of one
    vector (a fresh one per example), with zero labels.

    This is the zero-cover-radius fixture: built directly in embedding
    space because position embeddings would otherwise make equal token
    ids distinct.  For measurement only, not for training.
    """
    rng = np.random.default_rng(seed)
    examples = []
    for _ in range(n):
        cls_row = rng.normal(size=dim)
        body = rng.normal(size=dim)
        examples.append(np.vstack([cls_row] + [body] * (seq_len - 1)))
    return examples, np.zeros(n, dtype=np.int64)


# ---------------------------------------------------------------------
# training
# ---------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 12
    batch_size: int = 16
    seed: int = 0
    optimizer: str = "momentum"  # "sgd" or "momentum"
    momentum: float = 0.9
    clip_norm: float = 1.0  # global gradient-norm cap; <= 0 disables

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise InvalidArgumentError("learning rate, batch size and epochs must be positive")
        if self.optimizer not in ("sgd", "momentum"):
            raise InvalidArgumentError("optimizer must be 'sgd' or 'momentum'")


@dataclass(frozen=True)
class StackConfig:
    layers: int = 4
    heads: int = 2
    dim: int = 32
    ffn_dim: int = 64


def finetune(
    stack: EncoderStack,
    dataset: Dataset,
    pipeline: PipelineConfig,
    train: TrainConfig,
) -> tuple[EncoderStack, list[float]]:
    """SGD fine-tuning with the token selection active on every forward
    pass (tokens are re-selected each time since the embeddings move).

    Returns a trained copy of the stack (the input is untouched) and
    the per-epoch mean loss.  The random selector is keyed by dataset
    index, so its subsets are stable across epochs but differ across
    examples.  Raises TrainingFailureError on a non-finite loss.
    """
    work = stack.copy()
    if train.epochs == 0:
        return work, []
    rng = np.random.default_rng([train.seed, 7])
    names = [name for name, _ in work.named_parameters()]
    velocity = {name: np.zeros_like(p) for name, p in work.named_parameters()}
    losses = []
    for epoch in range(train.epochs):
        order = rng.permutation(dataset.n)
        epoch_loss = 0.0
        for start in range(0, dataset.n, train.batch_size):
            batch = order[start : start + train.batch_size]
            grad_sum = None
            for i in batch:
                trace = forward_from_ids(
                    work, dataset.tokens[i], pipeline,
                    label=int(dataset.labels[i]), want_grads=True, example_key=int(i),
                )
                if not np.isfinite(trace.loss):
                    raise TrainingFailureError(epoch)
                epoch_loss += trace.loss
                g = backward(work, trace)
                if grad_sum is None:
                    grad_sum = g.params
                else:
                    for name in names:
                        grad_sum[name] += g.params[name]
            scale = 1.0 / len(batch)
            if train.clip_norm > 0:
                norm = np.sqrt(
                    sum(((grad_sum[name] * scale) ** 2).sum() for name in names)
                )
                if norm > train.clip_norm:
                    scale *= train.clip_norm / norm
            params = dict(work.named_parameters())
            for name in names:
                step = grad_sum[name] * scale
                if train.optimizer == "momentum":
                    velocity[name] = train.momentum * velocity[name] + step
                    step = velocity[name]
                params[name] -= train.learning_rate * step
        losses.append(epoch_loss / dataset.n)
    return work, losses


# ---------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------


DETERMINISTIC_COLUMNS = (
    "schedule_id", "selector", "seed", "mode", "placement",
    "accuracy", "space_reduction", "flops_base", "flops_pruned",
    "flops_ratio", "error",
)
TIMING_COLUMNS = ("wall_clock_base", "wall_clock_pruned", "speedup")
CSV_COLUMNS = DETERMINISTIC_COLUMNS + TIMING_COLUMNS


@dataclass
class RunRecord:
    """One sweep-cell outcome.  Wall-clock fields are measured and vary
    run to run; everything else is a pure function of the cell."""

    schedule_id: str
    selector: str
    seed: int
    mode: str
    placement: str
    accuracy: float
    space_reduction: float
    flops_base: int
    flops_pruned: int
    flops_ratio: float
    error: str = ""
    wall_clock_base: float = 0.0
    wall_clock_pruned: float = 0.0
    speedup: float = 0.0

    def to_csv_row(self) -> list[str]:
        def fmt(v):
            if isinstance(v, float):
                return f"{v:.12g}"
            return str(v)

        return [fmt(getattr(self, c)) for c in CSV_COLUMNS]

    @classmethod
    def from_csv_row(cls, row: list[str]) -> "RunRecord":
        vals = dict(zip(CSV_COLUMNS, row))
        return cls(
            schedule_id=vals["schedule_id"],
            selector=vals["selector"],
            seed=int(vals["seed"]),
            mode=vals["mode"],
            placement=vals["placement"],
            accuracy=float(vals["accuracy"]),
            space_reduction=float(vals["space_reduction"]),
            flops_base=int(vals["flops_base"]),
            flops_pruned=int(vals["flops_pruned"]),
            flops_ratio=float(vals["flops_ratio"]),
            error=vals["error"],
            wall_clock_base=float(vals["wall_clock_base"]),
            wall_clock_pruned=float(vals["wall_clock_pruned"]),
            speedup=float(vals["speedup"]),
        )


def records_to_csv(records: Sequence[RunRecord]) -> str:
    lines = [",".join(CSV_COLUMNS)]
    lines += [",".join(r.to_csv_row()) for r in records]
    return "\n".join(lines) + "\n"


def _predict(stack, dataset, pipeline):
    preds = np.empty(dataset.n, dtype=np.int64)
    for i in range(dataset.n):
        trace = forward_from_ids(stack, dataset.tokens[i], pipeline, example_key=int(i))
        preds[i] = int(np.argmax(trace.logits))
    return preds


def measure_wall_clock(stack, dataset, pipeline, repeats: int = 3, limit: int = 32) -> float:
    """Median seconds for one pass over (up to) ``limit`` examples,
    after one warm-up pass.  Single-threaded by construction."""
    sub = Dataset(tokens=dataset.tokens[:limit], labels=dataset.labels[:limit])
    _predict(stack, sub, pipeline)  # warm-up
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        _predict(stack, sub, pipeline)
        times.append(time.perf_counter() - start)
    return float(np.median(times))


def evaluate(
    stack: EncoderStack,
    dataset: Dataset,
    pipeline: PipelineConfig,
    seed: int = 0,
    mode: str = "finetune",
    measure_time: bool = True,
) -> tuple[float, RunRecord]:
    """Inference pass: accuracy plus the analytic and measured costs of
    the schedule against a full-retention pass of the same stack."""
    preds = _predict(stack, dataset, pipeline)
    accuracy = float((preds == dataset.labels).mean())

    schedule = pipeline.schedule
    base_schedule = full_retention_schedule(schedule.input_len, schedule.layers)
    flops_pruned = count_flops(schedule, stack.dim, stack.heads, stack.ffn_dim,
                               placement=pipeline.placement)
    flops_base = count_flops(base_schedule, stack.dim, stack.heads, stack.ffn_dim,
                             placement=pipeline.placement)
    record = RunRecord(
        schedule_id=schedule.schedule_id(),
        selector=pipeline.selector.label(),
        seed=seed,
        mode=mode,
        placement=pipeline.placement,
        accuracy=accuracy,
        space_reduction=space_reduction(schedule, stack.dim),
        flops_base=flops_base,
        flops_pruned=flops_pruned,
        flops_ratio=flops_base / flops_pruned,
    )
    if measure_time:
        base_pipe = dc_replace(pipeline, schedule=base_schedule)
        record.wall_clock_pruned = measure_wall_clock(stack, dataset, pipeline)
        record.wall_clock_base = measure_wall_clock(stack, dataset, base_pipe)
        record.speedup = record.wall_clock_base / record.wall_clock_pruned
    return accuracy, record


# ---------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------


MODES = ("finetune", "inference_only")


@dataclass(frozen=True)
class SweepCell:
    selector: SelectorKind
    schedule: LengthSchedule
    seed: int
    mode: str = "finetune"
    placement: str = AFTER_ATTENTION
    task: SyntheticTask = field(default_factory=SyntheticTask)
    stack: StackConfig = field(default_factory=StackConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    n_train: int = 200
    n_eval: int = 200


def run_sweep_cell(cell: SweepCell, measure_time: bool = True) -> RunRecord:
    """Train and evaluate one cell.  A trial derives all of its
    randomness (data draw, parameter init, batch order) from the cell
    seed, so reruns are bit-identical."""
    if cell.mode not in MODES:
        raise InvalidArgumentError(f"mode must be one of {MODES}")
    base = cell.task.seed
    ds_train = make_dataset(dc_replace(cell.task, seed=[base, cell.seed, 0]), cell.n_train)
    ds_eval = make_dataset(dc_replace(cell.task, seed=[base, cell.seed, 1]), cell.n_eval)
    stack0 = init_stack(
        layers=cell.stack.layers, heads=cell.stack.heads, dim=cell.stack.dim,
        ffn_dim=cell.stack.ffn_dim, classes=cell.task.classes,
        vocab=cell.task.vocab_size, max_len=cell.task.seq_len, seed=[cell.seed, 2],
    )
    pipeline = PipelineConfig(
        schedule=cell.schedule, selector=cell.selector, placement=cell.placement
    )
    train_cfg = dc_replace(cell.train, seed=cell.seed)
    if cell.mode == "inference_only":
        full = full_retention_schedule(cell.schedule.input_len, cell.schedule.layers)
        train_pipe = dc_replace(pipeline, schedule=full)
    else:
        train_pipe = pipeline
    trained, _ = finetune(stack0, ds_train, train_pipe, train_cfg)
    _, record = evaluate(
        trained, ds_eval, pipeline, seed=cell.seed, mode=cell.mode,
        measure_time=measure_time,
    )
    return record


def _cell_worker(args):
    cell, measure_time = args
    try:
        return run_sweep_cell(cell, measure_time=measure_time)
    except Exception as exc:  # cell failures are recorded, not fatal
        return RunRecord(
            schedule_id=cell.schedule.schedule_id(),
            selector=cell.selector.label(),
            seed=cell.seed,
            mode=cell.mode,
            placement=cell.placement,
            accuracy=float("nan"),
            space_reduction=float("nan"),
            flops_base=0,
            flops_pruned=0,
            flops_ratio=float("nan"),
            error=f"{type(exc).__name__}: {exc}",
        )


def sweep(
    selectors: Sequence[SelectorKind],
    schedules: Sequence[LengthSchedule],
    seeds: Sequence[int],
    task: SyntheticTask = SyntheticTask(),
    stack: StackConfig = StackConfig(),
    train: TrainConfig = TrainConfig(),
    n_train: int = 200,
    n_eval: int = 200,
    modes: Sequence[str] = ("finetune",),
    placements: Sequence[str] = (AFTER_ATTENTION,),
    threads: int = 1,
    measure_time: bool = True,
) -> list[RunRecord]:
    """Cartesian product of selectors x schedules x seeds (x modes x
    placements).  Failed cells appear as rows with an error message and
    NaN metrics; output order is the deterministic product order
    regardless of thread count."""
    cells = [
        SweepCell(
            selector=sel, schedule=sch, seed=seed, mode=mode, placement=placement,
            task=task, stack=stack, train=train, n_train=n_train, n_eval=n_eval,
        )
        for sel in selectors
        for sch in schedules
        for seed in seeds
        for mode in modes
        for placement in placements
    ]
    jobs = [(cell, measure_time) for cell in cells]
    if threads <= 1:
        return [_cell_worker(job) for job in jobs]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_cell_worker, jobs))


def coreset_m_grid() -> list[SelectorKind]:
    """The six batch-size variants of the coverage selector swept by the
    ablation harness; per layer with target k they resolve to
    1, ceil(0.1 k) .. ceil(0.4 k), and k-1."""
    return [
        SelectorKind.coreset(1),
        SelectorKind.coreset_frac(0.1),
        SelectorKind.coreset_frac(0.2),
        SelectorKind.coreset_frac(0.3),
        SelectorKind.coreset_frac(0.4),
        SelectorKind.coreset_full_batch(),
    ]


def best_per_schedule(records: Sequence[RunRecord]) -> dict[str, RunRecord]:
    """Per-schedule best-accuracy record; the 'opt' aggregation over a
    selector family such as the coreset batch-size grid."""
    best: dict[str, RunRecord] = {}
    for r in records:
        if r.error:
            continue
        key = r.schedule_id
        if key not in best or r.accuracy > best[key].accuracy:
            best[key] = r
    return best


def decay_schedule_grid(
    input_len: int,
    layers: int,
    ratios: Sequence[float],
    prune_uptos: Sequence[int],
    rounding: str = "floor",
) -> list[LengthSchedule]:
    return [
        generate_schedule(input_len, layers, ratio=p, prune_upto=pu, rounding=rounding)
        for p in ratios
        for pu in prune_uptos
    ]
