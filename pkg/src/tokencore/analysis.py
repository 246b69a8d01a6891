"""Measurements over schedules, selections and traces.

Covers the analytic cost formulas (attention-layer space complexity,
speedup ratios), Pareto-frontier extraction with strict no-extrapolation
interpolation, the token-reduction loss measurement together with its
cover-radius deviation-bound audit, discrete mutual information between
prediction lists, the drop-one-token importance ablation, and the
embedding-redundancy study (CLS cosine histograms plus density
clustering).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace as dc_replace
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidArgumentError
from .encoder import (
    AFTER_ATTENTION,
    EncoderStack,
    ForwardTrace,
    PipelineConfig,
    forward,
    forward_from_ids,
    forward_replace,
)
from .schedule import LengthSchedule, full_retention_schedule
from .selectors import (
    COSINE,
    CLS_INDEX,
    EmbeddingMatrix,
    SelectorKind,
    apply_selector,
    pairwise_distances,
)

AP0_SLACK = 1e-12


# ---------------------------------------------------------------------
# cost formulas
# ---------------------------------------------------------------------


def attention_space(schedule: LengthSchedule, dim: int) -> int:
    """Attention-layer space cost of a schedule: sum over layers of
    length^2 + length * dim."""
    return sum(l * l + l * dim for l in schedule.lengths[1:])


def space_reduction(schedule: LengthSchedule, dim: int) -> float:
    """1 - pruned/base attention space, base holding every layer at the
    input length.  Depends only on the schedule and dim."""
    base = schedule.input_len * schedule.input_len + schedule.input_len * dim
    return 1.0 - attention_space(schedule, dim) / (base * schedule.layers)


def speedup(base_seconds: float, pruned_seconds: float) -> float:
    if base_seconds <= 0 or pruned_seconds <= 0:
        raise InvalidArgumentError("durations must be positive")
    return base_seconds / pruned_seconds


# ---------------------------------------------------------------------
# pareto extraction
# ---------------------------------------------------------------------


def pareto_front(points: Sequence[tuple[float, float]]) -> list[tuple[float, float]]:
    """Non-dominated (speedup, metric) points, sorted by speedup.

    A point is dominated when another point is at least as good in both
    coordinates and strictly better in one.
    """
    if not points:
        raise InvalidArgumentError("need at least one point")
    ordered = sorted(points, key=lambda sm: (-sm[0], -sm[1]))
    front = []
    best_metric = -math.inf
    for s, m in ordered:
        if m > best_metric:
            front.append((s, m))
            best_metric = m
    front.reverse()
    # collapse duplicate speedups to their best metric
    dedup: list[tuple[float, float]] = []
    for s, m in front:
        if dedup and dedup[-1][0] == s:
            dedup[-1] = (s, max(dedup[-1][1], m))
        else:
            dedup.append((s, m))
    return dedup


def pareto_at(
    points: Sequence[tuple[float, float]], targets: Sequence[float]
) -> list[Optional[float]]:
    """Metric value linearly interpolated on the Pareto front at each
    target speedup; None outside the front's speedup range (no
    extrapolation, ever)."""
    front = pareto_front(points)
    xs = [s for s, _ in front]
    ys = [m for _, m in front]
    out: list[Optional[float]] = []
    for t in targets:
        if t < xs[0] or t > xs[-1]:
            out.append(None)
            continue
        i = int(np.searchsorted(xs, t, side="left"))
        if i < len(xs) and xs[i] == t:
            out.append(ys[i])
            continue
        x0, x1 = xs[i - 1], xs[i]
        y0, y1 = ys[i - 1], ys[i]
        out.append(y0 + (y1 - y0) * (t - x0) / (x1 - x0))
    return out


# ---------------------------------------------------------------------
# mutual information
# ---------------------------------------------------------------------


def mutual_information(pred_a: Sequence, pred_b: Sequence) -> float:
    """Plug-in mutual information (nats) of two label lists, from the
    joint empirical distribution."""
    a = np.asarray(pred_a)
    b = np.asarray(pred_b)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise InvalidArgumentError("prediction lists must be equal-length and non-empty")
    n = a.size
    values_a, ia = np.unique(a, return_inverse=True)
    values_b, ib = np.unique(b, return_inverse=True)
    joint = np.zeros((values_a.size, values_b.size))
    np.add.at(joint, (ia, ib), 1.0)
    joint /= n
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)
    mi = 0.0
    for i in range(values_a.size):
        for j in range(values_b.size):
            p = joint[i, j]
            if p > 0:
                mi += p * math.log(p / (pa[i] * pb[j]))
    return max(mi, 0.0)


# ---------------------------------------------------------------------
# token-reduction loss and deviation-bound audit
# ---------------------------------------------------------------------


@dataclass
class LayerAudit:
    layer: int
    delta: float
    replaced: int
    displacement_sum: float
    bound: float          # delta * replaced
    holds: bool
    expansion: Optional[float]  # deviation_out / deviation_in, None when 0/0


@dataclass
class SelectionLossRecord:
    """Per-example measurement: loss gap between the full pass and the
    replacement pass, with the per-layer audit supporting it."""

    loss_full: float
    loss_replaced: float
    loss_gap: float
    layer_audits: list[LayerAudit]
    classifier_expansion: Optional[float]
    assembled_bound: Optional[float]


@dataclass
class SelectionLossReport:
    records: list[SelectionLossRecord]
    ap0_violations: int

    def mean_gap(self) -> float:
        return float(np.mean([r.loss_gap for r in self.records]))

    def max_delta(self) -> float:
        return max(
            (a.delta for r in self.records for a in r.layer_audits), default=0.0
        )


def audit_replacement_trace(trace: ForwardTrace) -> tuple[list[LayerAudit], int]:
    """Check, for every layer of a replacement-mode trace, that the
    summed displacement of overwritten rows stays within cover radius
    times replaced count.  The inequality is exact up to float
    accumulation slack."""
    if trace.kind != "replace":
        raise InvalidArgumentError("audit needs a replacement-mode trace")
    audits = []
    violations = 0
    for rec in trace.records:
        replaced = 0 if rec.replaced_rows is None else int(rec.replaced_rows.size)
        disp = 0.0 if rec.displacement is None else float(rec.displacement.sum())
        delta = float(rec.delta or 0.0)
        bound = delta * replaced
        holds = disp <= bound + AP0_SLACK
        if not holds:
            violations += 1
        audits.append(
            LayerAudit(
                layer=rec.layer, delta=delta, replaced=replaced,
                displacement_sum=disp, bound=bound, holds=holds, expansion=None,
            )
        )
    return audits, violations


def _ratio(num: float, den: float) -> Optional[float]:
    if den == 0.0:
        return None
    return num / den


def selection_loss(
    stack: EncoderStack,
    dataset,
    config: PipelineConfig,
) -> SelectionLossReport:
    """Loss gap |full - replaced| per example, with the per-layer
    displacement audit and realized expansion ratios.

    The expansion ratios compare, at each layer boundary, the Frobenius
    deviation between the full pass and the replacement pass; together
    with the classifier ratio they assemble the deviation bound

        max_delta * classifier_expansion
            * sum_j (replaced_j * prod_{a >= j} expansion_a)

    reported for inspection only: the ratios are realized values on this
    input, not certified expansion constants, and undefined (0/0) ratios
    enter the product as 1.
    """
    tokens_list, labels = dataset
    schedule = config.schedule
    full_config = dc_replace(
        config, schedule=full_retention_schedule(schedule.input_len, schedule.layers)
    )
    records = []
    total_violations = 0
    for key, (ids, label) in enumerate(zip(tokens_list, labels)):
        emb = stack.embed(ids) if np.asarray(ids).ndim == 1 and np.issubdtype(
            np.asarray(ids).dtype, np.integer
        ) else EmbeddingMatrix(ids)
        t_full = forward(stack, emb, full_config, label=label, example_key=key)
        t_repl = forward_replace(stack, emb, config, label=label, example_key=key)
        audits, violations = audit_replacement_trace(t_repl)
        total_violations += violations

        expansions: list[Optional[float]] = []
        for rec_f, rec_r in zip(t_full.records, t_repl.records):
            dev_in = float(np.linalg.norm(rec_f.x_in - rec_r.x_in))
            dev_out = float(np.linalg.norm(rec_f.x_out - rec_r.x_out))
            expansions.append(_ratio(dev_out, dev_in))
        for audit, expansion in zip(audits, expansions):
            audit.expansion = expansion

        gap = abs(t_full.loss - t_repl.loss)
        dev_last = float(np.linalg.norm(t_full.records[-1].x_out - t_repl.records[-1].x_out))
        cls_expansion = _ratio(gap, dev_last)

        max_delta = max((a.delta for a in audits), default=0.0)
        if max_delta == 0.0:
            assembled = 0.0  # zero cover radius kills the bound outright
        elif cls_expansion is None:
            assembled = None
        else:
            acc = 0.0
            for j, audit in enumerate(audits):
                prod = 1.0
                for a in expansions[j:]:
                    prod *= 1.0 if a is None else a
                acc += audit.replaced * prod
            assembled = max_delta * cls_expansion * acc

        records.append(
            SelectionLossRecord(
                loss_full=t_full.loss,
                loss_replaced=t_repl.loss,
                loss_gap=gap,
                layer_audits=audits,
                classifier_expansion=cls_expansion,
                assembled_bound=assembled,
            )
        )
    return SelectionLossReport(records=records, ap0_violations=total_violations)


# ---------------------------------------------------------------------
# importance ablation
# ---------------------------------------------------------------------


@dataclass
class AblationPoint:
    rank: int                # position in selection addition order (1 = added first)
    mean_importance: float   # mean distance-to-centers score of the dropped token
    mi: float                # mutual information with the unpruned predictions


@dataclass
class AblationCurve:
    encoder_layer: int
    points: list[AblationPoint]

    def spearman_importance_vs_mi(self) -> float:
        """Rank correlation between token importance and prediction
        agreement; the expected sign on a trained model is negative
        (dropping an important token disturbs predictions more).
        NaN when either sequence is constant (correlation undefined)."""
        from scipy.stats import spearmanr

        imp = np.array([p.mean_importance for p in self.points])
        mi = np.array([p.mi for p in self.points])
        if np.all(imp == imp[0]) or np.all(mi == mi[0]):
            return float("nan")
        return float(spearmanr(imp, mi).statistic)


def _forward_drop(stack, ids, layer_j, drop_index, placement):
    """Forward pass that removes one row at the given layer's selection
    point and keeps everything else."""
    n = len(ids)
    lengths = [n] * (stack.num_layers + 1)
    for j in range(layer_j, stack.num_layers + 1):
        lengths[j] = n - 1
    sched = LengthSchedule(input_len=n, layers=stack.num_layers, lengths=tuple(lengths))
    config = PipelineConfig(
        schedule=sched, selector=SelectorKind.drop_one(drop_index), placement=placement
    )
    return forward_from_ids(stack, ids, config)


def importance_ablation(
    stack: EncoderStack,
    dataset,
    encoder_layer: int,
    selector: SelectorKind,
    placement: str = AFTER_ATTENTION,
    metric: str = "euclidean",
) -> AblationCurve:
    """Drop-one-token study at a single encoder layer.

    For every example the full-order selection at the layer ranks all
    tokens (addition order; within a batch, by distance to the centers
    already present).  For each rank, the token holding that rank is
    removed for every example and the resulting predictions are compared
    against the unpruned model via mutual information.
    """
    tokens_list, _ = dataset
    n = len(tokens_list[0])
    if not 1 <= encoder_layer <= stack.num_layers:
        raise InvalidArgumentError(f"encoder layer {encoder_layer} out of range")

    full_cfg = PipelineConfig(
        schedule=full_retention_schedule(n, stack.num_layers),
        selector=selector,
        placement=placement,
        metric=metric,
    )

    base_preds = []
    orders = []       # per example: token row order by selection addition
    importances = []  # matching importance scores
    for key, ids in enumerate(tokens_list):
        t = forward_from_ids(stack, ids, full_cfg, example_key=key)
        base_preds.append(int(np.argmax(t.logits)))
        at_layer = t.records[encoder_layer - 1].pre_select
        sel = apply_selector(
            selector, EmbeddingMatrix(at_layer), at_layer.shape[0],
            metric=metric, attention=t.records[encoder_layer - 1].attention,
            seed_key=[encoder_layer, key],
        )
        orders.append(sel.selected[1:])  # CLS itself is never droppable
        importances.append(sel.importance[1:])

    points = []
    for rank in range(1, n):
        preds = []
        for key, ids in enumerate(tokens_list):
            drop_index = orders[key][rank - 1]
            t = _forward_drop(stack, ids, encoder_layer, drop_index, placement)
            preds.append(int(np.argmax(t.logits)))
        points.append(
            AblationPoint(
                rank=rank,
                mean_importance=float(np.mean([imp[rank - 1] for imp in importances])),
                mi=mutual_information(preds, base_preds),
            )
        )
    return AblationCurve(encoder_layer=encoder_layer, points=points)


# ---------------------------------------------------------------------
# redundancy study
# ---------------------------------------------------------------------


def cls_similarity_values(trace: ForwardTrace, layer_j: int) -> np.ndarray:
    """Cosine similarity between the CLS row and every other token at
    the given layer's output."""
    x = trace.records[layer_j - 1].x_out
    d = pairwise_distances(x[1:], x[[CLS_INDEX]], COSINE)[:, 0]
    return 1.0 - d


def epsilon_component_count(x: np.ndarray, eps: float) -> int:
    """Number of connected components of the graph joining points whose
    cosine dissimilarity is at most eps.

    This is exactly what density clustering degenerates to when a single
    point suffices to form a cluster, which is the parameterization used
    here (min_pts = 1: no noise points, every point is core).
    """
    n = x.shape[0]
    d = pairwise_distances(x, x, COSINE)
    adjacent = d <= eps
    labels = np.full(n, -1, dtype=int)
    count = 0
    for start in range(n):
        if labels[start] != -1:
            continue
        stack_ = [start]
        labels[start] = count
        while stack_:
            u = stack_.pop()
            for v in np.where(adjacent[u])[0]:
                if labels[v] == -1:
                    labels[v] = count
                    stack_.append(v)
        count += 1
    return count


@dataclass
class RedundancyReport:
    layer_js: tuple[int, ...]
    similarity_values: dict[int, np.ndarray]       # layer -> pooled CLS-similarities
    histograms: dict[int, tuple[np.ndarray, np.ndarray]]  # layer -> (bin_edges, counts)
    cluster_counts: dict[int, list[int]]           # layer -> per-example component count


def redundancy_report(
    traces: Sequence[ForwardTrace],
    layer_js: Sequence[int],
    eps: float = 0.2,
    min_pts: int = 1,
    bins: int = 20,
) -> RedundancyReport:
    """CLS-similarity histograms and per-example cluster counts at the
    requested layers.

    min_pts is accepted for interface completeness but only the value 1
    is implemented (the epsilon-graph component count); larger values
    would reintroduce noise points.
    """
    if min_pts != 1:
        raise InvalidArgumentError("only min_pts=1 is supported")
    sims: dict[int, list[np.ndarray]] = {j: [] for j in layer_js}
    counts: dict[int, list[int]] = {j: [] for j in layer_js}
    for trace in traces:
        for j in layer_js:
            if not 1 <= j <= len(trace.records):
                raise InvalidArgumentError(f"layer {j} not captured in trace")
            sims[j].append(cls_similarity_values(trace, j))
            counts[j].append(epsilon_component_count(trace.records[j - 1].x_out, eps))
    values = {j: np.concatenate(sims[j]) if sims[j] else np.zeros(0) for j in layer_js}
    histograms = {}
    edges = np.linspace(-1.0, 1.0, bins + 1)
    for j in layer_js:
        hist, _ = np.histogram(values[j], bins=edges)
        histograms[j] = (edges, hist)
    return RedundancyReport(
        layer_js=tuple(layer_js),
        similarity_values=values,
        histograms=histograms,
        cluster_counts=counts,
    )
