"""A small trainable transformer encoder stack with mid-layer token
reduction.

Everything is float64 numpy on single sequences: multi-head
self-attention, GELU feed-forward, post-norm residual blocks, learned
token and position embeddings, and a linear classifier reading the CLS
row of the final layer.  A token selector can be invoked inside every
layer (right after the attention block, or at the end of the layer) to
shrink the sequence to the per-layer length given by a LengthSchedule.

Besides the standard forward there are two analysis variants:

* ``forward_replace`` keeps the sequence length constant and overwrites
  each pruned row with its nearest retained row, recording per-layer
  displacement so cover-radius deviation bounds can be audited;
* multiplicity-weighted attention (``weighted_attention`` /
  ``PipelineConfig.weighted_attention``) adds log-multiplicities to the
  attention logits, which is algebraically identical to attending over
  duplicated key/value rows.

The backward pass is exact reverse-mode differentiation of the forward;
selection indices are treated as constants of the forward pass, so
gradients flow only through retained rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy.special import erf

from .errors import InvalidArgumentError, InvariantViolationError, StateError
from .schedule import LengthSchedule
from .selectors import (
    CLS_INDEX,
    EUCLIDEAN,
    EmbeddingMatrix,
    SelectionResult,
    SelectorKind,
    apply_selector,
    average_pool,
    cover_radius,
    pairwise_distances,
)

AFTER_ATTENTION = "after_attention"
END_OF_ENCODER = "end_of_encoder"
PLACEMENTS = (AFTER_ATTENTION, END_OF_ENCODER)

LN_EPS = 1e-12


# ---------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------


@dataclass
class LayerParams:
    # no key bias: softmax is invariant to per-query constant logit
    # shifts, so a key bias is exactly dead weight
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray


_LAYER_FIELDS = (
    "wq", "bq", "wk", "wv", "bv", "wo", "bo",
    "ln1_g", "ln1_b", "w1", "b1", "w2", "b2", "ln2_g", "ln2_b",
)


@dataclass
class EncoderStack:
    """All trainable parameters plus the head/width bookkeeping."""

    layers: list[LayerParams]
    heads: int
    token_emb: np.ndarray  # (vocab, dim)
    pos_emb: np.ndarray    # (max_len, dim)
    cls_w: np.ndarray      # (dim, classes)
    cls_b: np.ndarray      # (classes,)

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise InvalidArgumentError(
                f"dim {self.dim} must be divisible by heads {self.heads}"
            )

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def dim(self) -> int:
        return self.token_emb.shape[1]

    @property
    def ffn_dim(self) -> int:
        return self.layers[0].w1.shape[1]

    @property
    def num_classes(self) -> int:
        return self.cls_w.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.token_emb.shape[0]

    @property
    def max_len(self) -> int:
        return self.pos_emb.shape[0]

    def embed(self, token_ids: np.ndarray) -> EmbeddingMatrix:
        """Token embeddings plus learned position embeddings."""
        ids = np.asarray(token_ids, dtype=np.intp)
        if ids.ndim != 1 or ids.shape[0] > self.max_len:
            raise InvalidArgumentError(
                f"token id sequence of length {ids.shape} does not fit max_len {self.max_len}"
            )
        return EmbeddingMatrix(self.token_emb[ids] + self.pos_emb[: ids.shape[0]])

    def named_parameters(self):
        """(name, array) pairs in a fixed order; arrays are live views."""
        out = [("token_emb", self.token_emb), ("pos_emb", self.pos_emb)]
        for i, layer in enumerate(self.layers):
            for f in _LAYER_FIELDS:
                out.append((f"layers.{i}.{f}", getattr(layer, f)))
        out.append(("cls_w", self.cls_w))
        out.append(("cls_b", self.cls_b))
        return out

    def copy(self) -> "EncoderStack":
        return EncoderStack(
            layers=[
                LayerParams(**{f: getattr(l, f).copy() for f in _LAYER_FIELDS})
                for l in self.layers
            ],
            heads=self.heads,
            token_emb=self.token_emb.copy(),
            pos_emb=self.pos_emb.copy(),
            cls_w=self.cls_w.copy(),
            cls_b=self.cls_b.copy(),
        )


def init_stack(
    layers: int = 4,
    heads: int = 2,
    dim: int = 32,
    ffn_dim: int = 64,
    classes: int = 2,
    vocab: int = 16,
    max_len: int = 32,
    seed=0,
) -> EncoderStack:
    """Gaussian-initialized stack; defaults are the toy configuration
    used throughout the test and experiment suites."""
    rng = np.random.default_rng(seed)

    def xavier(fan_in, fan_out):
        std = math.sqrt(2.0 / (fan_in + fan_out))
        return rng.normal(0.0, std, size=(fan_in, fan_out))

    def make_layer():
        return LayerParams(
            wq=xavier(dim, dim), bq=np.zeros(dim),
            wk=xavier(dim, dim),
            wv=xavier(dim, dim), bv=np.zeros(dim),
            wo=xavier(dim, dim), bo=np.zeros(dim),
            ln1_g=np.ones(dim), ln1_b=np.zeros(dim),
            w1=xavier(dim, ffn_dim), b1=np.zeros(ffn_dim),
            w2=xavier(ffn_dim, dim), b2=np.zeros(dim),
            ln2_g=np.ones(dim), ln2_b=np.zeros(dim),
        )

    token_std = 1.0 / math.sqrt(dim)
    return EncoderStack(
        layers=[make_layer() for _ in range(layers)],
        heads=heads,
        token_emb=rng.normal(0.0, token_std, size=(vocab, dim)),
        pos_emb=rng.normal(0.0, 0.2 * token_std, size=(max_len, dim)),
        cls_w=xavier(dim, classes),
        cls_b=np.zeros(classes),
    )


# ---------------------------------------------------------------------
# pipeline configuration and traces
# ---------------------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    schedule: LengthSchedule
    selector: SelectorKind
    placement: str = AFTER_ATTENTION
    weighted_attention: bool = False
    metric: str = EUCLIDEAN

    def __post_init__(self):
        if self.placement not in PLACEMENTS:
            raise InvalidArgumentError(f"placement must be one of {PLACEMENTS}")


@dataclass(frozen=True)
class TokenMultiplicity:
    """Positive integer weight per retained token: 1 plus the number of
    eliminated tokens whose nearest retained row it is."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.int64)
        if w.ndim != 1 or w.size == 0:
            raise InvalidArgumentError("multiplicities must be a non-empty vector")
        if (w <= 0).any():
            raise InvalidArgumentError("multiplicities must all be positive")
        object.__setattr__(self, "weights", w)

    def total(self) -> int:
        return int(self.weights.sum())


@dataclass
class LayerRecord:
    """Per-layer observations captured on every forward pass."""

    layer: int
    x_in: np.ndarray
    x_out: np.ndarray
    pre_select: np.ndarray
    post_select: np.ndarray
    attention: np.ndarray
    selection: Optional[SelectionResult]
    kept: Optional[np.ndarray]
    delta: Optional[float]
    replaced_rows: Optional[np.ndarray] = None
    displacement: Optional[np.ndarray] = None


@dataclass
class ForwardTrace:
    kind: str
    config: PipelineConfig
    input_rows: int
    lengths: tuple[int, ...]
    records: list[LayerRecord]
    input_selection: Optional[SelectionResult]
    input_kept: Optional[np.ndarray]
    logits: np.ndarray
    cls_final: np.ndarray
    loss: Optional[float]
    label: Optional[Union[int, np.ndarray]]
    token_ids: Optional[np.ndarray] = None
    caches: Optional[list[dict]] = None
    multiplicities: Optional[list[np.ndarray]] = None


@dataclass
class Gradients:
    params: dict[str, np.ndarray]
    d_input: np.ndarray

    def norm(self) -> float:
        total = float((self.d_input ** 2).sum())
        total += sum(float((g ** 2).sum()) for g in self.params.values())
        return math.sqrt(total)


# ---------------------------------------------------------------------
# numeric building blocks
# ---------------------------------------------------------------------


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def gelu_prime(x: np.ndarray) -> np.ndarray:
    phi = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return 0.5 * (1.0 + erf(x / math.sqrt(2.0))) + x * phi


def layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    sigma = np.sqrt(var + LN_EPS)
    xhat = (x - mu) / sigma
    return xhat * g + b, (xhat, sigma)


def layer_norm_backward(dy, cache, g):
    xhat, sigma = cache
    ghat = dy * g
    m1 = ghat.mean(axis=-1, keepdims=True)
    m2 = (ghat * xhat).mean(axis=-1, keepdims=True)
    dx = (ghat - m1 - xhat * m2) / sigma
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    return dx, dg, db


def _split_heads(x, heads):
    n, d = x.shape
    return x.reshape(n, heads, d // heads).transpose(1, 0, 2)


def _merge_heads(x):
    h, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dh)


def _attention_core(x, layer, heads, key_log_weights=None):
    """Multi-head attention mixing, pre output-projection.

    Returns (mixed, weights, cache).  ``key_log_weights`` is added to
    the logits of every key column before the softmax; with the log of
    integer multiplicities this reproduces attention over a matrix in
    which each row is duplicated that many times.
    """
    dh = x.shape[1] // heads
    q = x @ layer.wq + layer.bq
    k = x @ layer.wk
    v = x @ layer.wv + layer.bv
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scores = qh @ kh.transpose(0, 2, 1) / math.sqrt(dh)
    if key_log_weights is not None:
        scores = scores + key_log_weights[None, None, :]
    attn = softmax(scores, axis=-1)
    ctx = attn @ vh
    mixed = _merge_heads(ctx)
    cache = {"x": x, "Q": qh, "K": kh, "V": vh, "A": attn, "mixed": mixed}
    return mixed, attn, cache


def _attention_core_backward(d_mixed, cache, layer, heads):
    x, qh, kh, vh, attn = cache["x"], cache["Q"], cache["K"], cache["V"], cache["A"]
    dh = x.shape[1] // heads
    d_ctx = _split_heads(d_mixed, heads)
    d_attn = d_ctx @ vh.transpose(0, 2, 1)
    d_vh = attn.transpose(0, 2, 1) @ d_ctx
    d_scores = attn * (d_attn - (d_attn * attn).sum(axis=-1, keepdims=True))
    d_qh = d_scores @ kh / math.sqrt(dh)
    d_kh = d_scores.transpose(0, 2, 1) @ qh / math.sqrt(dh)
    dq, dk, dv = _merge_heads(d_qh), _merge_heads(d_kh), _merge_heads(d_vh)
    grads = {
        "wq": x.T @ dq, "bq": dq.sum(axis=0),
        "wk": x.T @ dk,
        "wv": x.T @ dv, "bv": dv.sum(axis=0),
    }
    dx = dq @ layer.wq.T + dk @ layer.wk.T + dv @ layer.wv.T
    return dx, grads


def weighted_attention(
    emb: EmbeddingMatrix,
    multiplicity: TokenMultiplicity,
    layer: LayerParams,
    heads: int,
) -> EmbeddingMatrix:
    """Attention mixing where key/value row t counts ``weights[t]``
    times, realized by adding log(weights) to the key logits."""
    if multiplicity.weights.shape[0] != emb.rows:
        raise InvalidArgumentError(
            f"{multiplicity.weights.shape[0]} multiplicities for {emb.rows} rows"
        )
    mixed, _, _ = _attention_core(
        emb.data, layer, heads, key_log_weights=np.log(multiplicity.weights.astype(np.float64))
    )
    return EmbeddingMatrix(mixed)


# ---------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------


def loss_and_dlogits(logits: np.ndarray, label) -> tuple[float, np.ndarray]:
    """Cross-entropy for integer labels, squared error for vector targets."""
    if isinstance(label, (int, np.integer)) or (
        isinstance(label, np.ndarray) and label.ndim == 0
    ):
        y = int(label)
        if not 0 <= y < logits.shape[0]:
            raise InvalidArgumentError(f"label {y} out of range for {logits.shape[0]} classes")
        p = softmax(logits)
        loss = -math.log(max(p[y], 1e-300))
        dlogits = p.copy()
        dlogits[y] -= 1.0
        return loss, dlogits
    target = np.asarray(label, dtype=np.float64)
    if target.shape != logits.shape:
        raise InvalidArgumentError("regression target shape mismatch")
    diff = logits - target
    return float((diff * diff).sum()), 2.0 * diff


# ---------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------


def _nearest_assignment(x: np.ndarray, kept: np.ndarray) -> np.ndarray:
    """For every row of x, the kept index (value, not position) of its
    nearest retained row under the euclidean metric."""
    d = pairwise_distances(x, x[kept], EUCLIDEAN)
    return kept[np.argmin(d, axis=1)]


def _pool_groups(rows: int, window: int) -> list[np.ndarray]:
    """Row-index groups of strided mean pooling: CLS alone, then
    consecutive windows over the remaining rows."""
    groups = [np.array([CLS_INDEX], dtype=np.intp)]
    for start in range(1, rows, window):
        groups.append(np.arange(start, min(start + window, rows), dtype=np.intp))
    return groups


def _select_step(x, k, config, layer_index, attn, example_key):
    """Run the configured selector at one reduction point.

    Returns (new_x, selection, kept_sorted, delta, pool_groups).
    Identity when the target length equals the current length.  For the
    pooling selector there is no index subset; the window groups are
    returned instead so gradients can be spread back over each window.
    """
    n = x.shape[0]
    if k == n:
        return x, None, None, 0.0, None
    if k > n:
        raise InvalidArgumentError(f"schedule asks for {k} rows but only {n} present")
    if config.selector.name == "pool":
        pooled = average_pool(EmbeddingMatrix(x), config.selector.window)
        if pooled.rows != k:
            raise InvalidArgumentError(
                f"pool window {config.selector.window} yields {pooled.rows} rows, "
                f"schedule expects {k}"
            )
        return pooled.data, None, None, None, _pool_groups(n, config.selector.window)
    sel = apply_selector(
        config.selector,
        EmbeddingMatrix(x),
        k,
        metric=config.metric,
        attention=attn,
        seed_key=[layer_index, example_key],
    )
    kept = sel.sorted_indices()
    return x[kept], sel, kept, sel.cover_radius, None


def _check_compat(stack: EncoderStack, tokens: EmbeddingMatrix, config: PipelineConfig):
    schedule = config.schedule
    if schedule.layers != stack.num_layers:
        raise InvalidArgumentError(
            f"schedule has {schedule.layers} layers, stack has {stack.num_layers}"
        )
    if tokens.rows != schedule.input_len:
        raise InvalidArgumentError(
            f"input has {tokens.rows} rows, schedule expects {schedule.input_len}"
        )
    if tokens.dim != stack.dim:
        raise InvalidArgumentError(
            f"input dim {tokens.dim} does not match stack dim {stack.dim}"
        )


def forward(
    stack: EncoderStack,
    tokens: EmbeddingMatrix,
    config: PipelineConfig,
    label=None,
    want_grads: bool = False,
    example_key: int = 0,
    token_ids: Optional[np.ndarray] = None,
) -> ForwardTrace:
    """Run the stack, shrinking the sequence per the schedule.

    The selector is invoked inside each layer at ``config.placement``;
    an additional reduction happens before layer 1 when the schedule
    truncates at the input layer.  With ``config.weighted_attention``
    the attention logits carry the log-multiplicity of each retained
    token, so the reduced model mimics one in which pruned tokens were
    replaced by duplicates of their nearest retained row.
    """
    _check_compat(stack, tokens, config)
    schedule = config.schedule
    heads = stack.heads
    weighted = config.weighted_attention
    if weighted and config.selector.name == "pool":
        raise InvalidArgumentError("weighted attention needs a subset selector")

    x = tokens.data
    mult = np.ones(x.shape[0], dtype=np.int64)
    virtual_total = x.shape[0]
    realized = [x.shape[0]]
    mult_log: list[np.ndarray] = []

    # input-layer truncation
    input_sel, input_kept = None, None
    if schedule.lengths[0] < x.shape[0]:
        x, input_sel, input_kept, _, _ = _select_step(
            x, schedule.lengths[0], config, 0, None, example_key
        )
        if input_kept is None:
            raise InvalidArgumentError("input-layer reduction requires a subset selector")
        if weighted:
            assign = _nearest_assignment(tokens.data, input_kept)
            mult = np.array([mult[assign == i].sum() for i in input_kept], dtype=np.int64)
        else:
            mult = mult[input_kept]
    realized[0] = x.shape[0]

    records: list[LayerRecord] = []
    caches: Optional[list[dict]] = [] if want_grads else None

    for j, layer in enumerate(stack.layers, start=1):
        x_in = x
        n0 = x.shape[0]
        logw = np.log(mult.astype(np.float64)) if weighted else None
        mixed, attn, att_cache = _attention_core(x, layer, heads, key_log_weights=logw)
        proj = mixed @ layer.wo + layer.bo
        r1 = x + proj
        h_full, ln1_cache = layer_norm(r1, layer.ln1_g, layer.ln1_b)

        k_target = schedule.lengths[j]
        sel = kept = groups = None
        delta: Optional[float] = 0.0
        if config.placement == AFTER_ATTENTION:
            pre = h_full
            h, sel, kept, delta, groups = _select_step(
                h_full, k_target, config, j, attn, example_key
            )
            post = h
        else:
            h = h_full

        z1 = h @ layer.w1 + layer.b1
        a1 = gelu(z1)
        f_out = a1 @ layer.w2 + layer.b2
        r2 = h + f_out
        y_full, ln2_cache = layer_norm(r2, layer.ln2_g, layer.ln2_b)

        if config.placement == END_OF_ENCODER:
            pre = y_full
            x, sel, kept, delta, groups = _select_step(
                y_full, k_target, config, j, attn, example_key
            )
            post = x
        else:
            x = y_full

        if weighted:
            if kept is not None:
                assign = _nearest_assignment(pre, kept)
                mult = np.array([mult[assign == i].sum() for i in kept], dtype=np.int64)
            if mult.sum() != virtual_total:
                raise InvariantViolationError("multiplicities lost mass during selection")
            mult_log.append(mult.copy())

        realized.append(x.shape[0])
        records.append(
            LayerRecord(
                layer=j, x_in=x_in, x_out=x, pre_select=pre, post_select=post,
                attention=attn, selection=sel, kept=kept, delta=delta,
            )
        )
        if caches is not None:
            caches.append(
                {
                    "att": att_cache, "ln1": ln1_cache, "ln2": ln2_cache,
                    "h": h, "z1": z1, "a1": a1, "kept": kept, "groups": groups,
                    "n_pre": n0, "n_mid": h_full.shape[0],
                }
            )

    cls = x[CLS_INDEX]
    logits = cls @ stack.cls_w + stack.cls_b
    loss = None
    if label is not None:
        loss, _ = loss_and_dlogits(logits, label)

    return ForwardTrace(
        kind="standard",
        config=config,
        input_rows=tokens.rows,
        lengths=tuple(realized),
        records=records,
        input_selection=input_sel,
        input_kept=input_kept,
        logits=logits,
        cls_final=cls,
        loss=loss,
        label=label,
        token_ids=None if token_ids is None else np.asarray(token_ids, dtype=np.intp),
        caches=caches,
        multiplicities=mult_log if weighted else None,
    )


def forward_from_ids(
    stack: EncoderStack,
    token_ids: np.ndarray,
    config: PipelineConfig,
    label=None,
    want_grads: bool = False,
    example_key: int = 0,
) -> ForwardTrace:
    """Embed a token-id sequence and run ``forward``; keeps the ids in
    the trace so the backward pass can reach the embedding tables."""
    return forward(
        stack,
        stack.embed(token_ids),
        config,
        label=label,
        want_grads=want_grads,
        example_key=example_key,
        token_ids=token_ids,
    )


def _replace_rows(x: np.ndarray, kept: np.ndarray):
    """Overwrite every non-kept row with its nearest kept row
    (euclidean).  Returns (new_x, replaced_indices, displacements)."""
    n = x.shape[0]
    mask = np.zeros(n, dtype=bool)
    mask[kept] = True
    replaced = np.where(~mask)[0]
    new_x = x.copy()
    if replaced.size:
        d = pairwise_distances(x[replaced], x[kept], EUCLIDEAN)
        nearest = kept[np.argmin(d, axis=1)]
        new_x[replaced] = x[nearest]
        displacement = d[np.arange(replaced.size), np.argmin(d, axis=1)]
    else:
        displacement = np.zeros(0)
    return new_x, replaced, displacement


def forward_replace(
    stack: EncoderStack,
    tokens: EmbeddingMatrix,
    config: PipelineConfig,
    label=None,
    example_key: int = 0,
) -> ForwardTrace:
    """Length-preserving variant: at every reduction point the selector
    still picks its subset, but non-selected rows are overwritten with
    their nearest selected row instead of being dropped.

    Each record carries the replaced row indices, their euclidean
    displacements, and ``delta`` as the euclidean cover radius of the
    selection, so the per-layer inequality

        sum of displacements <= delta * (rows - target length)

    holds by construction and can be audited exactly.
    """
    _check_compat(stack, tokens, config)
    if config.selector.name == "pool":
        raise InvalidArgumentError("replacement mode requires a subset selector")
    schedule = config.schedule
    heads = stack.heads

    def replace_step(x, k, layer_index, attn):
        n = x.shape[0]
        if k >= n:
            return x, None, None, 0.0, np.zeros(0, dtype=np.intp), np.zeros(0)
        sel = apply_selector(
            config.selector, EmbeddingMatrix(x), k, metric=config.metric,
            attention=attn, seed_key=[layer_index, example_key],
        )
        kept = sel.sorted_indices()
        delta = (
            sel.cover_radius
            if config.metric == EUCLIDEAN
            else cover_radius(EmbeddingMatrix(x), kept, EUCLIDEAN)
        )
        new_x, replaced, disp = _replace_rows(x, kept)
        return new_x, sel, kept, delta, replaced, disp

    x = tokens.data
    realized = [x.shape[0]]
    input_sel = input_kept = None
    if schedule.lengths[0] < x.shape[0]:
        x, input_sel, input_kept, _, _, _ = replace_step(x, schedule.lengths[0], 0, None)

    records: list[LayerRecord] = []
    for j, layer in enumerate(stack.layers, start=1):
        x_in = x
        mixed, attn, _ = _attention_core(x, layer, heads)
        proj = mixed @ layer.wo + layer.bo
        h_full, ln1_cache = layer_norm(x + proj, layer.ln1_g, layer.ln1_b)

        k_target = schedule.lengths[j]
        sel = kept = None
        delta: Optional[float] = 0.0
        replaced = np.zeros(0, dtype=np.intp)
        disp = np.zeros(0)
        if config.placement == AFTER_ATTENTION:
            pre = h_full
            h, sel, kept, delta, replaced, disp = replace_step(h_full, k_target, j, attn)
            post = h
        else:
            h = h_full

        a1 = gelu(h @ layer.w1 + layer.b1)
        y_full, _ = layer_norm(h + (a1 @ layer.w2 + layer.b2), layer.ln2_g, layer.ln2_b)

        if config.placement == END_OF_ENCODER:
            pre = y_full
            x, sel, kept, delta, replaced, disp = replace_step(y_full, k_target, j, attn)
            post = x
        else:
            x = y_full

        realized.append(x.shape[0])
        records.append(
            LayerRecord(
                layer=j, x_in=x_in, x_out=x, pre_select=pre, post_select=post,
                attention=attn, selection=sel, kept=kept, delta=delta,
                replaced_rows=replaced, displacement=disp,
            )
        )

    cls = x[CLS_INDEX]
    logits = cls @ stack.cls_w + stack.cls_b
    loss = None
    if label is not None:
        loss, _ = loss_and_dlogits(logits, label)

    return ForwardTrace(
        kind="replace",
        config=config,
        input_rows=tokens.rows,
        lengths=tuple(realized),
        records=records,
        input_selection=input_sel,
        input_kept=input_kept,
        logits=logits,
        cls_final=cls,
        loss=loss,
        label=label,
    )


# ---------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------


def _unselect_grad(d_post, kept, groups, n_full, dim):
    """Route gradients back through a reduction point: scatter for a
    subset selection, spread-over-window for pooling, identity
    otherwise.  Dropped rows get exactly zero."""
    if kept is not None:
        full = np.zeros((n_full, dim))
        full[kept] = d_post
        return full
    if groups is not None:
        full = np.zeros((n_full, dim))
        for gi, rows in enumerate(groups):
            full[rows] += d_post[gi] / rows.size
        return full
    return d_post


def backward(stack: EncoderStack, trace: ForwardTrace, label=None) -> Gradients:
    """Exact gradients of the recorded forward pass.

    Selection indices are constants; dropped rows receive zero gradient
    from everything downstream of their selection point.
    """
    if trace.kind != "standard" or trace.caches is None:
        raise StateError("backward needs a standard-forward trace with want_grads=True")
    if label is None:
        label = trace.label
    if label is None:
        raise InvalidArgumentError("no label available for the loss gradient")

    grads = {name: np.zeros_like(p) for name, p in stack.named_parameters()}
    _, dlogits = loss_and_dlogits(trace.logits, label)

    grads["cls_w"] += np.outer(trace.cls_final, dlogits)
    grads["cls_b"] += dlogits
    d_cls = stack.cls_w @ dlogits

    final_rows = trace.lengths[-1]
    dx = np.zeros((final_rows, stack.dim))
    dx[CLS_INDEX] = d_cls

    placement = trace.config.placement
    for j in reversed(range(stack.num_layers)):
        layer = stack.layers[j]
        cache = trace.caches[j]
        kept = cache["kept"]
        groups = cache["groups"]

        if placement == END_OF_ENCODER:
            dx = _unselect_grad(dx, kept, groups, cache["n_mid"], stack.dim)

        d_r2, dg2, db2 = layer_norm_backward(dx, cache["ln2"], layer.ln2_g)
        grads[f"layers.{j}.ln2_g"] += dg2
        grads[f"layers.{j}.ln2_b"] += db2

        d_h = d_r2.copy()
        d_f = d_r2
        grads[f"layers.{j}.w2"] += cache["a1"].T @ d_f
        grads[f"layers.{j}.b2"] += d_f.sum(axis=0)
        d_a1 = d_f @ layer.w2.T
        d_z1 = d_a1 * gelu_prime(cache["z1"])
        grads[f"layers.{j}.w1"] += cache["h"].T @ d_z1
        grads[f"layers.{j}.b1"] += d_z1.sum(axis=0)
        d_h += d_z1 @ layer.w1.T

        if placement == AFTER_ATTENTION:
            d_h = _unselect_grad(d_h, kept, groups, cache["n_pre"], stack.dim)

        d_r1, dg1, db1 = layer_norm_backward(d_h, cache["ln1"], layer.ln1_g)
        grads[f"layers.{j}.ln1_g"] += dg1
        grads[f"layers.{j}.ln1_b"] += db1

        dx = d_r1.copy()
        d_proj = d_r1
        att_cache = cache["att"]
        grads[f"layers.{j}.wo"] += att_cache["mixed"].T @ d_proj
        grads[f"layers.{j}.bo"] += d_proj.sum(axis=0)
        d_mixed = d_proj @ layer.wo.T
        d_x_att, att_grads = _attention_core_backward(d_mixed, att_cache, layer, stack.heads)
        for name, g in att_grads.items():
            grads[f"layers.{j}.{name}"] += g
        dx += d_x_att

    if trace.input_kept is not None:
        full = np.zeros((trace.input_rows, stack.dim))
        full[trace.input_kept] = dx
        dx = full

    if trace.token_ids is not None:
        ids = trace.token_ids
        np.add.at(grads["token_emb"], ids, dx)
        grads["pos_emb"][: ids.shape[0]] += dx

    return Gradients(params=grads, d_input=dx)


def loss_of(
    stack: EncoderStack,
    tokens_or_ids,
    config: PipelineConfig,
    label,
    example_key: int = 0,
) -> float:
    """Scalar loss of a fresh forward pass; the probe used by
    finite-difference gradient checks."""
    if isinstance(tokens_or_ids, EmbeddingMatrix):
        t = forward(stack, tokens_or_ids, config, label=label, example_key=example_key)
    else:
        t = forward_from_ids(stack, tokens_or_ids, config, label=label, example_key=example_key)
    return t.loss


# ---------------------------------------------------------------------
# analytic cost model
# ---------------------------------------------------------------------


def count_flops(
    schedule: LengthSchedule,
    dim: int,
    heads: int,
    ffn_dim: int,
    placement: str = AFTER_ATTENTION,
) -> int:
    """Multiply-accumulate count of one forward pass under a schedule.

    Per layer j, with a = length entering the attention block and f =
    length entering the feed-forward block (f == a for end-of-encoder
    placement):

        qkv projections   3 * a * dim^2
        score matrix          a^2 * dim
        score-value mix       a^2 * dim
        output projection     a * dim^2
        feed-forward      2 * f * dim * ffn_dim

    Head count does not change the total (heads * a^2 * (dim/heads) ==
    a^2 * dim); it is validated for divisibility only.  Softmax, layer
    norm, residuals and the classifier head are omitted: they are
    O(length * dim) and independent of the quantities compared here.
    """
    if dim % heads != 0:
        raise InvalidArgumentError(f"dim {dim} not divisible by heads {heads}")
    if placement not in PLACEMENTS:
        raise InvalidArgumentError(f"placement must be one of {PLACEMENTS}")
    total = 0
    for j in range(1, schedule.layers + 1):
        a = schedule.lengths[j - 1]
        f = schedule.lengths[j] if placement == AFTER_ATTENTION else a
        total += 4 * a * dim * dim + 2 * a * a * dim + 2 * f * dim * ffn_dim
    return total
