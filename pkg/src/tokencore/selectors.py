"""Token-selection strategies over embedding matrices.

The central routine is a greedy k-center selection with a batch parameter
``m`` that controls how many centers are added per round (m=1 is classic
farthest-point greedy, the 2-approximation of the NP-hard k-center
problem).  A brute-force exact oracle and the simpler baselines
(first-k, random, strided mean pooling, attention-score ranking) live
here too, all sharing the same conventions:

* row 0 of every embedding matrix is the classification (CLS) token and
  is retained by every selector;
* ties are broken toward the lowest row index, so every selector is a
  pure, deterministic function of its inputs.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InvalidArgumentError, SizeLimitError

EUCLIDEAN = "euclidean"
COSINE = "cosine_dissimilarity"
METRICS = (EUCLIDEAN, COSINE)

CLS_INDEX = 0

# Row-count guard for the exhaustive k-center oracle.
EXACT_ORACLE_MAX_ROWS = 16

# Window sizes supported by strided mean pooling.
POOL_WINDOWS = (2, 3, 4, 5, 6)


@dataclass(frozen=True)
class EmbeddingMatrix:
    """A sequence of token embeddings, one row per token.

    Row 0 is the CLS token by convention.  Data is always float64 and
    must be finite.
    """

    data: np.ndarray
    cls_index: int = CLS_INDEX

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise InvalidArgumentError(
                f"embedding matrix must be 2-D and non-empty, got shape {data.shape}"
            )
        if not np.isfinite(data).all():
            raise InvalidArgumentError("embedding matrix contains NaN or Inf")
        object.__setattr__(self, "data", data)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class SelectionResult:
    """Outcome of a subset selection.

    ``selected`` is in addition order (greedy selectors) with the CLS
    token first.  ``importance`` holds, per selected index, the distance
    to the nearest previously-added center at the moment of addition;
    the CLS entry is +inf, and selectors without a meaningful score
    report zeros.  ``cover_radius`` is the realized cover radius: the
    maximum over all rows of the distance to the nearest selected row.
    """

    selected: tuple[int, ...]
    importance: tuple[float, ...]
    cover_radius: float
    m_used: int
    metric: str

    def __post_init__(self):
        if len(self.selected) == 0 or self.selected[0] != CLS_INDEX:
            raise InvalidArgumentError("selection must start with the CLS index 0")
        if len(set(self.selected)) != len(self.selected):
            raise InvalidArgumentError("selected indices must be distinct")

    @property
    def k(self) -> int:
        return len(self.selected)

    def sorted_indices(self) -> np.ndarray:
        """Selected indices in original row order (CLS stays first)."""
        return np.array(sorted(self.selected), dtype=np.intp)


@dataclass(frozen=True)
class SelectorKind:
    """Tagged selector choice, resolvable to a concrete call per layer.

    ``name`` is one of: coreset, coreset_exact, first_k, random, pool,
    attention.  For the coreset selector the per-round batch size can be
    given as a fixed count ``m``, a fraction of the target size
    ``m_frac`` (rounded up), or ``m_full_batch`` for one single round of
    k-1 additions.
    """

    name: str
    m: int = 1
    m_frac: Optional[float] = None
    m_full_batch: bool = False
    seed: int = 0
    window: int = 2
    drop: int = -1

    def __post_init__(self):
        if self.name == "pool" and self.window not in POOL_WINDOWS:
            raise InvalidArgumentError(
                f"pool window must be in {POOL_WINDOWS}, got {self.window}"
            )
        if self.name == "coreset" and self.m_frac is None and self.m < 1:
            raise InvalidArgumentError("coreset batch size m must be >= 1")

    # -- constructors -------------------------------------------------
    @classmethod
    def coreset(cls, m: int = 1) -> "SelectorKind":
        return cls(name="coreset", m=m)

    @classmethod
    def coreset_frac(cls, frac: float) -> "SelectorKind":
        return cls(name="coreset", m_frac=frac)

    @classmethod
    def coreset_full_batch(cls) -> "SelectorKind":
        return cls(name="coreset", m_full_batch=True)

    @classmethod
    def coreset_exact(cls) -> "SelectorKind":
        return cls(name="coreset_exact")

    @classmethod
    def first_k(cls) -> "SelectorKind":
        return cls(name="first_k")

    @classmethod
    def random(cls, seed: int = 0) -> "SelectorKind":
        return cls(name="random", seed=seed)

    @classmethod
    def average_pool(cls, window: int) -> "SelectorKind":
        return cls(name="pool", window=window)

    @classmethod
    def attention(cls) -> "SelectorKind":
        return cls(name="attention")

    @classmethod
    def drop_one(cls, index: int) -> "SelectorKind":
        """Removes exactly one fixed row; the ablation harness's tool,
        not a strategy in its own right."""
        return cls(name="drop_one", drop=index)

    def batch_size_for(self, k: int) -> int:
        """Effective per-round batch size when selecting k tokens."""
        cap = max(1, k - 1)
        if self.m_full_batch:
            return cap
        if self.m_frac is not None:
            return min(cap, max(1, int(np.ceil(self.m_frac * k))))
        return min(cap, self.m)

    def label(self) -> str:
        if self.name == "coreset":
            if self.m_full_batch:
                return "coreset:full"
            if self.m_frac is not None:
                return f"coreset:frac={self.m_frac:g}"
            return f"coreset:m={self.m}"
        if self.name == "random":
            return f"random:seed={self.seed}"
        if self.name == "pool":
            return f"pool:window={self.window}"
        return self.name


def parse_selector(text: str) -> SelectorKind:
    """Parse a selector spec string such as ``coreset:m=2`` or ``random``."""
    head, _, arg = text.strip().partition(":")
    head = head.strip()
    arg = arg.strip()
    if head == "coreset":
        if arg in ("", "m=1"):
            return SelectorKind.coreset(1)
        if arg == "full":
            return SelectorKind.coreset_full_batch()
        key, _, value = arg.partition("=")
        if key == "m":
            return SelectorKind.coreset(int(value))
        if key == "frac":
            return SelectorKind.coreset_frac(float(value))
        raise InvalidArgumentError(f"bad coreset spec {text!r}")
    if head == "coreset_exact":
        return SelectorKind.coreset_exact()
    if head == "first_k":
        return SelectorKind.first_k()
    if head == "random":
        seed = 0
        if arg:
            key, _, value = arg.partition("=")
            if key != "seed":
                raise InvalidArgumentError(f"bad random spec {text!r}")
            seed = int(value)
        return SelectorKind.random(seed)
    if head == "pool":
        key, _, value = arg.partition("=")
        if key != "window":
            raise InvalidArgumentError(f"bad pool spec {text!r}")
        return SelectorKind.average_pool(int(value))
    if head == "attention":
        return SelectorKind.attention()
    raise InvalidArgumentError(f"unknown selector {text!r}")


# ---------------------------------------------------------------------
# distances
# ---------------------------------------------------------------------


def pairwise_distances(a: np.ndarray, b: np.ndarray, metric: str = EUCLIDEAN) -> np.ndarray:
    """Distance matrix between the rows of ``a`` and the rows of ``b``.

    Cosine dissimilarity is 1 - cos(u, v); zero-norm rows are treated as
    orthogonal to everything (dissimilarity 1) except other zero rows.
    """
    if metric == EUCLIDEAN:
        diff = a[:, None, :] - b[None, :, :]
        return np.sqrt((diff * diff).sum(axis=-1))
    if metric == COSINE:
        na = np.linalg.norm(a, axis=1)
        nb = np.linalg.norm(b, axis=1)
        denom = np.maximum(na[:, None] * nb[None, :], 1e-300)
        sim = (a @ b.T) / denom
        both_zero = (na[:, None] == 0.0) & (nb[None, :] == 0.0)
        sim = np.where(both_zero, 1.0, sim)
        return 1.0 - np.clip(sim, -1.0, 1.0)
    raise InvalidArgumentError(f"unknown metric {metric!r}")


def _check_k(emb: EmbeddingMatrix, k: int) -> None:
    if not 1 <= k <= emb.rows:
        raise InvalidArgumentError(f"k={k} out of range for {emb.rows} rows")


def cover_radius(emb: EmbeddingMatrix, selected, metric: str = EUCLIDEAN) -> float:
    """Max over all rows of the distance to the nearest selected row."""
    selected = list(selected)
    if len(selected) == 0:
        raise InvalidArgumentError("selected index list must be non-empty")
    idx = np.asarray(selected, dtype=np.intp)
    if idx.min() < 0 or idx.max() >= emb.rows:
        raise InvalidArgumentError("selected indices out of range")
    dists = pairwise_distances(emb.data, emb.data[idx], metric)
    return float(dists.min(axis=1).max())


# ---------------------------------------------------------------------
# core-set selectors
# ---------------------------------------------------------------------


def kcenter_greedy_batch(
    emb: EmbeddingMatrix, k: int, m: int = 1, metric: str = EUCLIDEAN
) -> SelectionResult:
    """Greedy k-center selection adding m centers per round.

    Starts from the CLS row.  Each round ranks the not-yet-selected rows
    by their minimum distance to the centers chosen in *previous* rounds
    and takes the top min(m, k - |S|); distances are deliberately not
    updated against a round's own additions, which is what makes a round
    computable in parallel.  With m=1 this is exactly classic greedy
    farthest-point selection.  The reported importance of each center is
    its ranking distance at the moment of addition (+inf for CLS).
    """
    _check_k(emb, k)
    if m < 1 or (k > 1 and m > k - 1):
        raise InvalidArgumentError(f"m={m} must satisfy 1 <= m <= k-1 (k={k})")
    x = emb.data
    selected = [CLS_INDEX]
    importance = [np.inf]
    # min distance of every row to the selected set
    dmin = pairwise_distances(x, x[[CLS_INDEX]], metric)[:, 0]
    taken = np.zeros(emb.rows, dtype=bool)
    taken[CLS_INDEX] = True
    while len(selected) < k:
        batch = min(m, k - len(selected))
        round_picks = []
        masked = np.where(taken, -np.inf, dmin)
        for _ in range(batch):
            pick = int(np.argmax(masked))  # argmax keeps the lowest index on ties
            round_picks.append(pick)
            importance.append(float(dmin[pick]))
            masked[pick] = -np.inf
            taken[pick] = True
        selected.extend(round_picks)
        new_d = pairwise_distances(x, x[round_picks], metric).min(axis=1)
        dmin = np.minimum(dmin, new_d)
    return SelectionResult(
        selected=tuple(selected),
        importance=tuple(importance),
        cover_radius=cover_radius(emb, selected, metric),
        m_used=m,
        metric=metric,
    )


def kcenter_exact(emb: EmbeddingMatrix, k: int, metric: str = EUCLIDEAN) -> SelectionResult:
    """Exhaustive k-center oracle: the CLS-containing subset of size k
    with the smallest cover radius (lexicographically smallest on ties).

    Enumerates all candidate subsets, so rows are capped at
    EXACT_ORACLE_MAX_ROWS.
    """
    if emb.rows > EXACT_ORACLE_MAX_ROWS:
        raise SizeLimitError(
            f"exact oracle limited to {EXACT_ORACLE_MAX_ROWS} rows, got {emb.rows}"
        )
    _check_k(emb, k)
    dists = pairwise_distances(emb.data, emb.data, metric)
    best_subset = None
    best_radius = np.inf
    others = range(1, emb.rows)
    for combo in itertools.combinations(others, k - 1):
        subset = (CLS_INDEX,) + combo
        radius = dists[:, list(subset)].min(axis=1).max()
        if radius < best_radius:  # first hit wins ties: combos come lexicographically
            best_radius = radius
            best_subset = subset
    return SelectionResult(
        selected=best_subset,
        importance=tuple(0.0 for _ in best_subset),
        cover_radius=float(best_radius),
        m_used=0,
        metric=metric,
    )


# ---------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------


def select_first_k(emb: EmbeddingMatrix, k: int, metric: str = EUCLIDEAN) -> SelectionResult:
    """Keep the first k rows."""
    _check_k(emb, k)
    selected = tuple(range(k))
    return SelectionResult(
        selected=selected,
        importance=tuple(0.0 for _ in selected),
        cover_radius=cover_radius(emb, selected, metric),
        m_used=0,
        metric=metric,
    )


def select_random(
    emb: EmbeddingMatrix, k: int, seed, metric: str = EUCLIDEAN
) -> SelectionResult:
    """Keep CLS plus k-1 rows sampled uniformly without replacement."""
    _check_k(emb, k)
    rng = np.random.default_rng(seed)
    rest = rng.choice(np.arange(1, emb.rows), size=k - 1, replace=False) if k > 1 else []
    selected = (CLS_INDEX,) + tuple(int(i) for i in rest)
    return SelectionResult(
        selected=selected,
        importance=tuple(0.0 for _ in selected),
        cover_radius=cover_radius(emb, selected, metric),
        m_used=0,
        metric=metric,
    )


def attention_select(
    emb: EmbeddingMatrix, k: int, attention: np.ndarray, metric: str = EUCLIDEAN
) -> SelectionResult:
    """Keep CLS plus the k-1 tokens receiving the most attention.

    ``attention`` is the post-softmax tensor of shape (heads, rows,
    rows) from the encoder preceding the selection; a token's
    significance is the total attention it receives, summed over heads
    and query positions (column sums).  Ties go to the lowest index.
    """
    _check_k(emb, k)
    attention = np.asarray(attention, dtype=np.float64)
    if attention.ndim != 3 or attention.shape[1:] != (emb.rows, emb.rows):
        raise InvalidArgumentError(
            f"attention shape {attention.shape} does not match {emb.rows} rows"
        )
    significance = attention.sum(axis=(0, 1))
    order = np.argsort(-significance, kind="stable")  # stable keeps lowest index on ties
    ranked = [int(i) for i in order if i != CLS_INDEX]
    selected = (CLS_INDEX,) + tuple(ranked[: k - 1])
    return SelectionResult(
        selected=selected,
        importance=tuple(0.0 for _ in selected),
        cover_radius=cover_radius(emb, selected, metric),
        m_used=0,
        metric=metric,
    )


def average_pool(emb: EmbeddingMatrix, window: int) -> EmbeddingMatrix:
    """Strided mean pooling of the non-CLS rows, stride equal to window.

    The CLS row passes through untouched; the remaining rows are split
    into consecutive windows (the last one may be shorter) and each
    window is replaced by its mean.  Unlike the subset selectors this
    produces new embeddings.
    """
    if window < 2:
        raise InvalidArgumentError(f"pool window must be >= 2, got {window}")
    if window not in POOL_WINDOWS:
        raise InvalidArgumentError(f"pool window must be in {POOL_WINDOWS}, got {window}")
    body = emb.data[1:]
    pooled = [emb.data[0]]
    for start in range(0, body.shape[0], window):
        chunk = body[start : start + window]
        if chunk.shape[0]:
            pooled.append(chunk.mean(axis=0))
    return EmbeddingMatrix(np.vstack(pooled))


def pooled_length(rows: int, window: int) -> int:
    """Row count produced by average_pool on a matrix with ``rows`` rows."""
    return 1 + int(np.ceil((rows - 1) / window))


def select_drop_index(
    emb: EmbeddingMatrix, drop: int, metric: str = EUCLIDEAN
) -> SelectionResult:
    """Keep every row except ``drop`` (never the CLS row)."""
    if not 1 <= drop < emb.rows:
        raise InvalidArgumentError(f"cannot drop row {drop} of {emb.rows} (CLS is fixed)")
    selected = tuple(i for i in range(emb.rows) if i != drop)
    return SelectionResult(
        selected=selected,
        importance=tuple(0.0 for _ in selected),
        cover_radius=cover_radius(emb, selected, metric),
        m_used=0,
        metric=metric,
    )


def apply_selector(
    kind: SelectorKind,
    emb: EmbeddingMatrix,
    k: int,
    metric: str = EUCLIDEAN,
    attention: Optional[np.ndarray] = None,
    seed_key=None,
) -> SelectionResult:
    """Dispatch a SelectorKind to its subset-selection routine.

    ``seed_key`` extends the random selector's seed so distinct call
    sites (layer, example) draw distinct but reproducible subsets.
    The pooling kind is not a subset selection and is rejected here.
    """
    if kind.name == "coreset":
        return kcenter_greedy_batch(emb, k, m=kind.batch_size_for(k), metric=metric)
    if kind.name == "coreset_exact":
        return kcenter_exact(emb, k, metric=metric)
    if kind.name == "first_k":
        return select_first_k(emb, k, metric=metric)
    if kind.name == "random":
        seed = [kind.seed] + list(seed_key or [])
        return select_random(emb, k, seed, metric=metric)
    if kind.name == "attention":
        if attention is None:
            raise InvalidArgumentError("attention selector needs an attention tensor")
        return attention_select(emb, k, attention, metric=metric)
    if kind.name == "drop_one":
        if k != emb.rows - 1:
            raise InvalidArgumentError("drop_one removes exactly one row")
        return select_drop_index(emb, kind.drop, metric=metric)
    raise InvalidArgumentError(f"selector {kind.name!r} is not a subset selector")
