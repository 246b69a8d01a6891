"""Shared fixtures and frozen oracles for the test suite."""

import numpy as np
import pytest

import tokencore as tc

# Reference 30-configuration table (N=128, 12 layers): per-layer retained
# lengths for each (prune_upto, p) pair, frozen as the reproduction
# target for the floor-mode schedule generator.
REFERENCE_TABLE = [
    (2, 0.15, [49, 19, 19, 19, 19, 19, 19, 19, 19, 19, 19, 19]),
    (3, 0.15, [68, 36, 19, 19, 19, 19, 19, 19, 19, 19, 19, 19]),
    (4, 0.15, [79, 49, 30, 19, 19, 19, 19, 19, 19, 19, 19, 19]),
    (3, 0.10, [59, 27, 12, 12, 12, 12, 12, 12, 12, 12, 12, 12]),
    (4, 0.10, [71, 40, 22, 12, 12, 12, 12, 12, 12, 12, 12, 12]),
    (3, 0.20, [74, 43, 25, 25, 25, 25, 25, 25, 25, 25, 25, 25]),
    (4, 0.20, [85, 57, 38, 25, 25, 25, 25, 25, 25, 25, 25, 25]),
    (3, 0.17, [70, 39, 21, 21, 21, 21, 21, 21, 21, 21, 21, 21]),
    (3, 0.18, [72, 40, 23, 23, 23, 23, 23, 23, 23, 23, 23, 23]),
    (3, 0.19, [73, 42, 24, 24, 24, 24, 24, 24, 24, 24, 24, 24]),
    (3, 0.22, [77, 46, 28, 28, 28, 28, 28, 28, 28, 28, 28, 28]),
    (3, 0.25, [80, 50, 32, 32, 32, 32, 32, 32, 32, 32, 32, 32]),
    (1, 0.25, [32, 32, 32, 32, 32, 32, 32, 32, 32, 32, 32, 32]),
    (2, 0.25, [64, 32, 32, 32, 32, 32, 32, 32, 32, 32, 32, 32]),
    (3, 0.25, [80, 50, 32, 32, 32, 32, 32, 32, 32, 32, 32, 32]),
    (5, 0.25, [97, 73, 55, 42, 32, 32, 32, 32, 32, 32, 32, 32]),
    (9, 0.25, [109, 94, 80, 69, 59, 50, 43, 37, 32, 32, 32, 32]),
    (11, 0.25, [112, 99, 87, 77, 68, 60, 52, 46, 41, 36, 32, 32]),
    (1, 0.50, [64, 64, 64, 64, 64, 64, 64, 64, 64, 64, 64, 64]),
    (2, 0.50, [90, 64, 64, 64, 64, 64, 64, 64, 64, 64, 64, 64]),
    (3, 0.50, [101, 80, 64, 64, 64, 64, 64, 64, 64, 64, 64, 64]),
    (5, 0.50, [111, 97, 84, 73, 64, 64, 64, 64, 64, 64, 64, 64]),
    (9, 0.50, [118, 109, 101, 94, 87, 80, 74, 69, 64, 64, 64, 64]),
    (11, 0.50, [120, 112, 105, 99, 93, 87, 82, 77, 72, 68, 64, 64]),
    (1, 0.75, [96, 96, 96, 96, 96, 96, 96, 96, 96, 96, 96, 96]),
    (2, 0.75, [110, 96, 96, 96, 96, 96, 96, 96, 96, 96, 96, 96]),
    (3, 0.75, [116, 105, 96, 96, 96, 96, 96, 96, 96, 96, 96, 96]),
    (7, 0.75, [122, 117, 113, 108, 104, 100, 96, 96, 96, 96, 96, 96]),
    (9, 0.75, [123, 120, 116, 112, 109, 105, 102, 99, 96, 96, 96, 96]),
    (11, 0.75, [124, 121, 118, 115, 112, 109, 106, 103, 101, 98, 96, 96]),
]


def brute_force_cover_radius(data: np.ndarray, selected, metric="euclidean") -> float:
    """Independent double-loop oracle for the cover radius."""
    worst = 0.0
    for u in data:
        best = np.inf
        for s in selected:
            v = data[s]
            if metric == "euclidean":
                d = float(np.sqrt(((u - v) ** 2).sum()))
            else:
                nu, nv = np.linalg.norm(u), np.linalg.norm(v)
                d = 1.0 - float(u @ v / (nu * nv))
            best = min(best, d)
        worst = max(worst, best)
    return worst


def random_embedding(seed, rows=None, dim=None) -> tc.EmbeddingMatrix:
    rng = np.random.default_rng(seed)
    rows = rows or int(rng.integers(2, 12))
    dim = dim or int(rng.integers(1, 5))
    return tc.EmbeddingMatrix(rng.normal(size=(rows, dim)))


@pytest.fixture
def points4():
    """1-D fixture: CLS at 0, tokens at 4, 5, 10."""
    return tc.EmbeddingMatrix(np.array([[0.0], [4.0], [5.0], [10.0]]))


@pytest.fixture
def tiny_stack():
    return tc.init_stack(
        layers=3, heads=2, dim=16, ffn_dim=24, classes=3, vocab=12, max_len=12, seed=1
    )


@pytest.fixture
def tiny_config():
    sched = tc.generate_schedule(12, 3, ratio=0.5, prune_upto=2)
    return tc.PipelineConfig(schedule=sched, selector=tc.SelectorKind.coreset(1))
