import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import tokencore as tc
from tokencore.errors import InvalidArgumentError, SizeLimitError
from tokencore.selectors import (
    apply_selector,
    pooled_length,
    parse_selector,
    select_drop_index,
)

from conftest import brute_force_cover_radius, random_embedding


def classic_farthest_point(data, k):
    """Independent reference: textbook greedy farthest-point selection
    starting from row 0."""
    selected = [0]
    dmin = np.linalg.norm(data - data[0], axis=1)
    while len(selected) < k:
        pick = int(np.argmax(dmin))
        selected.append(pick)
        dmin = np.minimum(dmin, np.linalg.norm(data - data[pick], axis=1))
    return selected


class TestKCenterGreedy:
    def test_1d_example(self, points4):
        r = tc.kcenter_greedy_batch(points4, k=2, m=1)
        assert r.selected == (0, 3)
        assert r.cover_radius == pytest.approx(5.0, abs=1e-12)
        assert r.cover_radius == pytest.approx(
            brute_force_cover_radius(points4.data, r.selected), abs=1e-12
        )

    def test_full_k_covers_exactly(self, points4):
        r = tc.kcenter_greedy_batch(points4, k=4, m=1)
        assert sorted(r.selected) == [0, 1, 2, 3]
        assert r.cover_radius == 0.0

    def test_batch_trace_example(self):
        emb = tc.EmbeddingMatrix(np.array([[0.0], [1.0], [2.0], [3.0], [100.0]]))
        r = tc.kcenter_greedy_batch(emb, k=3, m=2)
        assert r.selected == (0, 4, 3)

    def test_m1_matches_classic_greedy(self):
        for seed in range(30):
            emb = random_embedding(seed)
            k = min(4, emb.rows)
            r = tc.kcenter_greedy_batch(emb, k=k, m=1)
            assert list(r.selected) == classic_farthest_point(emb.data, k)

    def test_tie_breaks_to_lowest_index(self):
        emb = tc.EmbeddingMatrix(np.array([[0.0], [5.0], [-5.0]]))
        r = tc.kcenter_greedy_batch(emb, k=2, m=1)
        assert r.selected == (0, 1)

    def test_importance_non_increasing_when_m1(self):
        for seed in range(20):
            emb = random_embedding(seed, rows=10, dim=3)
            r = tc.kcenter_greedy_batch(emb, k=6, m=1)
            assert r.importance[0] == np.inf
            body = r.importance[1:]
            assert all(a >= b - 1e-12 for a, b in zip(body, body[1:]))

    def test_batch_importance_measured_against_prior_centers(self):
        emb = tc.EmbeddingMatrix(np.array([[0.0], [1.0], [2.0], [3.0], [100.0]]))
        r = tc.kcenter_greedy_batch(emb, k=3, m=2)
        # both batch members are scored against CLS only
        assert r.importance[1] == pytest.approx(100.0)
        assert r.importance[2] == pytest.approx(3.0)

    def test_mean_radius_m1_not_worse_than_full_batch(self):
        r1, rk = [], []
        rng = np.random.default_rng(123)
        for _ in range(120):
            n = int(rng.integers(6, 14))
            k = int(rng.integers(3, min(6, n)))
            emb = tc.EmbeddingMatrix(rng.normal(size=(n, 3)))
            r1.append(tc.kcenter_greedy_batch(emb, k, 1).cover_radius)
            rk.append(tc.kcenter_greedy_batch(emb, k, k - 1).cover_radius)
        assert np.mean(r1) <= np.mean(rk)

    def test_determinism(self):
        emb = random_embedding(5, rows=9, dim=4)
        a = tc.kcenter_greedy_batch(emb, 5, 2)
        b = tc.kcenter_greedy_batch(emb, 5, 2)
        assert a == b

    def test_cosine_metric(self):
        # unit vectors at angles 0, 90, 180 degrees from CLS direction
        emb = tc.EmbeddingMatrix(
            np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [1.0, 0.0]])
        )
        r = tc.kcenter_greedy_batch(emb, 2, 1, metric=tc.COSINE)
        assert r.selected == (0, 2)  # opposite vector is farthest

    def test_invalid_arguments(self, points4):
        with pytest.raises(InvalidArgumentError):
            tc.kcenter_greedy_batch(points4, k=5, m=1)
        with pytest.raises(InvalidArgumentError):
            tc.kcenter_greedy_batch(points4, k=0, m=1)
        with pytest.raises(InvalidArgumentError):
            tc.kcenter_greedy_batch(points4, k=3, m=3)  # m > k-1
        with pytest.raises(InvalidArgumentError):
            tc.EmbeddingMatrix(np.array([[np.nan]]))
        with pytest.raises(InvalidArgumentError):
            tc.EmbeddingMatrix(np.zeros((0, 3)))


class TestKCenterExact:
    def test_1d_example_lexicographic_tie(self, points4):
        r = tc.kcenter_exact(points4, k=2)
        assert r.selected == (0, 2)  # {0,5} and {0,10} tie at 5.0
        assert r.cover_radius == pytest.approx(5.0, abs=1e-12)

    def test_full_k(self, points4):
        assert tc.kcenter_exact(points4, k=4).cover_radius == 0.0

    def test_size_guard(self):
        emb = tc.EmbeddingMatrix(np.zeros((17, 2)) + np.arange(17)[:, None])
        with pytest.raises(SizeLimitError):
            tc.kcenter_exact(emb, k=3)

    def test_exact_never_worse_than_greedy(self):
        for seed in range(40):
            emb = random_embedding(seed)
            k = min(4, emb.rows)
            g = tc.kcenter_greedy_batch(emb, k, 1)
            e = tc.kcenter_exact(emb, k)
            assert e.cover_radius <= g.cover_radius + 1e-12
            assert g.cover_radius <= 2.0 * e.cover_radius


class TestFirstK:
    def test_examples(self, points4):
        r = tc.select_first_k(points4, 2)
        assert r.selected == (0, 1)
        assert r.cover_radius == pytest.approx(6.0, abs=1e-12)
        emb = tc.EmbeddingMatrix(np.arange(10.0).reshape(5, 2))
        assert tc.select_first_k(emb, 3).selected == (0, 1, 2)
        assert tc.select_first_k(emb, 5).selected == (0, 1, 2, 3, 4)
        assert all(v == 0.0 for v in r.importance)


class TestRandom:
    def test_seed_determinism(self, points4):
        a = tc.select_random(points4, 3, seed=42)
        b = tc.select_random(points4, 3, seed=42)
        assert a.selected == b.selected

    def test_extremes(self, points4):
        assert sorted(tc.select_random(points4, 4, seed=0).selected) == [0, 1, 2, 3]
        assert tc.select_random(points4, 1, seed=0).selected == (0,)

    def test_k_out_of_range(self, points4):
        with pytest.raises(InvalidArgumentError):
            tc.select_random(points4, 9, seed=0)

    @given(st.integers(0, 1000))
    def test_always_contains_cls(self, seed):
        emb = random_embedding(seed, rows=8, dim=2)
        r = tc.select_random(emb, 3, seed=seed)
        assert r.selected[0] == 0
        assert len(set(r.selected)) == 3


class TestAveragePool:
    def test_mean_example(self):
        emb = tc.EmbeddingMatrix(np.array([[9.0], [1.0], [3.0], [5.0], [7.0]]))
        out = tc.average_pool(emb, window=2)
        assert out.rows == 3
        np.testing.assert_allclose(out.data, [[9.0], [2.0], [6.0]])

    def test_window_covering_everything(self):
        emb = tc.EmbeddingMatrix(np.array([[9.0], [1.0], [3.0], [5.0]]))
        out = tc.average_pool(emb, window=3)
        np.testing.assert_allclose(out.data, [[9.0], [3.0]])

    def test_identical_rows_unchanged(self):
        emb = tc.EmbeddingMatrix(np.vstack([[5.0, 5.0]] + [[2.0, 3.0]] * 6))
        out = tc.average_pool(emb, window=3)
        np.testing.assert_allclose(out.data[1:], [[2.0, 3.0], [2.0, 3.0]])

    def test_window_validation(self, points4):
        for bad in (0, 1, 7):
            with pytest.raises(InvalidArgumentError):
                tc.average_pool(points4, window=bad)

    @given(st.integers(2, 6), st.integers(2, 40))
    def test_output_row_count(self, window, rows):
        emb = tc.EmbeddingMatrix(np.ones((rows, 2)))
        assert tc.average_pool(emb, window).rows == pooled_length(rows, window)


class TestAttentionSelect:
    def test_uniform_attention_tie(self):
        emb = tc.EmbeddingMatrix(np.zeros((3, 2)) + np.arange(3)[:, None])
        attn = np.full((1, 3, 3), 1.0 / 3.0)
        r = tc.attention_select(emb, 2, attn)
        assert r.selected == (0, 1)

    def test_concentrated_attention(self):
        emb = tc.EmbeddingMatrix(np.zeros((3, 2)) + np.arange(3)[:, None])
        attn = np.zeros((1, 3, 3))
        attn[:, :, 2] = 1.0
        r = tc.attention_select(emb, 2, attn)
        assert r.selected == (0, 2)

    def test_k_equals_rows(self):
        emb = tc.EmbeddingMatrix(np.zeros((4, 2)) + np.arange(4)[:, None])
        attn = np.full((2, 4, 4), 0.25)
        assert sorted(tc.attention_select(emb, 4, attn).selected) == [0, 1, 2, 3]

    def test_shape_mismatch(self, points4):
        with pytest.raises(InvalidArgumentError):
            tc.attention_select(points4, 2, np.full((1, 3, 3), 1 / 3))


class TestCoverRadius:
    def test_all_rows_zero(self, points4):
        assert tc.cover_radius(points4, [0, 1, 2, 3]) == 0.0

    def test_examples(self, points4):
        assert tc.cover_radius(points4, [0, 3]) == pytest.approx(5.0, abs=1e-12)
        pair = tc.EmbeddingMatrix(np.array([[0.0], [7.0]]))
        assert tc.cover_radius(pair, [0]) == pytest.approx(7.0, abs=1e-12)

    def test_empty_selection_rejected(self, points4):
        with pytest.raises(InvalidArgumentError):
            tc.cover_radius(points4, [])

    @given(st.integers(0, 500))
    @settings(max_examples=40, deadline=None)
    def test_matches_brute_force(self, seed):
        emb = random_embedding(seed)
        rng = np.random.default_rng(seed + 1)
        size = int(rng.integers(1, emb.rows + 1))
        selected = list(rng.choice(emb.rows, size=size, replace=False))
        assert tc.cover_radius(emb, selected) == pytest.approx(
            brute_force_cover_radius(emb.data, selected), abs=1e-12
        )


class TestSelectorKindDispatch:
    @given(st.integers(0, 300))
    @settings(max_examples=30, deadline=None)
    def test_every_subset_selector_retains_cls(self, seed):
        emb = random_embedding(seed, rows=9, dim=3)
        attn = np.full((2, 9, 9), 1.0 / 9.0)
        kinds = [
            tc.SelectorKind.coreset(1),
            tc.SelectorKind.coreset(2),
            tc.SelectorKind.coreset_full_batch(),
            tc.SelectorKind.coreset_exact(),
            tc.SelectorKind.first_k(),
            tc.SelectorKind.random(seed),
            tc.SelectorKind.attention(),
            tc.SelectorKind.drop_one(3),
        ]
        for kind in kinds:
            k = 8 if kind.name == "drop_one" else 4
            r = apply_selector(kind, emb, k, attention=attn, seed_key=[0, 0])
            assert r.selected[0] == 0
            assert len(set(r.selected)) == len(r.selected) == k
            assert r.cover_radius == pytest.approx(
                tc.cover_radius(emb, r.selected), abs=1e-12
            )

    def test_batch_size_resolution(self):
        assert tc.SelectorKind.coreset(3).batch_size_for(10) == 3
        assert tc.SelectorKind.coreset(3).batch_size_for(2) == 1
        assert tc.SelectorKind.coreset_frac(0.3).batch_size_for(10) == 3
        assert tc.SelectorKind.coreset_full_batch().batch_size_for(10) == 9

    def test_parse_selector(self):
        assert parse_selector("coreset") == tc.SelectorKind.coreset(1)
        assert parse_selector("coreset:m=4") == tc.SelectorKind.coreset(4)
        assert parse_selector("coreset:frac=0.2") == tc.SelectorKind.coreset_frac(0.2)
        assert parse_selector("coreset:full") == tc.SelectorKind.coreset_full_batch()
        assert parse_selector("random:seed=7") == tc.SelectorKind.random(7)
        assert parse_selector("pool:window=3") == tc.SelectorKind.average_pool(3)
        assert parse_selector("first_k") == tc.SelectorKind.first_k()
        with pytest.raises(InvalidArgumentError):
            parse_selector("nope")
        with pytest.raises(InvalidArgumentError):
            parse_selector("pool:window=9")

    def test_drop_one_guards(self, points4):
        with pytest.raises(InvalidArgumentError):
            select_drop_index(points4, 0)  # CLS is not droppable
        r = select_drop_index(points4, 2)
        assert r.selected == (0, 1, 3)
