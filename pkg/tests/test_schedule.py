import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import tokencore as tc
from tokencore.errors import InvalidArgumentError
from tokencore.schedule import (
    REFERENCE_GRID,
    schedule_from_csv_row,
    schedules_to_csv,
)

from conftest import REFERENCE_TABLE


class TestGenerateSchedule:
    def test_reference_table_floor_mode(self):
        for pu, p, expected in REFERENCE_TABLE:
            s = tc.generate_schedule(128, 12, ratio=p, prune_upto=pu, rounding="floor")
            assert list(s.lengths[1:]) == expected, (pu, p)
            assert s.lengths[0] == 128

    def test_decay_example(self):
        s = tc.generate_schedule(128, 12, ratio=0.15, prune_upto=3)
        assert s.lengths == (128, 68, 36) + (19,) * 10

    def test_long_decay_example(self):
        s = tc.generate_schedule(128, 12, ratio=0.25, prune_upto=9)
        assert list(s.lengths[1:]) == [109, 94, 80, 69, 59, 50, 43, 37, 32, 32, 32, 32]

    def test_ceil_mode(self):
        s = tc.generate_schedule(128, 12, ratio=0.15, prune_upto=3, rounding="ceil")
        assert s.lengths[1:4] == (69, 37, 20)

    def test_no_pruning_at_ratio_one(self):
        s = tc.generate_schedule(77, 6, ratio=1.0, prune_upto=3)
        assert all(l == 77 for l in s.lengths)
        assert s.is_full_retention

    def test_cls_survives_tiny_inputs(self):
        s = tc.generate_schedule(2, 4, ratio=0.2, prune_upto=1)
        assert s.lengths[-1] >= 1

    def test_validation(self):
        with pytest.raises(InvalidArgumentError):
            tc.generate_schedule(128, 12, ratio=0.0, prune_upto=3)
        with pytest.raises(InvalidArgumentError):
            tc.generate_schedule(128, 12, ratio=1.5, prune_upto=3)
        with pytest.raises(InvalidArgumentError):
            tc.generate_schedule(128, 12, ratio=0.5, prune_upto=0)
        with pytest.raises(InvalidArgumentError):
            tc.generate_schedule(128, 12, ratio=0.5, prune_upto=13)
        with pytest.raises(InvalidArgumentError):
            tc.generate_schedule(0, 12, ratio=0.5, prune_upto=3)
        with pytest.raises(InvalidArgumentError):
            tc.generate_schedule(128, 12, ratio=0.5, prune_upto=3, rounding="round")

    @given(
        st.floats(0.05, 0.95),
        st.floats(0.0, 0.9),
        st.integers(1, 12),
        st.integers(16, 256),
    )
    @settings(max_examples=60, deadline=None)
    def test_monotone_in_ratio(self, p_low, bump, prune_upto, n):
        p_high = min(1.0, p_low + bump)
        lo = tc.generate_schedule(n, 12, ratio=p_low, prune_upto=prune_upto)
        hi = tc.generate_schedule(n, 12, ratio=p_high, prune_upto=prune_upto)
        assert all(a <= b for a, b in zip(lo.lengths, hi.lengths))

    @given(st.floats(0.05, 1.0), st.integers(1, 8), st.integers(4, 200))
    @settings(max_examples=60, deadline=None)
    def test_invariants_hold(self, p, prune_upto, n):
        s = tc.generate_schedule(n, 8, ratio=p, prune_upto=prune_upto)
        assert s.lengths[0] == n
        assert all(a >= b for a, b in zip(s.lengths, s.lengths[1:]))
        assert s.lengths[-1] >= 1
        tail = s.lengths[prune_upto:]
        assert all(t == tail[0] for t in tail)

    def test_pure_function(self):
        a = tc.generate_schedule(128, 12, ratio=0.3, prune_upto=4)
        b = tc.generate_schedule(128, 12, ratio=0.3, prune_upto=4)
        assert a == b


class TestReferenceSuite:
    def test_thirty_configurations_in_order(self):
        suite = tc.generate_reference_suite()
        assert len(suite) == 30
        assert (suite[0].prune_upto, suite[0].ratio) == (2, 0.15)
        assert [(s.prune_upto, s.ratio) for s in suite] == list(REFERENCE_GRID)

    def test_every_schedule_valid(self):
        for s in tc.generate_reference_suite():
            assert s.lengths[0] == 128
            assert all(a >= b for a, b in zip(s.lengths, s.lengths[1:]))


class TestRandomSchedule:
    def test_deterministic_per_seed(self):
        assert tc.generate_random_schedule(128, 12, 5) == tc.generate_random_schedule(128, 12, 5)

    def test_monotone_and_positive(self):
        for seed in range(20):
            s = tc.generate_random_schedule(64, 8, seed)
            assert all(a >= b for a, b in zip(s.lengths, s.lengths[1:]))
            assert s.lengths[-1] >= 1
            assert s.lengths[0] == 64

    def test_distinct_across_seeds(self):
        draws = {tc.generate_random_schedule(128, 12, seed).lengths for seed in range(10)}
        assert len(draws) >= 2


class TestOtherConstructors:
    def test_input_truncation(self):
        s = tc.input_truncation_schedule(64, 6, keep=9)
        assert s.lengths == (9,) * 7
        assert s.input_len == 64
        with pytest.raises(InvalidArgumentError):
            tc.input_truncation_schedule(64, 6, keep=65)

    def test_pooling_schedule_matches_pool_arithmetic(self):
        s = tc.pooling_schedule(32, 4, window=3, pool_layers=(1, 3))
        # 32 -> 1 + ceil(31/3) = 12 at layer 1, then 1 + ceil(11/3) = 5 at layer 3
        assert s.lengths == (32, 12, 12, 5, 5)

    def test_full_retention(self):
        s = tc.full_retention_schedule(40, 5)
        assert s.is_full_retention and len(s.lengths) == 6


class TestCsv:
    def test_layout_and_roundtrip(self):
        suite = tc.generate_reference_suite()
        text = schedules_to_csv(suite)
        lines = text.strip().split("\n")
        assert lines[0] == "prune_upto,p," + ",".join(f"l{j}" for j in range(1, 13))
        assert len(lines) == 31
        assert lines[2].startswith("3,0.15,68,36,19")
        for line, original in zip(lines[1:], suite):
            back = schedule_from_csv_row(line.split(","), input_len=128)
            assert back.lengths == original.lengths
            assert back.prune_upto == original.prune_upto

    def test_input_truncation_roundtrip(self):
        s = tc.input_truncation_schedule(64, 6, keep=9)
        back = schedule_from_csv_row(s.to_csv_row(), input_len=64)
        assert back.lengths == s.lengths

    def test_short_row_rejected(self):
        with pytest.raises(InvalidArgumentError):
            schedule_from_csv_row(["3", "0.5"], input_len=64)
