"""
Tests for shared helpers
"""

import numpy as np
import pytest

from hetroute.utils import dirichlet_flows, format_float, largest_remainder, parallel_map, segment_sum


class TestLargestRemainder:
    """Rounding shares into integer counts"""

    def test_ties_go_to_lower_index(self):
        assert largest_remainder(np.array([0.25, 0.25, 0.25, 0.25]), 10).tolist() == [3, 3, 2, 2]

    def test_unnormalised_weights(self):
        assert largest_remainder(np.array([2.0, 1.0, 1.0]), 4).tolist() == [2, 1, 1]

    def test_zero_weights_spread_evenly(self):
        assert largest_remainder(np.zeros(3), 3).tolist() == [1, 1, 1]

    @pytest.mark.parametrize("total", [1, 7, 1000])
    def test_sum(self, total):
        counts = largest_remainder(np.random.default_rng(total).random(5), total)
        assert counts.sum() == total
        assert np.all(counts >= 0)


class TestSampling:
    """Seeded Dirichlet flows"""

    def test_admissible(self):
        z = dirichlet_flows(np.random.default_rng(0), [4, 1, 3], [1.2, 0.5, 2.0], 50)
        assert z.shape == (50, 8)
        np.testing.assert_allclose(segment_sum(z.T, np.array([0, 4, 5])).T, np.tile([1.2, 0.5, 2.0], (50, 1)))

    def test_seeded(self):
        a = dirichlet_flows(np.random.default_rng(3), [2, 2], [1.0, 1.0], 5)
        b = dirichlet_flows(np.random.default_rng(3), [2, 2], [1.0, 1.0], 5)
        np.testing.assert_array_equal(a, b)


class TestParallelMap:
    """Order-preserving process fan-out"""

    @pytest.mark.parametrize("jobs", [1, 2])
    def test_keeps_order(self, jobs):
        assert parallel_map(abs, [-3, 1, -2, 5], jobs=jobs) == [3, 1, 2, 5]

    def test_empty(self):
        assert parallel_map(abs, [], jobs=4) == []


def test_format_float():
    assert format_float(0.5) == "0.5"
    assert format_float(1 / 3) == "0.33333333333333331"
