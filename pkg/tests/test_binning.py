import numpy as np
import pytest
from hypothesis import given, strategies as st

from flimflan.binning import LogBinSpec, bin_edges, compress_counts, compress_histogram, solve_ratio
from flimflan.decay import Histogram


def geometric_sum(r, m):
    return sum(r**i for i in range(m))


class TestSolveRatio:
    def test_default_layout(self):
        r = solve_ratio(256, 80)
        assert r == pytest.approx(1.0256, abs=5e-5)
        assert geometric_sum(r, 80) == pytest.approx(256, abs=1e-8)

    def test_hand_solved_case(self):
        assert solve_ratio(3, 2) == 2.0

    def test_near_uniform_limit(self):
        r = solve_ratio(256, 255)
        assert 1.0 < r < 1.0001
        assert geometric_sum(r, 255) == pytest.approx(256, abs=1e-8)

    @given(st.integers(3, 2000), st.data())
    def test_root_satisfies_series(self, T, data):
        M = data.draw(st.integers(2, T - 1))
        r = solve_ratio(T, M)
        assert r > 1
        assert geometric_sum(r, M) == pytest.approx(T, rel=1e-9)

    @pytest.mark.parametrize("T,M", [(256, 1), (256, 256), (10, 20)])
    def test_no_solution(self, T, M):
        with pytest.raises(ValueError):
            solve_ratio(T, M)


class TestEdges:
    def test_hand_evaluated(self):
        np.testing.assert_array_equal(bin_edges(3, 2, 2.0), [0, 1, 3])

    def test_default_partition(self):
        spec = LogBinSpec()
        e = spec.edges
        assert e[0] == 0 and e[1] == 1 and e[80] == 256
        assert spec.widths.sum() == 256
        assert np.all(spec.widths >= 1)
        # geometric growth up to one bin of flooring jitter
        assert np.all(np.diff(spec.widths) >= -1)

    def test_front_bins_keep_single_bin_resolution(self):
        w = LogBinSpec().widths
        assert np.all(w[:9] == 1)
        assert np.all(w[:20] <= 2)

    @given(st.integers(3, 1000), st.data())
    def test_partition_property(self, T, data):
        M = data.draw(st.integers(2, T - 1))
        e = LogBinSpec(T, M).edges
        assert e[0] == 0 and e[-1] == T and len(e) == M + 1
        assert np.all(np.diff(e) >= 1)


class TestCompress:
    def test_hand_merge(self):
        np.testing.assert_array_equal(compress_counts(np.array([5, 2, 1]), np.array([0, 1, 3])), [5, 3])

    def test_all_zero(self):
        out = compress_counts(np.zeros(256, dtype=np.int64), LogBinSpec().edges)
        np.testing.assert_array_equal(out, np.zeros(80))

    @given(st.lists(st.integers(0, 65535), min_size=256, max_size=256))
    def test_conservation(self, counts):
        c = np.array(counts, dtype=np.int64)
        assert compress_counts(c, LogBinSpec().edges).sum() == c.sum()

    def test_rowwise(self):
        rng = np.random.default_rng(0)
        x = rng.integers(0, 100, (5, 256))
        e = LogBinSpec().edges
        np.testing.assert_array_equal(compress_counts(x, e), np.stack([compress_counts(r, e) for r in x]))

    def test_histogram_records_edges(self):
        h = compress_histogram(Histogram(np.arange(256)), LogBinSpec())
        assert len(h) == 80
        np.testing.assert_array_equal(h.bin_edges, LogBinSpec().edges)

    def test_double_compression_rejected(self):
        h = compress_histogram(Histogram(np.ones(256, dtype=np.int64)), LogBinSpec())
        with pytest.raises(ValueError):
            compress_histogram(h, LogBinSpec())

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            compress_histogram(Histogram(np.ones(100)), LogBinSpec())
