import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from curdkv.linalg import (
    ShapeError,
    SvdConvergenceError,
    as_matrix,
    derive_seed,
    frobenius_norm,
    gaussian_sketch,
    matmul,
    softmax_rows,
    svd_thin,
)

from oracles import frobenius_loops, matmul_loops, power_iteration_norm

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_as_matrix_rejects_nonfinite_and_bad_rank():
    with pytest.raises(ValueError):
        as_matrix([[1.0, np.nan]])
    with pytest.raises(ValueError):
        as_matrix([[np.inf]])
    with pytest.raises(ShapeError):
        as_matrix([1.0, 2.0])
    with pytest.raises(ShapeError):
        as_matrix(np.zeros((0, 3)))


class TestSvd:
    def test_identity(self):
        res = svd_thin(np.eye(2))
        np.testing.assert_allclose(res.singular_values, [1.0, 1.0])
        assert res.rank == 2

    def test_diagonal_sorted(self):
        res = svd_thin([[3.0, 0.0], [0.0, 4.0], [0.0, 0.0]])
        np.testing.assert_allclose(res.singular_values, [4.0, 3.0])
        assert res.rank == 2

    def test_random_reconstruction(self):
        a = np.random.default_rng(1).standard_normal((8, 5))
        res = svd_thin(a)
        err = np.linalg.norm(res.reconstruct() - a) / np.linalg.norm(a)
        assert err < 1e-8

    def test_rank_cutoff_on_low_rank(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((10, 3)) @ rng.standard_normal((3, 7))
        res = svd_thin(a)
        assert res.rank == 3
        assert np.all(res.singular_values > 1e-10 * res.singular_values[0])

    def test_zero_matrix_has_rank_zero(self):
        res = svd_thin(np.zeros((4, 3)))
        assert res.rank == 0
        assert res.u.shape == (4, 0)

    def test_row_norms_sum_to_rank(self):
        rng = np.random.default_rng(3)
        for rank in (1, 2, 4):
            a = rng.standard_normal((9, rank)) @ rng.standard_normal((rank, 6))
            u = svd_thin(a).u
            assert abs(np.sum(u * u) - rank) < 1e-8

    def test_convergence_failure_names_shape(self, monkeypatch):
        def boom(*args, **kwargs):
            raise np.linalg.LinAlgError("SVD did not converge")

        monkeypatch.setattr(np.linalg, "svd", boom)
        with pytest.raises(SvdConvergenceError, match="5x3"):
            svd_thin(np.ones((5, 3)))

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 7), st.integers(1, 7)), elements=finite))
    def test_invariants(self, a):
        res = svd_thin(a)
        r = res.rank
        np.testing.assert_allclose(res.u.T @ res.u, np.eye(r), atol=1e-8)
        np.testing.assert_allclose(res.vt @ res.vt.T, np.eye(r), atol=1e-8)
        assert np.all(np.diff(res.singular_values) <= 0)
        scale = max(1.0, np.linalg.norm(a))
        assert np.linalg.norm(res.reconstruct() - a) <= 1e-8 * scale


class TestSoftmax:
    def test_symmetric_pair(self):
        np.testing.assert_allclose(softmax_rows([[0.0, 0.0]]), [[0.5, 0.5]], atol=1e-15)

    def test_ln2(self):
        np.testing.assert_allclose(softmax_rows([[math.log(2.0), 0.0]]), [[2 / 3, 1 / 3]], atol=1e-15)

    def test_large_logit_no_overflow(self):
        out = softmax_rows([[1000.0, 0.0]])
        assert np.all(np.isfinite(out))
        assert abs(out[0, 0] - 1.0) < 1e-12 and out[0, 1] < 1e-12

    @settings(max_examples=80, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 9)), elements=st.floats(-700, 700)))
    def test_row_stochastic(self, a):
        s = softmax_rows(a)
        assert np.all(s >= 0)
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)

    def test_operator_norm_at_most_sqrt_rows(self):
        rng = np.random.default_rng(4)
        for trial in range(40):
            rows, cols = rng.integers(1, 20, size=2)
            s = softmax_rows(rng.standard_normal((rows, cols)) * rng.choice([0.1, 1.0, 10.0]))
            assert power_iteration_norm(s, seed=trial) <= math.sqrt(rows) + 1e-9

    def test_operator_norm_can_be_below_sqrt_rows(self):
        # uniform rows: ||S||_op = sqrt(rows / cols), strictly below sqrt(rows)
        s = softmax_rows(np.zeros((4, 4)))
        assert power_iteration_norm(s) == pytest.approx(1.0)


class TestFrobenius:
    def test_zero(self):
        assert frobenius_norm(np.zeros((3, 2))) == 0.0

    def test_three_four_five(self):
        assert frobenius_norm([[3.0, 4.0]]) == 5.0

    def test_matches_loops(self):
        a = np.random.default_rng(5).standard_normal((6, 6))
        assert abs(frobenius_norm(a) - frobenius_loops(a)) < 1e-12


class TestMatmul:
    def test_identity(self):
        a = np.random.default_rng(6).standard_normal((4, 3))
        np.testing.assert_array_equal(matmul(np.eye(4), a), a)

    def test_hand(self):
        np.testing.assert_array_equal(matmul([[1, 2], [3, 4]], [[0], [1]]), [[2], [4]])

    def test_matches_loops(self):
        rng = np.random.default_rng(7)
        a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
        np.testing.assert_allclose(matmul(a, b), matmul_loops(a, b), atol=1e-12)

    def test_mismatch_names_shapes(self):
        with pytest.raises(ShapeError, match="2x3 by 2x3"):
            matmul(np.ones((2, 3)), np.ones((2, 3)))


class TestGaussianSketch:
    def test_deterministic(self):
        np.testing.assert_array_equal(gaussian_sketch(16, 5, 42), gaussian_sketch(16, 5, 42))
        assert not np.array_equal(gaussian_sketch(16, 5, 42), gaussian_sketch(16, 5, 43))

    def test_degenerate_shape(self):
        g = gaussian_sketch(1, 1, 0)
        assert g.shape == (1, 1)
        assert g[0, 0] == np.random.default_rng(0).standard_normal()

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            gaussian_sketch(0, 3, 0)

    @pytest.mark.slow
    def test_pooled_variance(self):
        samples = np.stack([gaussian_sketch(128, 20, s) for s in range(10_000)])
        assert abs(samples.mean()) < 5 * math.sqrt(1 / 20 / samples.size)
        assert abs(samples.var() - 1 / 20) < 0.05 / 20

    def test_row_norm_unbiased(self):
        v = np.random.default_rng(8).standard_normal(32)
        est = np.mean([np.sum((v @ gaussian_sketch(32, 20, s)) ** 2) for s in range(10_000)])
        assert abs(est - v @ v) / (v @ v) < 0.02


def test_derive_seed_stable_and_distinct():
    assert derive_seed(7, 0) == derive_seed(7, 0)
    assert len({derive_seed(7, i) for i in range(64)}) == 64
    assert derive_seed(-1, 3) >= 0
