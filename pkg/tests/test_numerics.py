import math

import numpy as np
import pytest
from scipy import stats
from scipy.spatial.distance import cdist

from minifsl.errors import DegenerateVector, InvalidConfig, InvalidInput
from minifsl.numerics import (
    RngStream,
    cosine_matrix,
    cosine_similarity,
    derive_stream,
    log_softmax,
    sample_beta,
    softmax,
    sq_euclidean_matrix,
)


class TestSoftmax:
    def test_examples(self):
        np.testing.assert_allclose(softmax([0.0, 0.0]), [0.5, 0.5], atol=1e-15)
        e = math.e
        np.testing.assert_allclose(softmax([1.0, 0.0]), [e / (e + 1), 1 / (e + 1)], atol=1e-15)

    def test_large_logits_do_not_overflow(self):
        p = softmax([1000.0, 0.0])
        assert np.all(np.isfinite(p))
        assert p[0] == pytest.approx(1.0)
        assert p[1] < 1e-300

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidInput):
            softmax([np.nan, 0.0])
        with pytest.raises(InvalidInput):
            softmax([np.inf, 0.0])

    def test_simplex_and_shift_invariance(self):
        gen = np.random.default_rng(1)
        for _ in range(200):
            x = gen.normal(scale=10.0, size=gen.integers(1, 20))
            p = softmax(x)
            assert np.all(p > 0)
            assert p.sum() == pytest.approx(1.0, abs=1e-9)
            np.testing.assert_allclose(softmax(x + gen.normal(scale=50.0)), p, atol=1e-12)

    def test_log_softmax_matches_log(self):
        x = np.array([[0.3, -1.2, 4.0], [10.0, 10.0, 10.0]])
        np.testing.assert_allclose(log_softmax(x, axis=1), np.log(softmax(x, axis=1)), atol=1e-12)


class TestCosine:
    def test_examples(self):
        assert cosine_similarity([1, 0], [1, 0]) == 1.0
        assert cosine_similarity([1, 0], [0, 1]) == 0.0
        assert cosine_similarity([3, 4], [6, 8]) == pytest.approx(1.0, abs=1e-12)

    def test_zero_norm(self):
        with pytest.raises(DegenerateVector):
            cosine_similarity([0, 0], [1, 0])
        with pytest.raises(DegenerateVector):
            cosine_matrix(np.eye(2), np.zeros((1, 2)))

    def test_scale_invariance_and_range(self):
        gen = np.random.default_rng(2)
        for _ in range(100):
            a = gen.normal(size=5)
            b = gen.normal(size=5)
            s = gen.uniform(1e-3, 1e3)
            assert cosine_similarity(a, s * a) == pytest.approx(1.0, abs=1e-12)
            assert -1.0 <= cosine_similarity(a, b) <= 1.0

    def test_matrix_agrees_with_scalar(self):
        gen = np.random.default_rng(3)
        a = gen.normal(size=(4, 6))
        b = gen.normal(size=(3, 6))
        m = cosine_matrix(a, b)
        for i in range(4):
            for j in range(3):
                assert m[i, j] == pytest.approx(cosine_similarity(a[i], b[j]), abs=1e-12)

    def test_sq_euclidean(self):
        gen = np.random.default_rng(4)
        a = gen.normal(size=(5, 3))
        b = gen.normal(size=(2, 3))
        np.testing.assert_allclose(sq_euclidean_matrix(a, b), cdist(a, b, "sqeuclidean"), atol=1e-12)


class TestBeta:
    def test_moments_alpha_2(self):
        lam = sample_beta(RngStream(7), 2.0, size=100_000)
        assert np.all((lam >= 0) & (lam <= 1))
        assert lam.mean() == pytest.approx(0.5, abs=0.005)
        assert lam.var() == pytest.approx(0.05, abs=0.003)

    def test_alpha_1_is_uniform(self):
        lam = sample_beta(RngStream(8), 1.0, size=100_000)
        assert stats.kstest(lam, "uniform").statistic < 0.01

    def test_scalar_draw(self):
        lam = sample_beta(RngStream(9), 0.5)
        assert isinstance(lam, float)
        assert 0.0 <= lam <= 1.0

    @pytest.mark.parametrize("alpha", [0.0, -1.0])
    def test_invalid_alpha(self, alpha):
        with pytest.raises(InvalidConfig):
            sample_beta(RngStream(0), alpha)


class TestStreams:
    def test_identical_streams(self):
        a = RngStream(123, 4).generator.random(100)
        b = RngStream(123, 4).generator.random(100)
        np.testing.assert_array_equal(a, b)

    def test_derive_is_deterministic(self):
        s = RngStream(11)
        assert derive_stream(s, 7) == derive_stream(s, 7)
        np.testing.assert_array_equal(
            derive_stream(s, 7).generator.random(100), derive_stream(s, 7).generator.random(100)
        )

    def test_distinct_tags(self):
        s = RngStream(11)
        a = derive_stream(s, 7).generator.random(100)
        b = derive_stream(s, 8).generator.random(100)
        assert not np.any(a == b)

    def test_derivation_order_matters(self):
        s = RngStream(11)
        a = derive_stream(derive_stream(s, 1), 2)
        b = derive_stream(derive_stream(s, 2), 1)
        assert a != b
        assert not np.array_equal(a.generator.random(20), b.generator.random(20))

    def test_derivation_ignores_consumed_state(self):
        s = RngStream(11)
        before = derive_stream(s, 3)
        s.generator.random(1000)
        assert derive_stream(s, 3) == before

    def test_negative_seed(self):
        with pytest.raises(InvalidConfig):
            RngStream(-1)
