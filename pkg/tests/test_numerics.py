import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scl_finetune.errors import DegenerateData, ZeroVector
from scl_finetune.numerics import (l2_normalize, l2_normalize_rows, log_softmax, normalize_backward,
                                   pairwise_dot, pca_project_2d, principal_components, softmax)

from oracles import random_orthogonal, random_unit_rows

finite = st.floats(-50, 50, allow_nan=False)


class TestL2Normalize:
    def test_pythagorean(self):
        np.testing.assert_allclose(l2_normalize(np.array([3.0, 4.0])), [0.6, 0.8], atol=1e-15)

    def test_unit_vector_unchanged(self):
        u = np.array([0.0, 1.0, 0.0])
        np.testing.assert_array_equal(l2_normalize(u), u)

    def test_zero_vector_raises(self):
        with pytest.raises(ZeroVector):
            l2_normalize(np.zeros(2))

    @given(arrays(np.float64, 5, elements=finite))
    def test_idempotent(self, v):
        if np.linalg.norm(v) < 1e-6:
            return
        once = l2_normalize(v)
        np.testing.assert_allclose(l2_normalize(once), once, atol=1e-15)

    def test_rows_and_backward(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(4, 3))
        unit, norms = l2_normalize_rows(x)
        np.testing.assert_allclose(np.linalg.norm(unit, axis=1), 1.0, atol=1e-12)
        g = rng.normal(size=x.shape)
        analytic = normalize_backward(g, unit, norms)
        h = 1e-6
        for i, j in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[i, j] += h
            xm[i, j] -= h
            num = (np.sum(g * l2_normalize_rows(xp)[0]) - np.sum(g * l2_normalize_rows(xm)[0])) / (2 * h)
            assert analytic[i, j] == pytest.approx(num, abs=1e-8)


class TestSoftmax:
    @pytest.mark.parametrize("logits, expected", [
        ((1.0, 1.0, 1.0), (1 / 3, 1 / 3, 1 / 3)),
        ((0.0, math.log(2.0)), (1 / 3, 2 / 3)),
        ((1000.0, 1000.0), (0.5, 0.5)),
    ])
    def test_examples(self, logits, expected):
        np.testing.assert_allclose(softmax(np.array(logits)), expected, atol=1e-15)

    @given(arrays(np.float64, 6, elements=finite), st.floats(-100, 100))
    def test_sums_to_one_and_shift_invariant(self, v, c):
        p = softmax(v)
        assert abs(p.sum() - 1.0) < 1e-12
        np.testing.assert_allclose(softmax(v + c), p, atol=1e-12)

    def test_log_softmax_consistent(self):
        v = np.array([0.3, -2.0, 5.0])
        np.testing.assert_allclose(np.exp(log_softmax(v)), softmax(v), atol=1e-15)


class TestPairwiseDot:
    def test_orthonormal_rows(self):
        np.testing.assert_array_equal(pairwise_dot(np.eye(2)), np.eye(2))

    def test_single_row(self):
        np.testing.assert_allclose(pairwise_dot(np.array([[0.6, 0.8]])), [[1.0]], atol=1e-15)

    def test_matches_double_loop(self):
        e = random_unit_rows(np.random.default_rng(1), 8, 16)
        g = pairwise_dot(e)
        for i in range(8):
            for j in range(8):
                assert g[i, j] == pytest.approx(sum(e[i, k] * e[j, k] for k in range(16)), abs=1e-12)

    @settings(max_examples=25)
    @given(st.integers(0, 10_000))
    def test_symmetric_and_rotation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        e = random_unit_rows(rng, 6, 5)
        g = pairwise_dot(e)
        assert np.array_equal(g, g.T)
        np.testing.assert_allclose(pairwise_dot(e @ random_orthogonal(rng, 5)), g, atol=1e-9)


class TestPCA:
    def test_2d_data_preserves_distances(self):
        x = np.random.default_rng(2).normal(size=(12, 2))
        p = pca_project_2d(x)
        d0 = np.linalg.norm(x[:, None] - x[None], axis=-1)
        d1 = np.linalg.norm(p[:, None] - p[None], axis=-1)
        np.testing.assert_allclose(d1, d0, atol=1e-9)

    def test_collinear_points(self):
        t = np.linspace(-1, 1, 9)[:, None]
        p = pca_project_2d(t * np.array([[1.0, 2.0, -0.5]]) + 3.0)
        assert p[:, 1].var() < 1e-12

    def test_variances_match_eigensolver(self):
        x = np.random.default_rng(3).normal(size=(10, 5))
        p = pca_project_2d(x)
        xc = x - x.mean(axis=0)
        evals = np.sort(np.linalg.eigvalsh(xc.T @ xc / len(x)))[::-1]
        np.testing.assert_allclose(p.var(axis=0), evals[:2], atol=1e-9)
        assert p.var(axis=0).sum() == pytest.approx(evals[:2].sum(), abs=1e-9)

    def test_sign_convention_deterministic(self):
        x = np.random.default_rng(4).normal(size=(10, 5))
        _, comps, _ = principal_components(x)
        for c in comps:
            first = c[np.abs(c) > 1e-12][0]
            assert first > 0
        np.testing.assert_array_equal(pca_project_2d(x), pca_project_2d(x.copy()))

    @pytest.mark.parametrize("x", [np.ones((1, 3)), np.ones((4, 3))])
    def test_degenerate(self, x):
        with pytest.raises(DegenerateData):
            pca_project_2d(x)
