import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scl_finetune.errors import InvalidPairing, InvalidTemperature
from scl_finetune.objectives import (AugmentedBatch, LabeledBatch, LossConfig, Variant, ce_ce_loss,
                                     combined_loss, compute_loss, cross_entropy, finite_difference_check,
                                     scl_loss, self_supervised_loss)

from oracles import cross_entropy_naive, random_unit_rows, scl_naive, self_supervised_naive


def labeled(rng, n=8, c=3, d=5):
    return LabeledBatch(random_unit_rows(rng, n, d), rng.normal(size=(n, c)), rng.integers(c, size=n), c)


class TestConfig:
    @pytest.mark.parametrize("kwargs", [dict(lam=-0.1), dict(lam=1.1)])
    def test_lambda_range(self, kwargs):
        with pytest.raises(ValueError):
            LossConfig(**kwargs)

    @pytest.mark.parametrize("tau", [0.0, -1.0, float("inf")])
    def test_tau_positive(self, tau):
        with pytest.raises(InvalidTemperature):
            LossConfig(tau=tau)

    def test_round_trip(self):
        cfg = LossConfig(0.3, 0.5, "ce+scl")
        assert cfg.variant is Variant.COMBINED
        assert LossConfig.from_dict(cfg.to_dict()) == cfg

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            LabeledBatch(np.eye(2), np.zeros((2, 2)), np.array([0, 2]), 2)


class TestCrossEntropy:
    def test_uniform_prediction(self):
        out = cross_entropy(LabeledBatch(None, np.zeros((1, 2)), np.array([0]), 2))
        assert out.value == pytest.approx(math.log(2.0), abs=1e-15)

    def test_perfect_prediction_limit(self):
        vals = [cross_entropy(LabeledBatch(None, np.array([[g, 0.0]]), np.array([0]), 2)).value for g in (5, 20, 50)]
        assert vals[0] > vals[1] > vals[2] >= 0.0
        assert vals[2] < 1e-20

    def test_hand_evaluation(self):
        logits = np.array([[2.0, -1.0, 0.5], [0.0, 3.0, 1.0]])
        labels = np.array([2, 1])
        expected = 0.5 * ((math.log(math.exp(2) + math.exp(-1) + math.exp(0.5)) - 0.5)
                          + (math.log(1 + math.exp(3) + math.exp(1)) - 3.0))
        assert cross_entropy(LabeledBatch(None, logits, labels, 3)).value == pytest.approx(expected, abs=1e-12)
        assert cross_entropy_naive(logits.tolist(), labels.tolist()) == pytest.approx(expected, abs=1e-12)


class TestSCL:
    def test_identical_pair_is_zero(self):
        z = np.array([[1.0, 0.0], [1.0, 0.0]])
        assert scl_loss(LabeledBatch(z, None, np.array([0, 0]), 2), 1.0).value == pytest.approx(0.0, abs=1e-15)

    def test_closed_form_three_points(self):
        z = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        out = scl_loss(LabeledBatch(z, None, np.array([0, 0, 1]), 2), 1.0)
        assert out.value == pytest.approx(2 * math.log(1 + math.exp(-1)), abs=1e-12)
        assert out.value == pytest.approx(0.626523, abs=1e-6)

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(0)
        b = labeled(rng, 16, 3, 8)
        assert scl_loss(b, 0.3).value == pytest.approx(scl_naive(b.embeddings, b.labels, 0.3), abs=1e-10)

    def test_degenerate_anchor_contributes_nothing(self):
        rng = np.random.default_rng(1)
        z = random_unit_rows(rng, 5, 4)
        labels = np.array([0, 0, 1, 1, 2])
        with_single = scl_loss(LabeledBatch(z, None, labels, 3), 0.5)
        # anchor 4 adds no value term; it still appears as a negative for the others
        assert with_single.value == pytest.approx(scl_naive(z, labels, 0.5), abs=1e-12)
        only_singletons = scl_loss(LabeledBatch(z[:3], None, np.array([0, 1, 2]), 3), 0.5)
        assert only_singletons.value == 0.0
        assert np.all(only_singletons.grad_embeddings == 0.0)

    def test_single_class_batch_defined(self):
        z = random_unit_rows(np.random.default_rng(2), 4, 3)
        out = scl_loss(LabeledBatch(z, None, np.zeros(4, dtype=int), 2), 0.7)
        assert np.isfinite(out.value) and out.value >= 0

    def test_temperature_hardness(self):
        # anchors 0 and 1 share a class; rows 2-4 are singleton negatives, so
        # their gradient rows come only from the two active anchors
        z = np.array([[1.0, 0.0, 0.0], [0.2, 0.98, 0.0], [0.9, 0.0, 0.43], [0.0, 0.0, 1.0], [-1.0, 0.0, 0.0]])
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        labels = np.array([0, 0, 1, 2, 3])
        sims = z @ z.T
        assert sims[0, 2] > sims[0, 1]  # a negative beats the positive
        shares = []
        for tau in (0.7, 0.5, 0.3, 0.1):
            g = scl_loss(LabeledBatch(z, None, labels, 4), tau).grad_embeddings
            mags = np.linalg.norm(g[2:], axis=1)
            shares.append(mags[0] / mags.sum())
        assert all(a < b for a, b in zip(shares, shares[1:])), shares


class TestSelfSupervised:
    def test_single_pair_is_zero(self):
        z = random_unit_rows(np.random.default_rng(3), 2, 3)
        assert self_supervised_loss(AugmentedBatch.consecutive(z), 1.0).value == pytest.approx(0.0, abs=1e-15)

    def test_closed_form_two_pairs(self):
        a, b = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        out = self_supervised_loss(AugmentedBatch.consecutive(np.stack([a, a, b, b])), LossConfig(tau=1.0))
        assert out.value == pytest.approx(4 * math.log(1 + 2 / math.e), abs=1e-12)
        # each anchor: -log(e / (e + 2)); the decimal is 2.205779, not 2.206085
        assert out.value == pytest.approx(2.205779, abs=1e-6)

    def test_matches_double_loop(self):
        rng = np.random.default_rng(4)
        z = random_unit_rows(rng, 12, 6)
        pair = rng.permutation(12).reshape(6, 2)
        pair_of = np.empty(12, dtype=int)
        pair_of[pair[:, 0]], pair_of[pair[:, 1]] = pair[:, 1], pair[:, 0]
        got = self_supervised_loss(AugmentedBatch(z, pair_of), 0.3).value
        assert got == pytest.approx(self_supervised_naive(z, pair_of, 0.3), abs=1e-10)

    @pytest.mark.parametrize("pair_of", [[0, 1], [1, 2, 0], [1, 0, 3]])
    def test_invalid_pairing(self, pair_of):
        with pytest.raises(InvalidPairing):
            AugmentedBatch(np.eye(3)[: len(pair_of)], np.array(pair_of))


class TestCombined:
    def test_endpoints_exact(self):
        b = labeled(np.random.default_rng(5))
        assert combined_loss(b, LossConfig(0.0, 0.3)).value == cross_entropy(b).value
        assert combined_loss(b, LossConfig(1.0, 0.3)).value == scl_loss(b, 0.3).value

    def test_linear_combination(self):
        assert (1 - 0.9) * 0.5 + 0.9 * 1.0 == pytest.approx(0.95)
        b = labeled(np.random.default_rng(6))
        ce, scl = cross_entropy(b).value, scl_loss(b, 0.3).value
        assert combined_loss(b, LossConfig(0.9, 0.3)).value == pytest.approx(0.1 * ce + 0.9 * scl, abs=1e-14)

    def test_dispatch(self):
        b = labeled(np.random.default_rng(7))
        assert compute_loss(b, LossConfig(variant="ce")).value == cross_entropy(b).value
        assert compute_loss(b, LossConfig(0.2, 0.5, "scl")).value == scl_loss(b, 0.5).value
        with pytest.raises(ValueError):
            compute_loss(b, LossConfig(variant="self"))


class TestCECE:
    def test_tau_one_reduces_to_ce(self):
        rng = np.random.default_rng(8)
        b = labeled(rng, 6, 3, 4)
        w = rng.normal(size=(3, 4))
        plain = cross_entropy(LabeledBatch(None, b.embeddings @ w.T, b.labels, 3)).value
        assert ce_ce_loss(b, w, 1.0).value == plain

    def test_halving_tau_keeps_argmax(self):
        rng = np.random.default_rng(9)
        z, w = random_unit_rows(rng, 6, 4), rng.normal(size=(3, 4))
        for tau in (0.6, 0.3, 0.15):
            assert np.array_equal(np.argmax(z @ w.T / tau, axis=1), np.argmax(z @ w.T, axis=1))

    def test_scaled_softmax_oracle(self):
        rng = np.random.default_rng(10)
        b = labeled(rng, 7, 3, 5)
        w = rng.normal(size=(3, 5))
        expected = cross_entropy_naive((b.embeddings @ w.T / 0.3).tolist(), b.labels.tolist())
        assert ce_ce_loss(b, w, LossConfig(tau=0.3)).value == pytest.approx(expected, abs=1e-12)


class TestFiniteDifference:
    def test_ce(self):
        b = labeled(np.random.default_rng(11))
        assert finite_difference_check(cross_entropy, b, h=1e-6) < 1e-6

    def test_scl(self):
        b = labeled(np.random.default_rng(12))
        assert finite_difference_check(lambda x, c: scl_loss(x, c.tau), b, LossConfig(tau=0.3), h=1e-6) < 1e-5

    def test_combined(self):
        b = labeled(np.random.default_rng(13))
        assert finite_difference_check(combined_loss, b, LossConfig(0.9, 0.3), h=1e-6) < 1e-5

    def test_detects_wrong_gradient(self):
        b = labeled(np.random.default_rng(14))

        def broken(x, c):
            out = combined_loss(x, c)
            out.grad_embeddings = out.grad_embeddings * 1.01
            return out

        assert finite_difference_check(broken, b, LossConfig(0.9, 0.3), h=1e-5) > 1e-3

    @pytest.mark.parametrize("h", [1e-8, 1e-3])
    def test_step_range(self, h):
        with pytest.raises(ValueError):
            finite_difference_check(cross_entropy, labeled(np.random.default_rng(0)), h=h)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([0.1, 0.3, 1.0]))
def test_contrastive_losses_nonnegative(seed, tau):
    rng = np.random.default_rng(seed)
    b = labeled(rng, int(rng.integers(2, 12)), 3, 4)
    assert scl_loss(b, tau).value >= 0.0
    z = random_unit_rows(rng, 2 * int(rng.integers(1, 6)), 4)
    assert self_supervised_loss(AugmentedBatch.consecutive(z), tau).value >= 0.0


def test_single_row_batch_is_zero():
    z = np.array([[0.6, 0.8]])
    out = scl_loss(LabeledBatch(z, np.zeros((1, 2)), np.array([1]), 2), 0.3)
    assert out.value == 0.0 and np.all(out.grad_embeddings == 0.0)
    assert combined_loss(LabeledBatch(z, np.zeros((1, 2)), np.array([1]), 2), LossConfig()).value == pytest.approx(
        0.1 * math.log(2.0))
