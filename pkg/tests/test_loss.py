"""Loss-layer checks: exact values, stability limits, gradient identities.

The reference for the fused form is the naive two-step formula (sigmoid,
then log) evaluated with mpmath at 50 digits; a float64 two-step
evaluation loses accuracy near saturation through the 1 - sigmoid
cancellation, so high precision is the only honest comparison at the
1e-12 tolerance.
"""

import math

import mpmath
import numpy as np
import pytest

from duotag import autodiff as ad
from duotag.loss import (LossBatch, TemperedScale, analytic_grad_logits,
                         hardness_profile, softplus, stable_sigmoid,
                         tempered_bce)

mpmath.mp.dps = 50


def naive_loss_highprec(raw, targets, pos_weights, logit_scale):
    """Two-step tempered BCE evaluated at 50 decimal digits."""
    n, n_classes = raw.shape
    total = mpmath.mpf(0)
    factor = mpmath.exp(mpmath.mpf(logit_scale))
    for i in range(n):
        for j in range(n_classes):
            z = mpmath.mpf(raw[i, j]) * factor
            sig = 1 / (1 + mpmath.exp(-z))
            y = targets[i, j]
            p = pos_weights[j]
            total += -(p * y * mpmath.log(sig) + (1 - y) * mpmath.log(1 - sig))
    return total / (n * n_classes)


class TestLossValues:
    def test_zero_logit_positive_is_ln2(self):
        for logit_scale in (0.0, 1.0, 3.652):
            batch = LossBatch(np.array([[0.0]]), np.array([[1.0]]))
            node = tempered_bce(batch, TemperedScale(logit_scale))
            assert node.item() == pytest.approx(math.log(2.0), abs=1e-15)

    def test_positive_weight_scales_positive_term(self):
        batch = LossBatch(np.array([[0.0]]), np.array([[1.0]]), np.array([10.0]))
        node = tempered_bce(batch, TemperedScale(0.0))
        assert node.item() == pytest.approx(10.0 * math.log(2.0), rel=1e-15)

    def test_extreme_negative_logit_with_negative_target_is_zero(self):
        batch = LossBatch(np.array([[-1e4]]), np.array([[0.0]]))
        node = tempered_bce(batch, TemperedScale(0.0))
        assert node.item() == 0.0

    def test_extreme_negative_logit_with_positive_target(self):
        # loss -> p * |x| / tau, finite; verified against high precision
        for logit_scale, p in ((0.0, 1.0), (math.log(2.0), 10.0)):
            batch = LossBatch(np.array([[-1e4]]), np.array([[1.0]]), np.array([p]))
            node = tempered_bce(batch, TemperedScale(logit_scale))
            expected = float(naive_loss_highprec(batch.raw_logits, batch.targets,
                                                 batch.pos_weights, logit_scale))
            assert node.item() == pytest.approx(expected, rel=1e-12)
            assert node.item() == pytest.approx(p * 1e4 * math.exp(logit_scale),
                                                rel=1e-3)

    def test_nan_input_rejected(self):
        with pytest.raises(FloatingPointError):
            LossBatch(np.array([[np.nan]]), np.array([[1.0]]))

    def test_shape_and_binary_validation(self):
        with pytest.raises(ValueError):
            LossBatch(np.zeros((2, 2)), np.zeros((2, 3)))
        with pytest.raises(ValueError):
            LossBatch(np.zeros((1, 1)), np.array([[0.5]]))
        with pytest.raises(ValueError):
            LossBatch(np.zeros((1, 2)), np.zeros((1, 2)), np.array([1.0, -1.0]))


class TestFusedVsNaive:
    @pytest.mark.parametrize("seed", range(20))
    def test_agreement_within_moderate_range(self, seed):
        rng = np.random.default_rng(seed)
        n, n_classes = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        logit_scale = float(rng.uniform(0.0, 3.0))
        # keep |scaled| <= 30
        raw = rng.uniform(-1.0, 1.0, size=(n, n_classes)) * 30.0 * np.exp(-logit_scale)
        targets = (rng.random((n, n_classes)) < 0.5).astype(float)
        pos_w = rng.uniform(0.5, 10.0, size=n_classes)
        batch = LossBatch(raw, targets, pos_w)
        fused = tempered_bce(batch, TemperedScale(logit_scale)).item()
        naive = float(naive_loss_highprec(raw, targets, pos_w, logit_scale))
        assert fused == pytest.approx(naive, abs=1e-12)

    def test_finite_across_extreme_scaled_logits(self):
        for scaled in (-1e6, -30.0, -1.0, 0.0, 1.0, 30.0, 1e6):
            batch = LossBatch(np.array([[scaled]]), np.array([[1.0]]))
            node = tempered_bce(batch, TemperedScale(0.0))
            grads = node.tape.backward(node)
            assert np.isfinite(node.item())
            assert np.all(np.isfinite(grads["raw_logits"]))
            assert np.all(np.isfinite(grads["logit_scale"]))

    def test_reduces_to_plain_mean_bce(self):
        rng = np.random.default_rng(11)
        raw = rng.normal(size=(4, 3))
        targets = (rng.random((4, 3)) < 0.5).astype(float)
        batch = LossBatch(raw, targets)
        fused = tempered_bce(batch, TemperedScale(0.0)).item()
        sig = 1.0 / (1.0 + np.exp(-raw))
        direct = -(targets * np.log(sig) + (1 - targets) * np.log(1 - sig)).mean()
        assert fused == pytest.approx(direct, rel=1e-12)


class TestGradients:
    def test_saturated_correct_positive_has_zero_gradient(self):
        batch = LossBatch(np.array([[500.0]]), np.array([[1.0]]))
        grad = analytic_grad_logits(batch, TemperedScale(0.0))
        assert grad[0, 0] == 0.0

    def test_hand_value_at_half_tau(self):
        # tau = 0.5, y = 1, x = 0: gradient = (1/tau) * (sigma - 1) = -1
        batch = LossBatch(np.array([[0.0]]), np.array([[1.0]]))
        grad = analytic_grad_logits(batch, TemperedScale(math.log(2.0)))
        assert grad[0, 0] == pytest.approx(-1.0, rel=1e-15)

    @pytest.mark.parametrize("seed", range(30))
    def test_matches_autodiff_through_mean_reduction(self, seed):
        rng = np.random.default_rng(seed)
        n, n_classes = int(rng.integers(1, 6)), int(rng.integers(1, 5))
        raw = rng.normal(size=(n, n_classes))
        targets = (rng.random((n, n_classes)) < 0.5).astype(float)
        pos_w = rng.uniform(0.5, 10.0, size=n_classes)
        scale = TemperedScale(float(rng.uniform(0.0, 4.0)))
        batch = LossBatch(raw, targets, pos_w)
        node = tempered_bce(batch, scale)
        grads = node.tape.backward(node)
        expected = analytic_grad_logits(batch, scale) / (n * n_classes)
        np.testing.assert_allclose(grads["raw_logits"], expected, rtol=1e-10)

    @pytest.mark.parametrize("seed", range(10))
    def test_paper_form_for_unit_weights(self, seed):
        rng = np.random.default_rng(seed)
        raw = rng.normal(size=(3, 4))
        targets = (rng.random((3, 4)) < 0.5).astype(float)
        scale = TemperedScale(float(rng.uniform(0.0, 4.0)))
        batch = LossBatch(raw, targets)
        node = tempered_bce(batch, scale)
        grads = node.tape.backward(node)
        inv_tau = math.exp(scale.logit_scale)
        sig = stable_sigmoid(raw * inv_tau)
        expected = inv_tau * (sig - targets) / raw.size
        np.testing.assert_allclose(grads["raw_logits"], expected, rtol=1e-10)

    def test_logit_scale_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        raw = rng.normal(size=(4, 3))
        targets = (rng.random((4, 3)) < 0.5).astype(float)
        pos_w = rng.uniform(1.0, 10.0, size=3)

        def build(params):
            batch = LossBatch(params["raw_logits"], targets, pos_w)
            return tempered_bce(batch, TemperedScale(float(params["logit_scale"][0, 0])))

        err = ad.finite_difference_check(
            build, {"raw_logits": raw, "logit_scale": np.array([[1.3]])})
        assert err < 1e-6

    def test_monotone_hardness_in_logit(self):
        xs = np.linspace(-5.0, 5.0, 101).reshape(1, -1)
        scale = TemperedScale(0.7)
        pos = analytic_grad_logits(
            LossBatch(xs, np.ones_like(xs), np.ones(xs.shape[1])), scale)
        neg = analytic_grad_logits(
            LossBatch(xs, np.zeros_like(xs), np.ones(xs.shape[1])), scale)
        assert np.all(np.diff(np.abs(pos[0])) < 0)  # positives: decreasing in x
        assert np.all(np.diff(np.abs(neg[0])) > 0)  # negatives: increasing in x


class TestHardnessProfile:
    def test_inverse_temperature_proportionality(self):
        mags = hardness_profile([1.0, 0.5, 0.25], gap=0.5)
        np.testing.assert_allclose(mags, [0.5, 1.0, 2.0], rtol=1e-15)

    def test_zero_gap_gives_zeros(self):
        np.testing.assert_array_equal(hardness_profile([1.0, 2.0], gap=0.0),
                                      [0.0, 0.0])

    def test_doubling_tau_halves_magnitudes(self):
        taus = np.array([0.1, 0.7, 1.3])
        a = hardness_profile(taus, gap=0.3)
        b = hardness_profile(2.0 * taus, gap=0.3)
        np.testing.assert_allclose(b, a / 2.0, rtol=1e-15)

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            hardness_profile([0.0, 1.0], gap=0.5)
        with pytest.raises(ValueError):
            hardness_profile([1.0], gap=1.5)


class TestNumericHelpers:
    def test_softplus_stability(self):
        z = np.array([-1e6, -30.0, 0.0, 30.0, 1e6])
        out = softplus(z)
        assert np.all(np.isfinite(out))
        assert out[0] == 0.0
        assert out[-1] == 1e6

    def test_stable_sigmoid_range_and_symmetry(self):
        z = np.linspace(-40.0, 40.0, 401)
        s = stable_sigmoid(z)
        assert np.all((s >= 0.0) & (s <= 1.0))
        np.testing.assert_allclose(s + stable_sigmoid(-z), 1.0, atol=1e-15)
