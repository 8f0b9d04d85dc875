"""Loss-weight simplex, training-rate tracking, and the lambda gradient."""

import numpy as np
import pytest

from mvnas.autodiff import Tensor, backward
from mvnas.errors import ConfigurationError, NumericError
from mvnas.loss_balance import (
    RateTracker,
    grad_regularizer,
    normalized_weights,
    rescale_for_retrain,
    total_loss,
)

from helpers import numerical_gradient


def scalar_losses(values):
    return [Tensor(np.asarray(v, dtype=np.float64), requires_grad=True) for v in values]


class TestNormalizedWeights:
    def test_simplex_invariants(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            lam = rng.normal(scale=rng.uniform(0.1, 20.0), size=3)
            w = normalized_weights(lam)
            assert abs(w.sum() - 1.0) < 1e-12
            assert (w > 0.0).all()

    def test_shift_invariance(self):
        lam = np.asarray([0.3, -1.2, 2.0])
        np.testing.assert_allclose(
            normalized_weights(lam), normalized_weights(lam + 123.456), atol=1e-15
        )

    def test_extreme_logits_stay_finite(self):
        w = normalized_weights(np.asarray([800.0, -800.0, 0.0]))
        assert np.isfinite(w).all()
        assert abs(w.sum() - 1.0) < 1e-12

    def test_accepts_tensor(self):
        lam = Tensor(np.zeros(3))
        np.testing.assert_allclose(normalized_weights(lam), np.full(3, 1 / 3))


class TestTotalLoss:
    def test_weighted_sum_value(self):
        losses = scalar_losses([2.0, 4.0, 8.0])
        lam = Tensor(np.log(np.asarray([0.5, 0.25, 0.25])))
        total = total_loss(losses, lam)
        assert float(total.data) == pytest.approx(0.5 * 2 + 0.25 * 4 + 0.25 * 8)

    def test_gradient_is_the_weight(self):
        losses = scalar_losses([1.0, 2.0, 3.0])
        lam = Tensor(np.asarray([0.1, -0.3, 0.7]), requires_grad=True)
        total = total_loss(losses, lam)
        backward(total)
        w = normalized_weights(lam)
        for loss, wi in zip(losses, w):
            assert float(loss.grad) == pytest.approx(wi, rel=1e-14)
        # lambda enters as a constant: no gradient flows back into it
        assert lam.grad is None

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        lam = Tensor(rng.normal(size=3))
        losses = scalar_losses(rng.uniform(0.5, 3.0, size=3))
        analytic = []
        backward(total_loss(losses, lam))
        analytic = [float(l.grad) for l in losses]
        numeric = numerical_gradient(lambda: total_loss(losses, lam), losses)
        np.testing.assert_allclose(analytic, [float(g) for g in numeric], atol=1e-9)

    def test_non_finite_loss_is_named(self):
        losses = scalar_losses([1.0, np.nan, 1.0])
        with pytest.raises(NumericError, match="L2"):
            total_loss(losses, Tensor(np.zeros(3)))

    def test_wrong_count(self):
        with pytest.raises(ConfigurationError):
            total_loss(scalar_losses([1.0, 2.0]), Tensor(np.zeros(3)))


class TestRateTracker:
    def test_first_update_is_neutral(self):
        t = RateTracker(beta=0.9)
        np.testing.assert_array_equal(t.update([1.0, 2.0, 3.0]), np.ones(3))

    def test_literal_ratio_at_beta_zero(self):
        t = RateTracker(beta=0.0)
        t.update([2.0, 2.0, 2.0])
        rates = t.update([1.0, 2.0, 4.0])
        np.testing.assert_allclose(rates, [2.0, 1.0, 0.5])
        # history is now the current losses exactly
        rates = t.update([1.0, 1.0, 1.0])
        np.testing.assert_allclose(rates, [1.0, 2.0, 4.0])

    def test_smoothing_recurrence(self):
        beta = 0.9
        t = RateTracker(beta=beta)
        t.update([4.0, 4.0, 4.0])
        t.update([2.0, 2.0, 2.0])
        expected_hist = beta * 4.0 + (1 - beta) * 2.0
        rates = t.update([1.0, 1.0, 1.0])
        np.testing.assert_allclose(rates, np.full(3, expected_hist / 1.0))

    def test_improving_loss_has_rate_above_one(self):
        t = RateTracker(beta=0.5)
        t.update([1.0, 1.0, 1.0])
        rates = t.update([0.5, 1.0, 2.0])
        assert rates[0] > 1.0
        assert rates[1] == pytest.approx(1.0)
        assert rates[2] < 1.0

    def test_nonpositive_loss_raises_and_names(self):
        t = RateTracker()
        with pytest.raises(NumericError, match="L3"):
            t.update([1.0, 1.0, 0.0])
        with pytest.raises(NumericError, match="L1"):
            t.update([np.inf, 1.0, 1.0])

    def test_zero_guard_holds_rate_at_one(self):
        t = RateTracker(beta=0.0, zero_guard=True)
        t.update([1.0, 1.0, 0.0])
        rates = t.update([2.0, 0.5, 0.0])
        np.testing.assert_allclose(rates, [0.5, 2.0, 1.0])
        # a later positive value is adopted as fresh history, rate stays 1
        rates = t.update([2.0, 0.5, 3.0])
        assert rates[2] == pytest.approx(1.0)
        rates = t.update([2.0, 0.5, 1.0])
        assert rates[2] == pytest.approx(3.0)

    def test_state_round_trip(self):
        a = RateTracker(beta=0.7)
        a.update([3.0, 2.0, 1.0])
        a.update([2.0, 2.0, 2.0])
        b = RateTracker()
        b.load_state_dict(a.state_dict())
        np.testing.assert_array_equal(a.update([1.0, 2.0, 3.0]), b.update([1.0, 2.0, 3.0]))

    def test_beta_validation(self):
        with pytest.raises(ConfigurationError):
            RateTracker(beta=1.0)


class TestGradRegularizer:
    def test_gradient_is_rates_minus_one(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            lam = Tensor(rng.normal(size=3), requires_grad=True)
            rates = rng.uniform(0.2, 3.0, size=3)
            backward(grad_regularizer(lam, rates))
            np.testing.assert_allclose(lam.grad, rates - 1.0, atol=1e-15)
            # descending this gradient moves each logit against its rate
            assert all(np.sign(-lam.grad[i]) == np.sign(1.0 - rates[i]) or rates[i] == 1.0
                       for i in range(3))

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        lam = Tensor(rng.normal(size=3), requires_grad=True)
        rates = rng.uniform(0.5, 2.0, size=3)
        backward(grad_regularizer(lam, rates))
        numeric = numerical_gradient(lambda: grad_regularizer(lam, rates), [lam])[0]
        np.testing.assert_allclose(lam.grad, numeric, atol=1e-9)

    def test_non_finite_rates(self):
        with pytest.raises(NumericError):
            grad_regularizer(Tensor(np.zeros(3), requires_grad=True), [1.0, np.nan, 1.0])


class TestRescale:
    def test_first_weight_pinned_to_one(self):
        scaled = rescale_for_retrain((0.25, 0.25, 0.5))
        assert scaled == pytest.approx((1.0, 1.0, 2.0))

    def test_ratio_preserving(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            w = rng.uniform(0.05, 1.0, size=3)
            w = w / w.sum()
            scaled = rescale_for_retrain(tuple(w))
            assert scaled[0] == 1.0
            assert scaled[1] / scaled[2] == pytest.approx(w[1] / w[2])

    def test_zero_first_weight(self):
        with pytest.raises(ConfigurationError):
            rescale_for_retrain((0.0, 0.5, 0.5))
