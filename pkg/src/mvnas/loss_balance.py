"""Loss weighting: normalized trade-off weights, training rates, and the
rate regularizer that drives the lambda update.

The total loss is a softmax(lambda)-weighted sum of the three task losses.
Lambda itself is never trained through the total loss; it descends the
regularizer sum_i lambda_i * (r_i - 1), whose gradient is exactly r - 1,
where r_i is the ratio of the (smoothed) previous validation loss to the
current one. A loss that is improving faster than its peers (r_i > 1) has
its logit pushed down, and vice versa.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, NumericError

N_LOSSES = 3


def normalized_weights(lam):
    """softmax of the 3 lambda logits as a plain array."""
    data = lam.data if isinstance(lam, Tensor) else np.asarray(lam, dtype=np.float64)
    z = data - data.max()
    w = np.exp(z)
    return w / w.sum()


def total_loss(losses, lam):
    """sum_i softmax(lambda)_i * L_i, differentiable w.r.t. the losses only.

    The weights enter as constants: the architecture update never descends
    the total loss with respect to lambda, so lambda stays out of this graph.
    """
    if len(losses) != N_LOSSES:
        raise ConfigurationError(f"expected {N_LOSSES} losses, got {len(losses)}")
    for i, loss in enumerate(losses):
        if not np.all(np.isfinite(loss.data)):
            raise NumericError(f"loss L{i + 1} is non-finite")
    w = normalized_weights(lam)
    return ad.weighted_sum([ad.reshape(l, ()) for l in losses], Tensor(w))


class RateTracker:
    """Exponentially smoothed previous losses and the training-rate ratio.

    beta = 0 recovers the literal previous/current rule; the default 0.9
    damps the noise of per-batch validation losses. The first update has no
    history and returns rates of exactly 1.

    With zero_guard enabled, a loss that is exactly 0 (a legitimately
    perfect objective, e.g. the hinge loss once classes separate) yields a
    rate of 1 and leaves that component's history unchanged, instead of
    raising.
    """

    def __init__(self, beta=0.9, zero_guard=False):
        if not 0.0 <= beta < 1.0:
            raise ConfigurationError(f"beta must be in [0, 1), got {beta}")
        self.beta = float(beta)
        self.zero_guard = bool(zero_guard)
        self.smoothed = None

    def update(self, current):
        """Consume this iteration's validation losses, return (r1, r2, r3)."""
        current = np.asarray(current, dtype=np.float64)
        if current.shape != (N_LOSSES,):
            raise ConfigurationError(f"expected {N_LOSSES} losses, got shape {current.shape}")
        bad = ~(np.isfinite(current) & (current > 0.0))
        if bad.any() and not self.zero_guard:
            idx = int(np.flatnonzero(bad)[0])
            raise NumericError(
                f"training rate needs positive finite losses; L{idx + 1} = {current[idx]}"
            )
        if self.smoothed is None:
            # nan marks components still waiting for their first usable value
            self.smoothed = np.where(bad, np.nan, current)
            return np.ones(N_LOSSES)
        no_hist = np.isnan(self.smoothed)
        usable = ~bad & ~no_hist
        rates = np.ones(N_LOSSES)
        rates[usable] = self.smoothed[usable] / current[usable]
        adopt = ~bad & no_hist
        self.smoothed[adopt] = current[adopt]
        self.smoothed[usable] = (
            self.beta * self.smoothed[usable] + (1.0 - self.beta) * current[usable]
        )
        return rates

    def state_dict(self):
        return {
            "beta": self.beta,
            "zero_guard": self.zero_guard,
            "smoothed": None if self.smoothed is None else self.smoothed.copy(),
        }

    def load_state_dict(self, state):
        self.beta = float(state["beta"])
        self.zero_guard = bool(state["zero_guard"])
        sm = state["smoothed"]
        self.smoothed = None if sm is None else np.asarray(sm, dtype=np.float64).copy()


def grad_regularizer(lam, rates):
    """sum_i lambda_i * (r_i - 1); its lambda gradient is exactly rates - 1."""
    rates = np.asarray(rates, dtype=np.float64)
    if rates.shape != (N_LOSSES,):
        raise ConfigurationError(f"expected {N_LOSSES} rates, got shape {rates.shape}")
    if not np.all(np.isfinite(rates)):
        raise NumericError("training rates are non-finite")
    return ad.sum_(lam * Tensor(rates - 1.0))


def rescale_for_retrain(weights):
    """Rescale normalized weights so the shape-classification weight is 1."""
    w1, w2, w3 = (float(w) for w in weights)
    if w1 <= 0.0:
        raise ConfigurationError(f"first loss weight must be positive, got {w1}")
    return (1.0, w2 / w1, w3 / w1)
