"""Critic objectives and regression targets.

Losses take ``predictions`` as a :class:`~avec.autodiff.Tensor` (anything
array-like is wrapped as a constant) and ``targets`` as plain data, and
return a scalar Tensor so they can be differentiated.

Normalisation conventions:

* ``mse_loss``: mean of squared residuals.
* ``residual_variance_loss``: unbiased 1/(T-1) sample variance of residuals;
  the batch mean is part of the graph.
* ``alpha_loss``: population variance + alpha * squared mean residual, so that
  ``alpha_loss(., 1) == mse_loss`` exactly and
  ``alpha_loss(., 0) * T/(T-1) == residual_variance_loss``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from avec.autodiff import Tensor, as_tensor

__all__ = [
    "CriticLossSpec", "ResidualBatch", "GaeConfig",
    "mse_loss", "residual_variance_loss", "alpha_loss", "weighted_residual_variance",
    "critic_loss", "bias_correct", "correction_offset",
    "gae_targets", "sac_td_targets", "variance_contraction_check",
]


@dataclass(frozen=True)
class CriticLossSpec:
    variant: str = "mse"
    alpha: float = 0.0

    VARIANTS = ("mse", "avec", "alpha")

    def __post_init__(self):
        if self.variant not in self.VARIANTS:
            raise ValueError(f"critic loss must be one of {self.VARIANTS}, got {self.variant!r}")

    @property
    def corrects_bias(self) -> bool:
        """Whether the fitted critic needs the per-batch mean correction."""
        return self.variant == "avec" or (self.variant == "alpha" and self.alpha == 0.0)

    def __str__(self) -> str:
        return f"alpha({self.alpha:g})" if self.variant == "alpha" else self.variant


@dataclass
class ResidualBatch:
    predictions: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.predictions = np.asarray(self.predictions, dtype=np.float64).reshape(-1)
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1)
        if self.predictions.shape != self.targets.shape:
            raise ValueError(f"length mismatch: {self.predictions.shape} vs {self.targets.shape}")
        if not (np.all(np.isfinite(self.predictions)) and np.all(np.isfinite(self.targets))):
            raise ValueError("non-finite entries in residual batch")

    @property
    def residuals(self) -> np.ndarray:
        return self.predictions - self.targets

    def __len__(self) -> int:
        return len(self.targets)


@dataclass(frozen=True)
class GaeConfig:
    gamma: float = 0.99
    lam: float = 0.95

    def __post_init__(self):
        # gamma = 1 is allowed: the recursion over a finite batch stays well defined
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")


def _residuals(predictions, targets, min_len: int) -> Tensor:
    pred = as_tensor(predictions)
    tgt = np.asarray(targets, dtype=np.float64)
    if pred.ndim != 1 or tgt.shape != pred.shape:
        raise ValueError(f"predictions {pred.shape} and targets {tgt.shape} must be equal-length vectors")
    if len(tgt) < min_len:
        raise ValueError(f"need a batch of at least {min_len}, got {len(tgt)}")
    return pred - tgt


def mse_loss(predictions, targets) -> Tensor:
    r = _residuals(predictions, targets, 1)
    return (r ** 2).mean()


def residual_variance_loss(predictions, targets) -> Tensor:
    r = _residuals(predictions, targets, 2)
    centred = r - r.mean()
    return (centred ** 2).sum() * (1.0 / (len(r) - 1))


def alpha_loss(predictions, targets, alpha: float) -> Tensor:
    r = _residuals(predictions, targets, 2)
    bias = r.mean()
    centred = r - bias
    return (centred ** 2).mean() + (bias ** 2) * float(alpha)


def weighted_residual_variance(predictions, targets, weights) -> Tensor:
    """Population residual variance under sample weights (normalised internally)."""
    r = _residuals(predictions, targets, 2)
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    centred = r - (r * w).sum()
    return (centred ** 2 * w).sum()


def critic_loss(spec: CriticLossSpec, predictions, targets) -> Tensor:
    if spec.variant == "mse":
        return mse_loss(predictions, targets)
    if spec.variant == "avec":
        return residual_variance_loss(predictions, targets)
    return alpha_loss(predictions, targets, spec.alpha)


def correction_offset(predictions, targets) -> float:
    """mean(targets - predictions), the constant added by :func:`bias_correct`."""
    p = np.asarray(predictions.data if isinstance(predictions, Tensor) else predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.size == 0 or p.shape != t.shape:
        raise ValueError("bias correction needs a non-empty batch of matching shapes")
    return float(np.mean(t - p))


def bias_correct(predictions, targets) -> np.ndarray:
    """g = f + mean(targets - f); the offset is plain data, not part of any graph."""
    p = np.asarray(predictions.data if isinstance(predictions, Tensor) else predictions, dtype=np.float64)
    return p + correction_offset(p, targets)


def gae_targets(rewards, dones, values, cfg: GaeConfig, *, next_values=None, episode_ends=None):
    """Generalised advantage estimates and value targets.

    ``values`` has T + 1 entries: the old critic on every visited state plus
    the bootstrap value of the final next-state. ``dones`` marks true
    terminals (no bootstrap). For time-limit truncation inside the batch pass
    ``next_values`` (old critic on each s') and ``episode_ends`` (terminal or
    truncated) so the recursion stops at episode boundaries while still
    bootstrapping from s'.

    Returns (advantages, targets) with targets = values[:T] + advantages.
    """
    r = np.asarray(rewards, dtype=np.float64)
    d = np.asarray(dones, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    T = len(r)
    if len(d) != T or len(v) != T + 1:
        raise ValueError(f"need T rewards/dones and T+1 values, got {T}, {len(d)}, {len(v)}")
    nv = v[1:] if next_values is None else np.asarray(next_values, dtype=np.float64)
    ends = d if episode_ends is None else np.asarray(episode_ends, dtype=np.float64)
    if len(nv) != T or len(ends) != T:
        raise ValueError("next_values and episode_ends need one entry per transition")
    adv = np.zeros(T)
    last = 0.0
    for t in range(T - 1, -1, -1):
        delta = r[t] + cfg.gamma * nv[t] * (1.0 - d[t]) - v[t]
        last = delta + cfg.gamma * cfg.lam * (1.0 - ends[t]) * last
        adv[t] = last
    return adv, v[:T] + adv


def sac_td_targets(rewards, dones, next_values, gamma: float) -> np.ndarray:
    """Q-hat = r + gamma (1 - done) V_target(s'); ``next_values`` must come from the target network."""
    nv = np.asarray(next_values.data if isinstance(next_values, Tensor) else next_values, dtype=np.float64)
    if not np.all(np.isfinite(nv)):
        raise FloatingPointError("non-finite target values")
    r = np.asarray(rewards, dtype=np.float64)
    d = np.asarray(dones, dtype=np.float64)
    return r + gamma * (1.0 - d) * nv.reshape(r.shape)


def variance_contraction_check(n_vars: int, n_samples: int, rng: np.random.Generator) -> tuple[float, float]:
    """Empirical vs predicted variance of X_1 - mean(X) for iid unit-variance X.

    The prediction is V - 2V/T + V/T = 1 - 1/T for V = 1.
    """
    if n_vars < 2 or n_samples < 10_000:
        raise ValueError("need n_vars >= 2 and n_samples >= 1e4")
    x = rng.standard_normal((n_samples, n_vars))
    centred = x[:, 0] - x.mean(axis=1)
    predicted = 1.0 - 2.0 / n_vars + n_vars / n_vars ** 2
    return float(np.var(centred, ddof=1)), float(predicted)
