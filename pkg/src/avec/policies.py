"""Gaussian policies: a state-independent log-std head (PPO) and a tanh-squashed head (SAC)."""
from __future__ import annotations

import math

import numpy as np

from avec.autodiff import MLP, Tensor, as_tensor, forward_numpy

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class GaussianPolicy:
    """pi(a|s) = N(mean_net(s), diag(exp(log_std))^2), unsquashed."""

    def __init__(self, obs_dim: int, act_dim: int, hidden=(64, 64), activation: str = "tanh",
                 rng: np.random.Generator | None = None, init_log_std: float = 0.0):
        self.mean_net = MLP([obs_dim, *hidden, act_dim], activation, rng, out_gain=0.01, name="pi.mean")
        self.log_std = Tensor(np.full(act_dim, float(init_log_std)), requires_grad=True, name="pi.log_std")
        self.act_dim = act_dim

    def parameters(self) -> list[Tensor]:
        return self.mean_net.parameters() + [self.log_std]

    def _log_std(self) -> Tensor:
        return self.log_std.clip(LOG_STD_MIN, LOG_STD_MAX)

    def log_prob(self, obs, actions) -> Tensor:
        mean = self.mean_net(obs)
        ls = self._log_std()
        z = (as_tensor(actions) - mean) / ls.exp()
        return (z ** 2).sum(axis=1) * -0.5 - ls.sum() - self.act_dim * _HALF_LOG_2PI

    def entropy(self) -> float:
        ls = np.clip(self.log_std.data, LOG_STD_MIN, LOG_STD_MAX)
        return float(np.sum(ls) + self.act_dim * (0.5 + _HALF_LOG_2PI))

    def mean_std(self, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mean = forward_numpy(self.mean_net, np.atleast_2d(obs))
        std = np.exp(np.clip(self.log_std.data, LOG_STD_MIN, LOG_STD_MAX))
        return mean, np.broadcast_to(std, mean.shape)

    def act(self, obs: np.ndarray, rng: np.random.Generator):
        """Sample for a batch of observations; returns (actions, env_actions, log_probs)."""
        mean, std = self.mean_std(obs)
        eps = rng.standard_normal(mean.shape)
        a = mean + std * eps
        logp = -0.5 * np.sum(eps * eps, axis=1) - np.sum(np.log(std), axis=1) - self.act_dim * _HALF_LOG_2PI
        return a, a, logp


class TanhGaussianPolicy:
    """a = scale * tanh(u), u ~ N(mu(s), sigma(s)); one network outputs (mu, log sigma)."""

    def __init__(self, obs_dim: int, act_dim: int, hidden=(256, 256), activation: str = "relu",
                 rng: np.random.Generator | None = None, act_scale=1.0):
        self.net = MLP([obs_dim, *hidden, 2 * act_dim], activation, rng, out_gain=0.01, name="pi.net")
        self.act_dim = act_dim
        self.act_scale = np.broadcast_to(np.asarray(act_scale, dtype=np.float64), (act_dim,)).copy()

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()

    def rsample(self, obs, eps: np.ndarray) -> tuple[Tensor, Tensor]:
        """Reparameterised sample in [-1, 1]^d and its log-probability (tanh-corrected)."""
        out = self.net(obs)
        d = self.act_dim
        mean = out[:, :d]
        log_std = out[:, d:].clip(LOG_STD_MIN, LOG_STD_MAX)
        u = mean + log_std.exp() * eps
        gauss = (log_std * -1.0).sum(axis=1) - 0.5 * np.sum(eps * eps, axis=1) - d * _HALF_LOG_2PI
        # log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))
        log_det = ((u * -2.0).softplus() + u - math.log(2.0)).sum(axis=1) * 2.0
        return u.tanh(), gauss + log_det

    def act(self, obs: np.ndarray, rng: np.random.Generator):
        out = forward_numpy(self.net, np.atleast_2d(obs))
        d = self.act_dim
        mean, log_std = out[:, :d], np.clip(out[:, d:], LOG_STD_MIN, LOG_STD_MAX)
        eps = rng.standard_normal(mean.shape)
        u = mean + np.exp(log_std) * eps
        a = np.tanh(u)
        logp = (-np.sum(log_std, axis=1) - 0.5 * np.sum(eps * eps, axis=1) - d * _HALF_LOG_2PI
                - 2.0 * np.sum(math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u), axis=1))
        return a, a * self.act_scale, logp
