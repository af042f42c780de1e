"""Rollout collection, on-policy rollout buffers and the SAC replay buffer."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from avec.envs import ContinuousEnv


class RunningNorm:
    """Running mean/variance observation filter (Welford, batched)."""

    def __init__(self, dim: int, clip: float = 10.0):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.count = 1e-4
        self.clip = clip

    def update(self, x: np.ndarray) -> None:
        x = np.atleast_2d(x)
        b_mean, b_var, n = x.mean(axis=0), x.var(axis=0), x.shape[0]
        delta = b_mean - self.mean
        total = self.count + n
        self.mean = self.mean + delta * n / total
        m2 = self.var * self.count + b_var * n + delta ** 2 * self.count * n / total
        self.var = m2 / total
        self.count = total

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.clip((x - self.mean) / np.sqrt(self.var + 1e-8), -self.clip, self.clip)


@dataclass
class RolloutBuffer:
    """T on-policy transitions with the old critic's values on s and s'."""

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminals: np.ndarray
    truncated: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    next_values: np.ndarray
    next_obs: np.ndarray
    states: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def episode_ends(self) -> np.ndarray:
        return np.maximum(self.terminals, self.truncated)

    @property
    def values_with_bootstrap(self) -> np.ndarray:
        return np.append(self.values, self.next_values[-1])


@dataclass
class Episode:
    step: int
    ret: float
    length: int


class Collector:
    """Steps one environment with a policy, carrying episodes across calls.

    Episode start seeds are drawn from the collector's own generator, so a
    run is reproducible from its seed alone.
    """

    def __init__(self, env: ContinuousEnv, rng: np.random.Generator, obs_norm: RunningNorm | None = None):
        self.env = env
        self.rng = rng
        self.obs_norm = obs_norm
        self.total_steps = 0
        self._reset()

    def _reset(self) -> None:
        self.state = self.env.reset(int(self.rng.integers(2 ** 31)))
        self.t = 0
        self.ep_return = 0.0

    def observe(self, state) -> np.ndarray:
        obs = self.env.observe(state)
        return self.obs_norm(obs) if self.obs_norm is not None else obs

    def step(self, policy) -> tuple:
        """One environment step.

        Returns (state, obs, action, step_result, log_prob, finished episode or None).
        """
        raw = self.env.observe(self.state)
        if self.obs_norm is not None:
            self.obs_norm.update(raw)
        obs = self.observe(self.state)
        a, env_a, logp = policy.act(obs[None, :], self.rng)
        res = self.env.step(self.state, env_a[0], self.t)
        self.total_steps += 1
        self.ep_return += res.reward
        self.t += 1
        prev_state = self.state
        finished = None
        if res.done:
            finished = Episode(self.total_steps, self.ep_return, self.t)
            self._reset()
        else:
            self.state = res.next_state
        return prev_state, obs, a[0], res, float(logp[0]), finished


def collect_rollout(collector: Collector, policy, value_fn, T: int) -> tuple[RolloutBuffer, list[Episode]]:
    """Collect T transitions; the old critic is evaluated on s and s' at collection time."""
    if T < 1:
        raise ValueError("rollout horizon must be >= 1")
    env = collector.env
    obs = np.zeros((T, env.obs_dim))
    next_obs = np.zeros((T, env.obs_dim))
    actions = np.zeros((T, env.act_dim))
    states = np.zeros((T, env.state_dim))
    rewards, terms, truncs, logps = np.zeros(T), np.zeros(T), np.zeros(T), np.zeros(T)
    episodes = []
    for t in range(T):
        state, o, a, res, logp, ep = collector.step(policy)
        obs[t], actions[t], states[t] = o, a, state
        next_obs[t] = collector.observe(res.next_state)
        rewards[t], terms[t], truncs[t], logps[t] = res.reward, res.terminal, res.truncated, logp
        if ep is not None:
            episodes.append(ep)
    values = value_fn.predict(obs).reshape(-1)
    next_values = value_fn.predict(next_obs).reshape(-1)
    buf = RolloutBuffer(obs, actions, rewards, terms, truncs, logps, values, next_values, next_obs, states)
    return buf, episodes


class ReplayBuffer:
    """Fixed-capacity ring buffer with uniform sampling after ``min_fill`` transitions."""

    def __init__(self, obs_dim: int, act_dim: int, capacity: int, min_fill: int = 1):
        self.capacity = int(capacity)
        self.min_fill = int(min_fill)
        self.obs = np.zeros((self.capacity, obs_dim))
        self.actions = np.zeros((self.capacity, act_dim))
        self.rewards = np.zeros(self.capacity)
        self.next_obs = np.zeros((self.capacity, obs_dim))
        self.terminals = np.zeros(self.capacity)
        self.ptr = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    @property
    def ready(self) -> bool:
        return self.size >= self.min_fill

    def add(self, obs, action, reward, next_obs, terminal) -> None:
        i = self.ptr
        self.obs[i], self.actions[i], self.rewards[i] = obs, action, reward
        self.next_obs[i], self.terminals[i] = next_obs, float(terminal)
        self.ptr = (self.ptr + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict:
        if not self.ready:
            raise RuntimeError(f"replay holds {self.size} < {self.min_fill} transitions")
        idx = rng.integers(0, self.size, size=batch_size)
        return {"obs": self.obs[idx], "actions": self.actions[idx], "rewards": self.rewards[idx],
                "next_obs": self.next_obs[idx], "terminals": self.terminals[idx]}
