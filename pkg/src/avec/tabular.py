"""Tabular tooling: compatible critics and exact-vs-sampled policy gradients.

Used to check, where everything is enumerable, that a mean-corrected critic
trained on residual variance yields an unbiased score-function gradient.
"""
from __future__ import annotations

import math

import numpy as np

from avec.autodiff import Adam, Tensor, grad
from avec.critic import weighted_residual_variance
from avec.envs import (SoftmaxTabularPolicy, TabularMDP, discounted_visitation, exact_q_values,
                       exact_values)


class CompatibleCritic:
    """f(s, a) = w . grad_theta log pi(a|s) for a softmax tabular policy.

    With one weight per (s, a) this is w[s, a] - sum_b pi(b|s) w[s, b].
    """

    def __init__(self, policy: SoftmaxTabularPolicy):
        self.probs = policy.probs()
        self.w = Tensor(np.zeros_like(self.probs), requires_grad=True, name="compat.w")

    def __call__(self) -> Tensor:
        w = self.w
        return w - (w * self.probs).sum(axis=1, keepdims=True)

    def values(self) -> np.ndarray:
        return self.w.data - (self.w.data * self.probs).sum(axis=1, keepdims=True)


def fit_compatible_critic(mdp: TabularMDP, policy: SoftmaxTabularPolicy, steps: int = 3000,
                          lr: float = 0.05) -> tuple[CompatibleCritic, np.ndarray]:
    """Fit by Adam on the on-policy residual variance against exact Q.

    Returns the critic and the mean-corrected estimate g (an S x A array).
    """
    critic = CompatibleCritic(policy)
    probs = critic.probs
    weights = (discounted_visitation(mdp, probs)[:, None] * probs).reshape(-1)
    q = exact_q_values(mdp, probs).reshape(-1)
    opt = Adam([critic.w], lr=lr)
    for _ in range(steps):
        loss = weighted_residual_variance(critic().reshape(-1), q, weights)
        opt.step(grad(loss, [critic.w]))
    f = critic.values().reshape(-1)
    w = weights / weights.sum()
    g = f + float(np.sum(w * (q - f)))
    return critic, g.reshape(probs.shape)


def _horizon(gamma: float, tol: float) -> int:
    return 1 if gamma == 0.0 else int(math.ceil(math.log(tol) / math.log(gamma))) + 1


def score_function_samples(mdp: TabularMDP, policy: SoftmaxTabularPolicy, n: int, rng: np.random.Generator,
                           q_critic: np.ndarray | None = None, v_baseline: np.ndarray | None = None,
                           tol: float = 1e-10) -> np.ndarray:
    """Per-trajectory policy-gradient samples, shape (n, n_states, n_actions).

    With ``q_critic`` the sample is sum_t gamma^t grad log pi(a_t|s_t) q_critic[s_t, a_t];
    otherwise sum_t gamma^t grad log pi(a_t|s_t) (G_t - v_baseline[s_t]).
    Trajectories are cut once gamma^t < ``tol``.
    """
    probs = policy.probs()
    S, A = probs.shape
    cum = np.cumsum(probs, axis=1)
    s = rng.choice(S, size=n, p=mdp.start)
    out = np.zeros((n, S, A))
    trace = np.zeros((n, S, A))
    rows = np.arange(n)
    disc = 1.0
    for _ in range(_horizon(mdp.gamma, tol)):
        a = (rng.random(n)[:, None] > cum[s]).sum(axis=1)
        a = np.minimum(a, A - 1)
        score = np.zeros((n, S, A))
        score[rows, s, :] = -probs[s]
        score[rows, s, a] += 1.0
        if q_critic is not None:
            out += disc * score * q_critic[s, a][:, None, None]
        else:
            # sum_t gamma^t score_t G_t == sum_k gamma^k r_k sum_{t<=k} score_t
            trace += score
            out += disc * mdp.reward[s, a][:, None, None] * trace
            if v_baseline is not None:
                out -= disc * score * v_baseline[s][:, None, None]
        s = mdp.next_state[s, a]
        disc *= mdp.gamma
    return out


def tabular_gradient_batches(mdp: TabularMDP, policy: SoftmaxTabularPolicy, n_batches: int, batch_size: int,
                             rng: np.random.Generator, **kwargs) -> list[np.ndarray]:
    """``n_batches`` independent batch-mean gradient estimates, each flattened."""
    if n_batches < 2:
        raise ValueError("need at least two batches")
    return [score_function_samples(mdp, policy, batch_size, rng, **kwargs).mean(axis=0).ravel()
            for _ in range(n_batches)]


def induced_values(env, agent) -> tuple[np.ndarray, np.ndarray]:
    """Exact V of the tabular policy induced by a Gaussian agent on a TabularEnv, and the agent's estimates."""
    n = env.mdp.n_states
    obs = np.eye(n)
    mean, std = agent.policy.mean_std(obs)
    probs = env.induced_policy(mean[:, 0], std[:, 0])
    return exact_values(env.mdp, probs), agent.values(obs)
