"""Critic-quality and gradient-variance diagnostics.

Every function here is read-only with respect to network parameters; fresh
rollouts use the generator passed in, never the training one.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass
from itertools import combinations
from typing import Sequence

import numpy as np

from avec.buffers import Collector, collect_rollout
from avec.critic import bias_correct

__all__ = [
    "DiagnosticsReport", "TrueTargetEstimate", "empirical_target_distance", "true_target_estimate",
    "true_target_distance", "bias_variance_decompose", "percent_variation",
    "pairwise_cosine_similarity", "gradient_batches", "diagnose",
]


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


def empirical_target_distance(predictions, targets) -> float:
    """RMS distance between critic outputs and the regression targets it was trained on."""
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if p.size == 0:
        raise ValueError("empty buffer")
    if p.shape != t.shape:
        raise ValueError(f"length mismatch {p.shape} vs {t.shape}")
    return _rms(p - t)


@dataclass
class TrueTargetEstimate:
    obs: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    returns: np.ndarray
    n_transitions: int
    # largest gamma^k weight of the discarded tail over all samples
    truncation_bound: float

    def per_state_mean(self, n_states: int) -> np.ndarray:
        """Average return per integer state id (tabular environments)."""
        idx = self.states[:, 0].astype(int)
        sums = np.bincount(idx, weights=self.returns, minlength=n_states)
        counts = np.bincount(idx, minlength=n_states)
        return np.divide(sums, counts, out=np.full(n_states, np.nan), where=counts > 0)


def true_target_estimate(env, policy, budget: int, gamma: float, rng: np.random.Generator, *,
                         obs_fn=None, soft_alpha: float = 0.0, tol: float = 1e-6) -> TrueTargetEstimate:
    """Monte-Carlo discounted returns-to-go of the current policy.

    Whole episodes are collected until at least ``budget`` transitions are
    recorded. Each recorded step's return is rolled until a terminal or until
    gamma^k < ``tol``, continuing past the time limit (which is not a true
    terminal); steps taken past the limit are not recorded as samples.
    With ``soft_alpha`` > 0 the returns are soft Q targets:
    r_t + sum_{k>=1} gamma^k (r_{t+k} - alpha log pi(a_{t+k}|s_{t+k})).
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    obs_fn = obs_fn or env.observe
    tail = 0 if gamma == 0.0 else int(math.ceil(math.log(tol) / math.log(gamma)))
    all_obs, all_states, all_actions, all_returns = [], [], [], []
    bound = 0.0
    n = 0
    while n < budget:
        state = env.reset(int(rng.integers(2 ** 31)))
        obs_l, st_l, act_l, rew_l, bonus_l = [], [], [], [], []
        recorded = 0
        t = 0
        while True:
            obs = obs_fn(state)
            a, env_a, logp = policy.act(obs[None, :], rng)
            res = env.step(state, env_a[0], t)
            obs_l.append(obs)
            st_l.append(np.atleast_1d(state).astype(np.float64))
            act_l.append(a[0])
            rew_l.append(res.reward)
            bonus_l.append(-soft_alpha * float(logp[0]))
            t += 1
            if t <= env.horizon:
                recorded = t
            if res.terminal or t >= env.horizon + tail:
                break
            state = res.next_state
        rew = np.array(rew_l)
        bonus = np.array(bonus_l)
        # returns-to-go: R_t = r_t + gamma * (bonus_{t+1} + R_{t+1})
        ret = np.zeros(len(rew))
        acc = 0.0
        for k in range(len(rew) - 1, -1, -1):
            nxt = acc + (bonus[k + 1] if k + 1 < len(rew) else 0.0)
            acc = rew[k] + gamma * nxt
            ret[k] = acc
        if not res.terminal:
            bound = max(bound, gamma ** (len(rew) - recorded + 1))
        all_obs.append(np.array(obs_l[:recorded]))
        all_states.append(np.array(st_l[:recorded]))
        all_actions.append(np.array(act_l[:recorded]))
        all_returns.append(ret[:recorded])
        n += recorded
    return TrueTargetEstimate(np.concatenate(all_obs), np.concatenate(all_states), np.concatenate(all_actions),
                              np.concatenate(all_returns), n, bound)


def true_target_distance(predictions, true_est, corrected: bool, offset: float | None = None) -> float:
    """RMS distance of an estimator to Monte-Carlo targets.

    With ``corrected`` the predictions are mean-corrected first: by ``offset``
    when given (the constant the training pipeline computed), otherwise by
    the mean residual on this batch.
    """
    targets = true_est.returns if isinstance(true_est, TrueTargetEstimate) else np.asarray(true_est, dtype=np.float64)
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    if p.shape != targets.shape:
        raise ValueError(f"state mismatch: {p.shape} predictions for {targets.shape} targets")
    if corrected:
        p = p + offset if offset is not None else bias_correct(p, targets)
    return _rms(p - targets)


def bias_variance_decompose(predictions, targets) -> tuple[float, float]:
    """(Bias^2, Var) of the residuals, population convention: Bias^2 + Var = MSE."""
    r = np.asarray(predictions, dtype=np.float64).reshape(-1) - np.asarray(targets, dtype=np.float64).reshape(-1)
    if r.size < 2:
        raise ValueError("need at least two samples")
    bias = float(np.mean(r))
    return bias * bias, float(np.mean((r - bias) ** 2))


def percent_variation(quantity_avec: float, quantity_base: float) -> float:
    if quantity_base == 0:
        raise ZeroDivisionError("baseline quantity is zero")
    return 100.0 * (quantity_avec - quantity_base) / quantity_base


def pairwise_cosine_similarity(gradients: Sequence[np.ndarray]) -> float:
    """Mean cosine over all unordered pairs of gradient vectors."""
    vs = [np.asarray(g, dtype=np.float64).ravel() for g in gradients]
    if len(vs) < 2:
        raise ValueError("need at least two gradient vectors")
    if len({v.size for v in vs}) != 1:
        raise ValueError("gradient vectors differ in length")
    norms = [np.linalg.norm(v) for v in vs]
    if min(norms) == 0.0:
        raise ValueError("zero-norm gradient vector")
    units = [v / n for v, n in zip(vs, norms)]
    cos = [float(np.clip(a @ b, -1.0, 1.0)) for a, b in combinations(units, 2)]
    return float(np.mean(cos))


def gradient_batches(agent, env, n_batches: int, batch_size: int, rng: np.random.Generator,
                     obs_norm=None) -> list[np.ndarray]:
    """Independent policy-gradient estimates at the agent's current parameters.

    Each estimate uses ``batch_size`` fresh transitions from the agent's own
    policy: the score-function surrogate for PPO, the reparameterised policy
    objective on the visited states for SAC.
    """
    if n_batches < 2:
        raise ValueError("need at least two batches")
    out = []
    for _ in range(n_batches):
        col = Collector(env, np.random.default_rng(rng.integers(2 ** 63)), copy.deepcopy(obs_norm))
        col.obs_norm = _frozen(col.obs_norm)
        if hasattr(agent, "value_fn"):
            buf, _ = collect_rollout(col, agent.policy, agent.value_fn, batch_size)
            out.append(agent.policy_gradient(buf))
        else:
            obs = np.stack([col.step(agent.policy)[1] for _ in range(batch_size)])
            out.append(agent.policy_gradient(obs, rng))
    return out


class _FrozenNorm:
    def __init__(self, norm):
        self.norm = norm

    def update(self, x):
        pass

    def __call__(self, x):
        return self.norm(x)


def _frozen(norm):
    return None if norm is None else _FrozenNorm(norm)


@dataclass
class DiagnosticsReport:
    step: int
    empirical_distance: float
    true_distance: float
    true_distance_raw: float
    true_distance_corrected: float
    bias2: float
    variance: float
    cosine: float
    n_empirical: int
    n_true: int
    truncation_bound: float

    def check(self, tol: float = 1e-8) -> None:
        """Raise if the report violates its invariants."""
        if abs(self.bias2 + self.variance - self.true_distance ** 2) > tol * max(1.0, self.true_distance ** 2):
            raise AssertionError(f"bias^2 + var != MSE at step {self.step}")
        if not -1.0 <= self.cosine <= 1.0:
            raise AssertionError(f"cosine {self.cosine} outside [-1, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def diagnose(agent, env, step: int, empirical: tuple[np.ndarray, np.ndarray, np.ndarray | None],
             gamma: float, budget: int, n_batches: int, batch_size: int, rng: np.random.Generator,
             obs_norm=None) -> DiagnosticsReport:
    """Run the full diagnostic protocol at the agent's current parameters.

    ``empirical`` is (obs, targets, actions or None) from the latest update:
    actions are given for Q critics (SAC), None for state-value critics (PPO).
    """
    is_q = hasattr(agent, "q_values")
    norm = _frozen(obs_norm)
    obs_fn = (lambda s: norm(env.observe(s))) if norm is not None else None
    emp_obs, emp_targets, emp_actions = empirical
    if is_q:
        emp_pred = agent.q_values(emp_obs, emp_actions)
    else:
        emp_pred = agent.values(emp_obs)
    emp = empirical_target_distance(emp_pred, emp_targets)

    est = true_target_estimate(env, agent.policy, budget, gamma, rng, obs_fn=obs_fn,
                               soft_alpha=agent.alpha if is_q else 0.0)
    if is_q:
        pred = agent.q_values(est.obs, est.actions)
        raw = pred - float(np.mean(agent.offsets))
    else:
        pred = agent.values(est.obs)
        raw = pred - agent.offset
    bias2, var = bias_variance_decompose(pred, est.returns)
    grads = gradient_batches(agent, env, n_batches, batch_size, rng, obs_norm)
    report = DiagnosticsReport(
        step=step,
        empirical_distance=emp,
        true_distance=true_target_distance(pred, est, corrected=False),
        true_distance_raw=true_target_distance(raw, est, corrected=False),
        true_distance_corrected=true_target_distance(raw, est, corrected=True),
        bias2=bias2, variance=var,
        cosine=pairwise_cosine_similarity(grads),
        n_empirical=len(emp_targets), n_true=est.n_transitions,
        truncation_bound=est.truncation_bound,
    )
    report.check()
    return report
