"""Desk-scale environments and exact tabular oracles.

Continuous environments are deterministic value objects: ``step`` is a pure
function of ``(state, action, t)`` where ``t`` counts steps already taken in
the episode (it only matters for the horizon cap).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

__all__ = [
    "Step", "ContinuousEnv", "LQR", "CartpoleSwingup", "SparseMountainCar", "SparseAcrobot",
    "TabularMDP", "TabularEnv", "SoftmaxTabularPolicy", "chain_mdp", "two_state_mdp",
    "exact_values", "exact_q_values", "discounted_visitation", "expected_return",
    "exact_policy_gradient", "state_visitation", "make_env", "ENV_IDS",
]


class Step(NamedTuple):
    next_state: np.ndarray
    reward: float
    terminal: bool
    truncated: bool
    clipped: bool

    @property
    def done(self) -> bool:
        return self.terminal or self.truncated


class ContinuousEnv:
    """Base class for deterministic, box-bounded continuous-action tasks."""

    id = "base"
    state_dim: int
    obs_dim: int
    act_dim: int
    horizon: int = 200

    def __init__(self, horizon: int | None = None):
        if horizon is not None:
            self.horizon = int(horizon)
        self.act_low = -np.ones(self.act_dim)
        self.act_high = np.ones(self.act_dim)

    def reset(self, seed: int | None = None) -> np.ndarray:
        raise NotImplementedError

    def dynamics(self, state: np.ndarray, action: np.ndarray) -> tuple[np.ndarray, float, bool]:
        raise NotImplementedError

    def observe(self, state: np.ndarray) -> np.ndarray:
        return np.asarray(state, dtype=np.float64)

    def step(self, state, action, t: int = 0) -> Step:
        action = np.asarray(action, dtype=np.float64).reshape(self.act_dim)
        if not np.all(np.isfinite(action)):
            raise ValueError(f"{self.id}: non-finite action {action}")
        clipped_action = np.clip(action, self.act_low, self.act_high)
        clipped = bool(np.any(clipped_action != action))
        nxt, reward, terminal = self.dynamics(np.asarray(state, dtype=np.float64), clipped_action)
        truncated = (not terminal) and (t + 1 >= self.horizon)
        return Step(nxt, float(reward), bool(terminal), truncated, clipped)


class LQR(ContinuousEnv):
    """x' = A x + B u,  r = -(x'Qx + u'Ru), fixed start ``x0``; never terminates."""

    def __init__(self, A, B, Q=None, R=None, x0=None, act_bound: float = 2.0,
                 horizon: int = 100, id: str = "lqr"):
        self.A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        self.B = np.atleast_2d(np.asarray(B, dtype=np.float64))
        n, m = self.B.shape
        self.Q = np.eye(n) if Q is None else np.atleast_2d(np.asarray(Q, dtype=np.float64))
        self.R = np.eye(m) if R is None else np.atleast_2d(np.asarray(R, dtype=np.float64))
        self.x0 = np.ones(n) if x0 is None else np.asarray(x0, dtype=np.float64)
        self.state_dim = self.obs_dim = n
        self.act_dim = m
        self.id = id
        super().__init__(horizon)
        self.act_low = -act_bound * np.ones(m)
        self.act_high = act_bound * np.ones(m)

    def reset(self, seed=None):
        return self.x0.copy()

    def dynamics(self, x, u):
        r = -(x @ self.Q @ x + u @ self.R @ u)
        return self.A @ x + self.B @ u, r, False


class CartpoleSwingup(ContinuousEnv):
    """Dense-reward swing-up: the pole starts hanging down.

    State (x, x_dot, theta, theta_dot) with theta = 0 upright. Reward
    (1 + cos theta)/2 per step; the episode terminates if the cart leaves
    |x| <= 3.
    """

    id = "cartpole_swingup"
    state_dim = 4
    obs_dim = 5
    act_dim = 1
    horizon = 200
    gravity, m_cart, m_pole, length, force_mag, dt = 9.8, 1.0, 0.1, 0.5, 10.0, 0.05

    def reset(self, seed=None):
        rng = np.random.default_rng(seed)
        return np.array([0.0, 0.0, math.pi, 0.0]) + rng.uniform(-0.05, 0.05, size=4)

    def observe(self, state):
        x, xd, th, thd = state
        return np.array([x, xd, math.cos(th), math.sin(th), thd])

    def dynamics(self, s, a):
        x, xd, th, thd = s
        force = self.force_mag * a[0]
        total = self.m_cart + self.m_pole
        pml = self.m_pole * self.length
        ct, st = math.cos(th), math.sin(th)
        temp = (force + pml * thd * thd * st) / total
        thacc = (self.gravity * st - ct * temp) / (self.length * (4.0 / 3.0 - self.m_pole * ct * ct / total))
        xacc = temp - pml * thacc * ct / total
        xd = xd + self.dt * xacc
        x = x + self.dt * xd
        thd = thd + self.dt * thacc
        th = th + self.dt * thd
        reward = 0.5 * (1.0 + math.cos(th))
        return np.array([x, xd, th, thd]), reward, abs(x) > 3.0


class SparseMountainCar(ContinuousEnv):
    """Continuous-action mountain car paying 1 on reaching the flag and 0 otherwise.

    Start position is uniform on [-0.6, -0.4] from the reset seed, velocity 0.
    """

    id = "mountaincar_sparse"
    state_dim = obs_dim = 2
    act_dim = 1
    horizon = 500
    min_pos, max_pos, max_speed, goal_pos, power = -1.2, 0.6, 0.07, 0.45, 0.0015

    def reset(self, seed=None):
        rng = np.random.default_rng(seed)
        return np.array([rng.uniform(-0.6, -0.4), 0.0])

    def dynamics(self, s, a):
        pos, vel = s
        vel = vel + a[0] * self.power - 0.0025 * math.cos(3.0 * pos)
        vel = min(max(vel, -self.max_speed), self.max_speed)
        pos = pos + vel
        pos = min(max(pos, self.min_pos), self.max_pos)
        if pos == self.min_pos and vel < 0:
            vel = 0.0
        goal = pos >= self.goal_pos
        return np.array([pos, vel]), 1.0 if goal else 0.0, goal


class SparseAcrobot(ContinuousEnv):
    """Two-link swing-up with a continuous torque on the second joint.

    Reward 1 (and termination) once the tip rises one link-length above the
    pivot, 0 otherwise. Observation is (cos t1, sin t1, cos t2, sin t2, dt1, dt2).
    """

    id = "acrobot_sparse"
    state_dim = 4
    obs_dim = 6
    act_dim = 1
    horizon = 500
    dt = 0.2
    l1 = m1 = m2 = 1.0
    lc1 = lc2 = 0.5
    moi = 1.0
    max_vel1, max_vel2 = 4 * math.pi, 9 * math.pi

    def reset(self, seed=None):
        rng = np.random.default_rng(seed)
        return rng.uniform(-0.1, 0.1, size=4)

    def observe(self, s):
        t1, t2, d1, d2 = s
        return np.array([math.cos(t1), math.sin(t1), math.cos(t2), math.sin(t2), d1, d2])

    def _dsdt(self, s, torque):
        t1, t2, d1, d2 = s
        m1, m2, l1, lc1, lc2, i1, i2, g = self.m1, self.m2, self.l1, self.lc1, self.lc2, self.moi, self.moi, 9.8
        e1 = m1 * lc1 ** 2 + m2 * (l1 ** 2 + lc2 ** 2 + 2 * l1 * lc2 * math.cos(t2)) + i1 + i2
        e2 = m2 * (lc2 ** 2 + l1 * lc2 * math.cos(t2)) + i2
        phi2 = m2 * lc2 * g * math.cos(t1 + t2 - math.pi / 2.0)
        phi1 = (-m2 * l1 * lc2 * d2 ** 2 * math.sin(t2) - 2 * m2 * l1 * lc2 * d2 * d1 * math.sin(t2)
                + (m1 * lc1 + m2 * l1) * g * math.cos(t1 - math.pi / 2) + phi2)
        dd2 = (torque + e2 / e1 * phi1 - m2 * l1 * lc2 * d1 ** 2 * math.sin(t2) - phi2) / (
            m2 * lc2 ** 2 + i2 - e2 ** 2 / e1)
        dd1 = -(e2 * dd2 + phi1) / e1
        return np.array([d1, d2, dd1, dd2])

    def dynamics(self, s, a):
        torque = float(a[0])
        h = self.dt
        k1 = self._dsdt(s, torque)
        k2 = self._dsdt(s + 0.5 * h * k1, torque)
        k3 = self._dsdt(s + 0.5 * h * k2, torque)
        k4 = self._dsdt(s + h * k3, torque)
        ns = s + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        ns[0] = (ns[0] + math.pi) % (2 * math.pi) - math.pi
        ns[1] = (ns[1] + math.pi) % (2 * math.pi) - math.pi
        ns[2] = min(max(ns[2], -self.max_vel1), self.max_vel1)
        ns[3] = min(max(ns[3], -self.max_vel2), self.max_vel2)
        goal = -math.cos(ns[0]) - math.cos(ns[1] + ns[0]) > 1.0
        return ns, 1.0 if goal else 0.0, goal


# ---------------------------------------------------------------------------
# tabular MDPs


@dataclass
class TabularMDP:
    """Deterministic finite MDP: ``next_state[s, a]`` and ``reward[s, a]``."""

    next_state: np.ndarray
    reward: np.ndarray
    gamma: float
    start: np.ndarray | None = None
    name: str = "mdp"

    def __post_init__(self):
        self.next_state = np.asarray(self.next_state, dtype=np.int64)
        self.reward = np.asarray(self.reward, dtype=np.float64)
        if self.next_state.shape != self.reward.shape or self.next_state.ndim != 2:
            raise ValueError("next_state and reward tables must share shape (n_states, n_actions)")
        n = self.n_states
        if np.any(self.next_state < 0) or np.any(self.next_state >= n):
            raise ValueError("transition table points outside the state set")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.start is None:
            self.start = np.eye(n)[0]
        self.start = np.asarray(self.start, dtype=np.float64)

    @property
    def n_states(self) -> int:
        return self.next_state.shape[0]

    @property
    def n_actions(self) -> int:
        return self.next_state.shape[1]

    def reset(self, seed=None) -> int:
        if self.start[0] == 1.0:
            return 0
        return int(np.random.default_rng(seed).choice(self.n_states, p=self.start))

    def step(self, state: int, action: int) -> tuple[int, float, bool]:
        return int(self.next_state[state, action]), float(self.reward[state, action]), False

    def transition_matrix(self, probs: np.ndarray) -> np.ndarray:
        P = np.zeros((self.n_states, self.n_states))
        for a in range(self.n_actions):
            np.add.at(P, (np.arange(self.n_states), self.next_state[:, a]), probs[:, a])
        return P


def chain_mdp(n: int = 3, gamma: float = 0.5) -> TabularMDP:
    """Chain of ``n`` states; action 0 moves left, action 1 moves right.

    Moving right from the last state pays 1 and stays there; everything else pays 0.
    """
    idx = np.arange(n)
    nxt = np.stack([np.maximum(idx - 1, 0), np.minimum(idx + 1, n - 1)], axis=1)
    rew = np.zeros((n, 2))
    rew[n - 1, 1] = 1.0
    return TabularMDP(nxt, rew, gamma, name=f"chain{n}")


def two_state_mdp(gamma: float = 0.9) -> TabularMDP:
    """Two states, two actions: stay (0) or switch (1), with asymmetric rewards."""
    nxt = np.array([[0, 1], [1, 0]])
    rew = np.array([[0.0, 1.0], [2.0, -1.0]])
    return TabularMDP(nxt, rew, gamma, name="two_state")


@dataclass
class SoftmaxTabularPolicy:
    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "SoftmaxTabularPolicy":
        return cls(np.zeros((n_states, n_actions)))

    def probs(self) -> np.ndarray:
        z = self.logits - self.logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def grad_log_prob(self, state, action) -> np.ndarray:
        """d log pi(a|s) / d logits[s, :] for arrays of states and actions; shape (n, n_actions)."""
        p = self.probs()[state]
        onehot = np.eye(self.logits.shape[1])[action]
        return onehot - p


def _as_probs(policy) -> np.ndarray:
    if isinstance(policy, SoftmaxTabularPolicy):
        return policy.probs()
    probs = np.asarray(policy, dtype=np.float64)
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-12):
        raise ValueError("policy rows must sum to 1")
    return probs


def exact_values(mdp: TabularMDP, policy) -> np.ndarray:
    """Solve (I - gamma P_pi) V = r_pi."""
    probs = _as_probs(policy)
    P = mdp.transition_matrix(probs)
    r = (probs * mdp.reward).sum(axis=1)
    A = np.eye(mdp.n_states) - mdp.gamma * P
    V = np.linalg.solve(A, r)
    assert np.max(np.abs(A @ V - r)) <= 1e-10 * max(1.0, np.max(np.abs(r)))
    return V


def exact_q_values(mdp: TabularMDP, policy) -> np.ndarray:
    V = exact_values(mdp, policy)
    return mdp.reward + mdp.gamma * V[mdp.next_state]


def discounted_visitation(mdp: TabularMDP, policy) -> np.ndarray:
    """Unnormalised discounted state occupancy sum_t gamma^t P(s_t = s)."""
    P = mdp.transition_matrix(_as_probs(policy))
    return np.linalg.solve((np.eye(mdp.n_states) - mdp.gamma * P).T, mdp.start)


def expected_return(mdp: TabularMDP, policy) -> float:
    return float(mdp.start @ exact_values(mdp, policy))


def exact_policy_gradient(mdp: TabularMDP, policy: SoftmaxTabularPolicy) -> np.ndarray:
    """Gradient of the discounted return w.r.t. softmax logits.

    For softmax logits dpi(a|s)/dtheta[s,b] = pi(a|s)(1[a=b] - pi(b|s)), so
    dJ/dtheta[s,b] = d(s) pi(b|s) (Q(s,b) - V(s)).
    """
    if mdp.n_states * mdp.n_actions > 100:
        raise ValueError("exact_policy_gradient is meant for small MDPs")
    probs = policy.probs()
    V = exact_values(mdp, probs)
    Q = mdp.reward + mdp.gamma * V[mdp.next_state]
    d = discounted_visitation(mdp, probs)
    return d[:, None] * probs * (Q - V[:, None])


class TabularEnv(ContinuousEnv):
    """A tabular MDP behind the continuous-action interface.

    Observations are one-hot state vectors; a scalar action ``a`` picks the
    discrete action ``digitize(a, thresholds)``. With two actions the
    threshold is 0, so a Gaussian policy N(mu, sigma) picks action 1 with
    probability Phi(mu / sigma).
    """

    act_dim = 1

    def __init__(self, mdp: TabularMDP, horizon: int = 100):
        self.mdp = mdp
        self.id = mdp.name
        self.state_dim = 1
        self.obs_dim = mdp.n_states
        super().__init__(horizon)
        k = mdp.n_actions
        self.thresholds = np.linspace(-1.0, 1.0, k + 1)[1:-1] if k > 2 else np.array([0.0])
        self.act_low = np.array([-np.inf])
        self.act_high = np.array([np.inf])

    def reset(self, seed=None):
        return np.array([float(self.mdp.reset(seed))])

    def observe(self, state):
        return np.eye(self.mdp.n_states)[int(state[0])]

    def discrete_action(self, a: float) -> int:
        return int(np.searchsorted(self.thresholds, a, side="right"))

    def dynamics(self, s, a):
        ns, r, _ = self.mdp.step(int(s[0]), self.discrete_action(float(a[0])))
        return np.array([float(ns)]), r, False

    def induced_policy(self, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
        """Action probabilities per state for Gaussian actions with the given per-state mean/std."""
        from scipy.stats import norm

        edges = np.concatenate([[-np.inf], self.thresholds, [np.inf]])
        cdf = norm.cdf((edges[None, :] - mean[:, None]) / std[:, None])
        return np.diff(cdf, axis=1)


ENV_IDS = ("chain3", "chain5", "lqr1", "lqr2", "cartpole_swingup", "mountaincar_sparse", "acrobot_sparse")


def make_env(env_id: str, horizon: int | None = None) -> ContinuousEnv:
    if env_id == "chain3":
        return TabularEnv(chain_mdp(3, 0.5), horizon or 100)
    if env_id == "chain5":
        return TabularEnv(chain_mdp(5, 0.9), horizon or 100)
    if env_id == "lqr1":
        return LQR(A=[[1.0]], B=[[1.0]], x0=[1.0], horizon=horizon or 100, id="lqr1")
    if env_id == "lqr2":
        return LQR(A=[[1.0, 0.1], [0.0, 1.0]], B=[[0.0], [0.1]], x0=[1.0, 0.0],
                   horizon=horizon or 100, id="lqr2")
    if env_id == "cartpole_swingup":
        return CartpoleSwingup(horizon)
    if env_id == "mountaincar_sparse":
        return SparseMountainCar(horizon)
    if env_id == "acrobot_sparse":
        return SparseAcrobot(horizon)
    raise KeyError(f"unknown env {env_id!r}; choose from {', '.join(ENV_IDS)}")


def state_visitation(trajectories: Sequence[np.ndarray], bins, ranges=None) -> tuple[np.ndarray, list[np.ndarray]]:
    """Normalised histogram of visited states.

    ``trajectories`` is a list of (T_i, d) state arrays, ``bins`` an int or one
    int per dimension, ``ranges`` optional (low, high) per dimension (defaults
    to the data range). Returns (histogram, edges).
    """
    if len(trajectories) == 0 or sum(len(t) for t in trajectories) == 0:
        raise ValueError("state_visitation needs at least one non-empty trajectory")
    states = np.concatenate([np.asarray(t, dtype=np.float64).reshape(len(t), -1) for t in trajectories])
    d = states.shape[1]
    bins = [int(bins)] * d if np.isscalar(bins) else [int(b) for b in bins]
    if len(bins) != d or min(bins) < 1:
        raise ValueError(f"need bins >= 1 for each of {d} dimensions")
    if ranges is None:
        lo, hi = states.min(axis=0), states.max(axis=0)
        hi = np.where(hi > lo, hi, lo + 1.0)
        ranges = list(zip(lo, hi))
    lo = np.array([r[0] for r in ranges])
    hi = np.array([r[1] for r in ranges])
    states = np.clip(states, lo, hi)
    hist, edges = np.histogramdd(states, bins=bins, range=ranges)
    return hist / hist.sum(), edges
