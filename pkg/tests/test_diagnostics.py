import hashlib

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from avec.config import PPOConfig, SACConfig
from avec.critic import CriticLossSpec
from avec.diagnostics import (DiagnosticsReport, bias_variance_decompose, diagnose, empirical_target_distance,
                              gradient_batches, pairwise_cosine_similarity, percent_variation,
                              true_target_distance, true_target_estimate)
from avec.envs import LQR, make_env, exact_values
from avec.policies import GaussianPolicy
from avec.ppo import PPOAgent
from avec.sac import SACAgent

finite = st.floats(-100, 100, allow_nan=False)
vectors = st.integers(2, 40).flatmap(lambda n: st.tuples(arrays(np.float64, n, elements=finite),
                                                         arrays(np.float64, n, elements=finite)))


def _digest(params):
    h = hashlib.sha256()
    for p in params:
        h.update(p.data.tobytes())
    return h.hexdigest()


# -- empirical distance ------------------------------------------------------------

def test_empirical_distance_examples(rng):
    assert empirical_target_distance([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert empirical_target_distance(np.arange(5) + 0.75, np.arange(5)) == pytest.approx(0.75, abs=1e-15)
    p, t = rng.normal(size=50), rng.normal(size=50)
    two_pass = np.sqrt(sum((a - b) ** 2 for a, b in zip(p, t)) / 50)
    assert abs(empirical_target_distance(p, t) - two_pass) <= 1e-12
    with pytest.raises(ValueError):
        empirical_target_distance([], [])


# -- true targets ------------------------------------------------------------------

class _ZeroStd(GaussianPolicy):
    def act(self, obs, rng):
        mean, _ = self.mean_std(obs)
        return mean, mean, np.zeros(len(obs))


def _chain_policy(seed=0):
    env = make_env("chain3")
    pi = GaussianPolicy(3, 1, (4,), rng=np.random.default_rng(seed))
    mean, std = pi.mean_std(np.eye(3))
    return env, pi, exact_values(env.mdp, env.induced_policy(mean[:, 0], std[:, 0]))


def test_true_target_gamma_zero_is_immediate_reward():
    env = make_env("lqr2", horizon=20)
    pi = GaussianPolicy(2, 1, (4,), rng=np.random.default_rng(0))
    est = true_target_estimate(env, pi, 50, 0.0, np.random.default_rng(1))
    r = [env.step(s, a).reward for s, a in zip(est.states, est.actions)]
    np.testing.assert_allclose(est.returns, r, rtol=1e-15)


def test_true_target_zero_reward_env():
    env = LQR([[1.0]], [[1.0]], [[0.0]], [[0.0]], x0=[1.0], horizon=10)
    pi = GaussianPolicy(1, 1, (4,), rng=np.random.default_rng(0))
    est = true_target_estimate(env, pi, 30, 0.9, np.random.default_rng(0))
    assert not est.returns.any() and est.n_transitions >= 30


def test_true_target_chain_matches_exact_values():
    env, pi, V = _chain_policy()
    est = true_target_estimate(env, pi, 10_000, env.mdp.gamma, np.random.default_rng(0))
    assert est.n_transitions >= 10_000
    assert np.max(np.abs(est.per_state_mean(3) - V)) <= 0.05
    assert est.truncation_bound < 1e-6


def test_true_target_converges_with_budget():
    env, pi, V = _chain_policy()
    small, large = [], []
    for seed in range(10):
        for budget, out in ((1000, small), (2000, large)):
            est = true_target_estimate(env, pi, budget, env.mdp.gamma, np.random.default_rng([seed, budget]))
            out.append(np.sqrt(np.mean((est.per_state_mean(3) - V) ** 2)))
    assert np.median(large) <= np.median(small)


def test_true_target_budget_validation():
    env, pi, _ = _chain_policy()
    with pytest.raises(ValueError):
        true_target_estimate(env, pi, 0, 0.5, np.random.default_rng(0))


# -- distances and decomposition ---------------------------------------------------

def test_true_distance_examples():
    t = np.array([1.0, -2.0, 0.5])
    assert true_target_distance(t, t, corrected=False) == 0.0
    assert true_target_distance(t + 3.0, t, corrected=False) == pytest.approx(3.0, abs=1e-15)
    assert true_target_distance(t + 3.0, t, corrected=True) <= 1e-15
    with pytest.raises(ValueError):
        true_target_distance(t[:2], t, corrected=False)


@given(vectors, st.floats(-50, 50))
def test_corrected_distance_never_worse_on_pure_offset(pt, c):
    _, t = pt
    raw = true_target_distance(t + c, t, corrected=False)
    assert true_target_distance(t + c, t, corrected=True) <= raw + 1e-10


def test_q_distance_with_collapsed_actions_matches_v():
    # when Q ignores the action it is the state-value pipeline
    env, pi, _ = _chain_policy()
    est = true_target_estimate(env, pi, 200, env.mdp.gamma, np.random.default_rng(0))
    v = est.obs @ np.array([0.1, 0.3, 0.7])
    q = (np.concatenate([est.obs, est.actions], axis=1) @ np.array([0.1, 0.3, 0.7, 0.0]))
    assert true_target_distance(q, est, False) == true_target_distance(v, est, False)


def test_bias_variance_examples():
    assert bias_variance_decompose([3.0, 3.0], [1.0, 1.0]) == (4.0, 0.0)
    assert bias_variance_decompose([-1.0, 1.0], [0.0, 0.0]) == (0.0, 1.0)
    with pytest.raises(ValueError):
        bias_variance_decompose([1.0], [0.0])


@given(vectors)
def test_bias_variance_sum_to_mse(pt):
    p, t = pt
    b2, v = bias_variance_decompose(p, t)
    mse = np.mean((p - t) ** 2)
    assert abs(b2 + v - mse) <= 1e-12 * max(1.0, mse)


def test_percent_variation_examples():
    assert percent_variation(1.0, 1.0) == 0.0
    assert percent_variation(0.5, 1.0) == -50.0
    assert percent_variation(2.0, 1.0) == 100.0
    with pytest.raises(ZeroDivisionError):
        percent_variation(1.0, 0.0)


# -- cosine ------------------------------------------------------------------------

def test_cosine_examples():
    assert pairwise_cosine_similarity([np.array([1.0, 2.0])] * 3) == pytest.approx(1.0, abs=1e-15)
    assert pairwise_cosine_similarity(list(np.eye(4))) == 0.0
    assert pairwise_cosine_similarity([[1.0, 0.0], [1.0, 1.0]]) == pytest.approx(1 / np.sqrt(2), abs=1e-15)


def test_cosine_errors():
    with pytest.raises(ValueError):
        pairwise_cosine_similarity([[1.0, 0.0]])
    with pytest.raises(ValueError):
        pairwise_cosine_similarity([[1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(ValueError):
        pairwise_cosine_similarity([[1.0, 0.0], [1.0]])


@given(st.integers(0, 2 ** 31), st.lists(st.floats(1e-3, 1e3), min_size=3, max_size=3))
def test_cosine_scale_invariant_and_bounded(seed, scales):
    gs = list(np.random.default_rng(seed).normal(size=(3, 6)))
    c = pairwise_cosine_similarity(gs)
    assert -1.0 <= c <= 1.0
    assert abs(pairwise_cosine_similarity([s * g for s, g in zip(scales, gs)]) - c) <= 1e-12


# -- gradient batches --------------------------------------------------------------

def _ppo(seed=0):
    cfg = PPOConfig(horizon=16, hidden=8)
    return PPOAgent(1, 1, cfg, CriticLossSpec("avec"), np.random.default_rng(seed))


def test_deterministic_gradient_batches_identical():
    agent = _ppo()
    agent.policy.__class__ = _ZeroStd
    gs = gradient_batches(agent, make_env("lqr1"), 3, 16, np.random.default_rng(0))
    assert all(g.tobytes() == gs[0].tobytes() for g in gs)
    assert pairwise_cosine_similarity(gs) == pytest.approx(1.0, abs=1e-12)


def test_two_batches_one_pair():
    agent = _ppo()
    gs = gradient_batches(agent, make_env("lqr1"), 2, 16, np.random.default_rng(0))
    assert len(gs) == 2
    c = gs[0] @ gs[1] / np.linalg.norm(gs[0]) / np.linalg.norm(gs[1])
    assert pairwise_cosine_similarity(gs) == pytest.approx(c, abs=1e-15)
    with pytest.raises(ValueError):
        gradient_batches(agent, make_env("lqr1"), 1, 16, np.random.default_rng(0))


# -- full protocol -----------------------------------------------------------------

def test_diagnose_ppo_read_only_and_consistent():
    agent, env = _ppo(), make_env("lqr1", horizon=20)
    agent.offset = 0.3
    obs = np.random.default_rng(0).normal(size=(16, 1))
    before = _digest(agent.parameters())
    rep = diagnose(agent, env, 7, (obs, np.zeros(16), None), 0.99, 100, 3, 16, np.random.default_rng(1))
    assert _digest(agent.parameters()) == before and agent.offset == 0.3
    assert isinstance(rep, DiagnosticsReport) and rep.step == 7 and rep.n_empirical == 16
    assert rep.n_true >= 100
    assert abs(rep.bias2 + rep.variance - rep.true_distance ** 2) <= 1e-8 * max(1.0, rep.true_distance ** 2)
    assert rep.true_distance_corrected <= rep.true_distance_raw + 1e-10
    assert rep.empirical_distance == pytest.approx(np.sqrt(np.mean(agent.values(obs) ** 2)), rel=1e-12)


def test_diagnose_sac_read_only():
    cfg = SACConfig(hidden=8, batch_size=8)
    agent = SACAgent(1, 1, cfg, CriticLossSpec("avec"), np.random.default_rng(0))
    agent.offsets = [0.2, -0.1]
    rng = np.random.default_rng(0)
    emp = (rng.normal(size=(8, 1)), rng.normal(size=8), rng.uniform(-1, 1, (8, 1)))
    before = _digest(agent.parameters())
    rep = diagnose(agent, make_env("lqr1", horizon=10), 0, emp, 0.9, 30, 2, 8, np.random.default_rng(1))
    assert _digest(agent.parameters()) == before
    rep.check()


def test_report_check_catches_violations():
    rep = DiagnosticsReport(0, 0.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.2, 1, 1, 0.0)
    rep.check()
    with pytest.raises(AssertionError):
        DiagnosticsReport(0, 0.0, 1.0, 1.0, 1.0, 0.5, 0.6, 0.2, 1, 1, 0.0).check()
    with pytest.raises(AssertionError):
        DiagnosticsReport(0, 0.0, 1.0, 1.0, 1.0, 0.5, 0.5, 1.5, 1, 1, 0.0).check()
    assert rep.to_dict()["cosine"] == 0.2
