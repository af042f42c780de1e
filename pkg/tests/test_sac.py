import numpy as np
import pytest

from avec.autodiff import MLP, grad
from avec.buffers import ReplayBuffer
from avec.config import SACConfig
from avec.critic import CriticLossSpec
from avec.ppo import UpdateAborted
from avec.sac import SACAgent, polyak, q_value
from conftest import fd_grad, rel_err


def _agent(loss="mse", baseline=False, **cfg):
    base = dict(batch_size=8, hidden=8, lr=0.01, learning_starts=0)
    base.update(cfg)
    return SACAgent(2, 1, SACConfig(**base), CriticLossSpec(loss), np.random.default_rng(0), baseline=baseline)


def _replay(n=20):
    rng = np.random.default_rng(1)
    rb = ReplayBuffer(2, 1, 100, 1)
    for _ in range(n):
        rb.add(rng.normal(size=2), rng.uniform(-1, 1, 1), rng.normal(), rng.normal(size=2), rng.random() < 0.2)
    return rb


def test_mse_golden_trace():
    agent, rb = _agent(), _replay()
    for i in range(2):
        m = agent.update(rb, np.random.default_rng(10 + i))
    frozen = {"critic_loss": 0.7770269020511616, "value_loss": 0.01824984059744707,
              "actor_loss": -0.16508641042590474, "entropy": 0.6869649689847042, "alpha": 0.2,
              "value_offset": 0.0, "corr_err": 0.0}
    for k, v in frozen.items():
        assert m[k] == pytest.approx(v, rel=1e-12, abs=1e-15), k
    sums = {
        "q1": [-1.0220218046816851, 0.0625574952087271, 0.08777666864110323, 0.03215200978241245,
               0.06811203154154036, 0.019526827473912378],
        "v_target": [-1.6441125668315701, 0.0006877790423124192, -4.163782103838307, 0.00063775217909041,
                     0.0038270718664445763, 0.0002981300910503962],
    }
    nets = agent.networks()
    for name, ref in sums.items():
        np.testing.assert_allclose([p.data.sum() for p in nets[name]], ref, rtol=1e-12, atol=1e-15)


def test_q_loss_uses_target_value_network():
    agent, rb = _agent(), _replay()
    for p in agent.nets.v_target.parameters():
        p.data += 0.5
    b = rb.sample(8, np.random.default_rng(10))
    v_next = agent.nets.v_target.predict(b["next_obs"]).ravel()
    expected = b["rewards"] + 0.99 * (1 - b["terminals"]) * v_next
    x = np.concatenate([b["obs"], b["actions"]], axis=1)
    ref = np.mean([np.mean((q.predict(x).ravel() - expected) ** 2) for q in (agent.nets.q1, agent.nets.q2)])
    m = agent.update(rb, np.random.default_rng(10))
    assert m["critic_loss"] == pytest.approx(ref, rel=1e-12)


def test_tau_one_copies_value_net():
    agent, rb = _agent(tau=1.0), _replay()
    agent.update(rb, np.random.default_rng(0))
    for t, s in zip(agent.nets.v_target.parameters(), agent.nets.v.parameters()):
        assert t.data.tobytes() == s.data.tobytes()


def test_polyak_geometric_decay():
    rng = np.random.default_rng(0)
    src, tgt = MLP([3, 5, 1], rng=rng), MLP([3, 5, 1], rng=rng)
    e0 = [t.data - s.data for t, s in zip(tgt.parameters(), src.parameters())]
    tau = 0.05
    for k in range(1, 31):
        polyak(tgt.parameters(), src.parameters(), tau)
        for t, s, e in zip(tgt.parameters(), src.parameters(), e0):
            np.testing.assert_allclose(t.data - s.data, (1 - tau) ** k * e, atol=1e-12, rtol=0)


def test_avec_corrected_q_mean_matches_targets():
    agent, rb = _agent("avec"), _replay()
    for i in range(3):
        m = agent.update(rb, np.random.default_rng(i))
        assert m["corr_err"] <= 1e-10
    assert agent.offsets != [0.0, 0.0]


def test_non_correcting_loss_has_no_offsets():
    agent, rb = _agent(), _replay()
    agent.loss_spec = CriticLossSpec("alpha", 0.5)
    agent.update(rb, np.random.default_rng(0))
    assert agent.offsets == [0.0, 0.0]


def test_policy_loss_gradient_matches_finite_differences():
    agent = _agent()
    rng = np.random.default_rng(5)
    for p in agent.parameters():
        p.data += rng.normal(scale=0.3, size=p.shape)
    obs, eps = rng.normal(size=(5, 2)), rng.normal(size=(5, 1))
    n = agent.nets

    def loss():
        a, logp = agent.policy.rsample(obs, eps)
        return (logp * 0.2 - q_value(n.q1, obs, a)).mean()

    ps = agent.policy.parameters()
    assert rel_err(grad(loss(), ps), fd_grad(loss, ps)) <= 1e-5


def test_fixed_temperature_by_default():
    agent, rb = _agent(), _replay()
    agent.update(rb, np.random.default_rng(0))
    assert agent.alpha == pytest.approx(0.2, abs=1e-15)
    learned = _agent(learn_alpha=True)
    learned.update(rb, np.random.default_rng(0))
    assert learned.alpha != pytest.approx(0.2, abs=1e-6)


def test_mse_pipeline_matches_baseline_path():
    out = []
    for baseline in (False, True):
        agent, rb = _agent("mse", baseline=baseline), _replay()
        ms = [agent.update(rb, np.random.default_rng(i)) for i in range(3)]
        out.append((ms, [p.data.tobytes() for p in agent.parameters()]))
    assert out[0] == out[1]


def test_non_finite_update_aborts_with_dump():
    agent, rb = _agent(), _replay()
    rb.obs[:] = np.inf
    with pytest.raises(UpdateAborted) as exc:
        agent.update(rb, np.random.default_rng(0))
    assert "obs" in exc.value.dump
