"""Soft actor-critic with a state-value network and Polyak-averaged target.

Per gradient step: value net on the squared residual to
min_i Q_i(s, a~pi) - alpha log pi(a|s); both Q nets on the configured critic
loss against r + gamma (1 - done) V_target(s'); the policy on the
reparameterised objective; then target <- tau * V + (1 - tau) * target.
Residual-variance Q critics are read through their per-batch corrected
estimate g_i = f_i + mean(Q_hat - f_i) wherever Q values are consumed.
"""
from __future__ import annotations

import math

import numpy as np

from avec.autodiff import MLP, Adam, NonFiniteError, Tensor, clip_grad_norm, concat, grad, minimum
from avec.buffers import ReplayBuffer
from avec.config import SACConfig
from avec.critic import CriticLossSpec, bias_correct, correction_offset, critic_loss, sac_td_targets
from avec.policies import TanhGaussianPolicy
from avec.ppo import UpdateAborted


def polyak(target: list[Tensor], source: list[Tensor], tau: float) -> None:
    for t, s in zip(target, source):
        t.data = tau * s.data + (1.0 - tau) * t.data


class SacNets:
    def __init__(self, obs_dim: int, act_dim: int, cfg: SACConfig, rng: np.random.Generator, act_scale=1.0):
        hidden = (cfg.hidden,) * cfg.layers
        self.policy = TanhGaussianPolicy(obs_dim, act_dim, hidden, cfg.activation, rng, act_scale)
        self.q1 = MLP([obs_dim + act_dim, *hidden, 1], cfg.activation, rng, out_gain=0.01, name="q1")
        self.q2 = MLP([obs_dim + act_dim, *hidden, 1], cfg.activation, rng, out_gain=0.01, name="q2")
        self.v = MLP([obs_dim, *hidden, 1], cfg.activation, rng, out_gain=0.01, name="v")
        self.v_target = MLP([obs_dim, *hidden, 1], cfg.activation, rng, out_gain=0.01, name="v_target")
        polyak(self.v_target.parameters(), self.v.parameters(), 1.0)
        self.log_alpha = Tensor(np.array([math.log(cfg.alpha)]), requires_grad=True, name="log_alpha")

    def networks(self) -> dict:
        return {"policy": self.policy.parameters(), "q1": self.q1.parameters(), "q2": self.q2.parameters(),
                "v": self.v.parameters(), "v_target": self.v_target.parameters(), "log_alpha": [self.log_alpha]}

    def parameters(self) -> list[Tensor]:
        return [p for ps in self.networks().values() for p in ps]


def q_value(net: MLP, obs, actions) -> Tensor:
    return net(concat([obs, actions], axis=1)).reshape(-1)


class SACAgent:
    def __init__(self, obs_dim: int, act_dim: int, cfg: SACConfig, loss_spec: CriticLossSpec,
                 rng: np.random.Generator, act_scale=1.0, baseline: bool = False):
        self.cfg = cfg
        self.loss_spec = loss_spec
        self.baseline = baseline
        self.nets = SacNets(obs_dim, act_dim, cfg, rng, act_scale)
        n = self.nets
        self.policy = n.policy
        self.v_opt = Adam(n.v.parameters(), lr=cfg.lr)
        self.q_opts = [Adam(n.q1.parameters(), lr=cfg.lr), Adam(n.q2.parameters(), lr=cfg.lr)]
        self.pi_opt = Adam(n.policy.parameters(), lr=cfg.lr)
        self.alpha_opt = Adam([n.log_alpha], lr=cfg.lr)
        self.target_entropy = -float(act_dim)
        self.n_updates = 0
        # per-critic correction constants from the latest batch
        self.offsets = [0.0, 0.0]

    @property
    def corrects(self) -> bool:
        return not self.baseline and self.loss_spec.corrects_bias

    @property
    def alpha(self) -> float:
        return float(np.exp(self.nets.log_alpha.data[0]))

    def networks(self) -> dict:
        return self.nets.networks()

    def parameters(self) -> list[Tensor]:
        return self.nets.parameters()

    def q_values(self, obs, actions) -> np.ndarray:
        """min_i of the Q estimates the algorithm uses (corrected when the critic is residual-variance)."""
        x = np.concatenate([obs, actions], axis=1)
        q1 = self.nets.q1.predict(x).reshape(-1) + self.offsets[0]
        q2 = self.nets.q2.predict(x).reshape(-1) + self.offsets[1]
        return np.minimum(q1, q2)

    def _clip(self, grads):
        return clip_grad_norm(grads, self.cfg.max_grad_norm)[0] if self.cfg.max_grad_norm else grads

    def update(self, replay: ReplayBuffer, rng: np.random.Generator) -> dict:
        cfg, n = self.cfg, self.nets
        b = replay.sample(cfg.batch_size, rng)
        obs, act = b["obs"], b["actions"]
        try:
            q_hat = sac_td_targets(b["rewards"], b["terminals"], n.v_target.predict(b["next_obs"]).reshape(-1),
                                   cfg.gamma)
            alpha = self.alpha
            corr_err = 0.0

            # corrections from the current critics on this batch
            x = np.concatenate([obs, act], axis=1)
            if self.corrects:
                self.offsets = [correction_offset(q.predict(x).reshape(-1), q_hat) for q in (n.q1, n.q2)]

            # value network
            eps = rng.standard_normal((len(obs), self.policy.act_dim))
            a_new, logp = self.policy.rsample(obs, eps)
            q_new = minimum(q_value(n.q1, obs, a_new) + self.offsets[0], q_value(n.q2, obs, a_new) + self.offsets[1])
            v_target = q_new.data - alpha * logp.data
            v_pred = n.v(obs).reshape(-1)
            v_loss = ((v_pred - v_target) ** 2).mean()
            self.v_opt.step(self._clip(grad(v_loss, self.v_opt.params)))

            # Q networks
            q_losses = []
            for i, (q, opt) in enumerate(zip((n.q1, n.q2), self.q_opts)):
                pred = q_value(q, obs, act)
                if self.baseline:
                    loss = ((pred - q_hat) ** 2).mean()
                else:
                    loss = critic_loss(self.loss_spec, pred, q_hat)
                q_losses.append(loss.item())
                opt.step(self._clip(grad(loss, opt.params)))
                if self.corrects:
                    post = q.predict(x).reshape(-1)
                    self.offsets[i] = correction_offset(post, q_hat)
                    g = bias_correct(post, q_hat)
                    corr_err = max(corr_err, abs(float(np.mean(g)) - float(np.mean(q_hat))))

            # policy
            a_new, logp = self.policy.rsample(obs, eps)
            q_pi = minimum(q_value(n.q1, obs, a_new) + self.offsets[0], q_value(n.q2, obs, a_new) + self.offsets[1])
            pi_loss = (logp * alpha - q_pi).mean()
            self.pi_opt.step(self._clip(grad(pi_loss, self.pi_opt.params)))

            if cfg.learn_alpha:
                alpha_loss = (n.log_alpha * -(float(np.mean(logp.data)) + self.target_entropy)).mean()
                self.alpha_opt.step(grad(alpha_loss, [n.log_alpha]))
        except NonFiniteError as e:
            raise UpdateAborted(f"SAC update aborted: {e}", {
                "obs": obs.tolist(), "actions": act.tolist(), "offsets": list(self.offsets)}) from e

        self.n_updates += 1
        if self.n_updates % cfg.target_update_interval == 0:
            polyak(n.v_target.parameters(), n.v.parameters(), cfg.tau)
        return {
            "critic_loss": float(np.mean(q_losses)),
            "value_loss": v_loss.item(),
            "actor_loss": pi_loss.item(),
            "entropy": -float(np.mean(logp.data)),
            "alpha": self.alpha,
            "value_offset": float(np.mean(self.offsets)),
            "corr_err": corr_err,
        }

    def policy_gradient(self, obs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Flattened gradient of the policy objective on a batch of states."""
        eps = rng.standard_normal((len(obs), self.policy.act_dim))
        n = self.nets
        a_new, logp = self.policy.rsample(obs, eps)
        q_pi = minimum(q_value(n.q1, obs, a_new) + self.offsets[0], q_value(n.q2, obs, a_new) + self.offsets[1])
        loss = (logp * self.alpha - q_pi).mean()
        return np.concatenate([g.ravel() for g in grad(loss, self.policy.parameters())])
