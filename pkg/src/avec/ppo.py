"""PPO with a pluggable critic objective.

With ``loss_spec = mse`` this is plain clipped-surrogate PPO; any other
spec only changes the critic's loss and, for residual-variance critics, the
per-batch mean correction of the values handed to target construction.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from avec.autodiff import MLP, Adam, NonFiniteError, Tensor, clip_grad_norm, grad, minimum
from avec.buffers import RolloutBuffer
from avec.config import AvecConfig, PPOConfig
from avec.critic import CriticLossSpec, GaeConfig, bias_correct, correction_offset, critic_loss, gae_targets
from avec.policies import GaussianPolicy


class UpdateAborted(FloatingPointError):
    """A non-finite loss stopped the update; ``dump`` holds the offending state."""

    def __init__(self, msg: str, dump: dict):
        super().__init__(msg)
        self.dump = dump


def clipped_surrogate_loss(policy: GaussianPolicy, obs, actions, old_log_probs, advantages, clip: float):
    """Negative PPO objective; returns (loss, ratio as numpy)."""
    logp = policy.log_prob(obs, actions)
    ratio = (logp - old_log_probs).exp()
    surr = minimum(ratio * advantages, ratio.clip(1.0 - clip, 1.0 + clip) * advantages)
    return -surr.mean(), ratio.data, logp.data


def normalize(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


@dataclass
class PPOTargets:
    advantages: np.ndarray
    targets: np.ndarray


class PPOAgent:
    def __init__(self, obs_dim: int, act_dim: int, cfg: PPOConfig, loss_spec: CriticLossSpec,
                 rng: np.random.Generator, avec: AvecConfig | None = None, baseline: bool = False):
        self.cfg = cfg
        self.loss_spec = loss_spec
        self.avec = avec or AvecConfig()
        self.baseline = baseline
        hidden = (cfg.hidden,) * cfg.layers
        self.policy = GaussianPolicy(obs_dim, act_dim, hidden, cfg.activation, rng, cfg.init_log_std)
        self.value_fn = MLP([obs_dim, *hidden, 1], cfg.activation, rng, out_gain=0.01, name="vf")
        self.pi_opt = Adam(self.policy.parameters(), lr=cfg.lr if cfg.actor_lr is None else cfg.actor_lr)
        self.vf_opt = Adam(self.value_fn.parameters(), lr=cfg.lr if cfg.critic_lr is None else cfg.critic_lr)
        # constant making g = f + offset the value estimate handed to the next update
        self.offset = 0.0

    @property
    def corrects(self) -> bool:
        return not self.baseline and self.loss_spec.corrects_bias

    def networks(self) -> dict:
        return {"policy": self.policy.parameters(), "value": self.value_fn.parameters()}

    def parameters(self) -> list[Tensor]:
        return self.policy.parameters() + self.value_fn.parameters()

    def values(self, obs: np.ndarray) -> np.ndarray:
        """The value estimator the algorithm uses: raw f for MSE, f + offset when corrected."""
        return self.value_fn.predict(obs).reshape(-1) + self.offset

    def targets(self, buf: RolloutBuffer) -> PPOTargets:
        gae = GaeConfig(self.cfg.gamma, self.cfg.lam)

        def run(shift):
            return gae_targets(buf.rewards, buf.terminals, buf.values_with_bootstrap + shift, gae,
                               next_values=buf.next_values + shift, episode_ends=buf.episode_ends)

        raw_adv, raw_targets = run(0.0)
        if not self.corrects or self.offset == 0.0:
            return PPOTargets(raw_adv, raw_targets)
        # critic targets are lambda-returns bootstrapped from g = f + offset
        adv, targets = run(self.offset)
        return PPOTargets(adv if self.avec.correct_advantages else raw_adv, targets)

    def update(self, buf: RolloutBuffer, rng: np.random.Generator) -> dict:
        cfg = self.cfg
        tg = self.targets(buf)
        adv = normalize(tg.advantages) if cfg.normalize_advantages else tg.advantages
        T = len(buf)
        pi_losses, vf_losses, clip_fracs, kls = [], [], [], []
        corr_err = 0.0
        for _ in range(cfg.epochs):
            perm = rng.permutation(T)
            for mb in np.array_split(perm, cfg.minibatches):
                obs, targets = buf.obs[mb], tg.targets[mb]
                try:
                    pi_loss, ratio, logp = clipped_surrogate_loss(
                        self.policy, obs, buf.actions[mb], buf.log_probs[mb], adv[mb], cfg.clip)
                    if cfg.ent_coef:
                        pi_loss = pi_loss - cfg.ent_coef * (self.policy.log_std.clip(-20.0, 2.0)).sum()
                    pi_losses.append(pi_loss.item())
                    self._apply(self.pi_opt, grad(pi_loss, self.pi_opt.params))
                    clip_fracs.append(float(np.mean(np.abs(ratio - 1.0) > cfg.clip)))
                    kls.append(float(np.mean(buf.log_probs[mb] - logp)))

                    v = self.value_fn(obs).reshape(-1)
                    if self.baseline:
                        vf_loss = ((v - targets) ** 2).mean()
                    else:
                        vf_loss = critic_loss(self.loss_spec, v, targets)
                    vf_losses.append(vf_loss.item())
                    if self.corrects:
                        g = bias_correct(v.data, targets)
                        corr_err = max(corr_err, abs(float(np.mean(g)) - float(np.mean(targets))))
                    self._apply(self.vf_opt, grad(vf_loss, self.vf_opt.params))
                except NonFiniteError as e:
                    raise UpdateAborted(f"PPO update aborted: {e}", {
                        "minibatch": mb.tolist(), "obs": buf.obs[mb].tolist(),
                        "targets": targets.tolist(), "offset": self.offset}) from e
        if self.corrects:
            self.offset = correction_offset(self.value_fn.predict(buf.obs).reshape(-1), tg.targets)
        return {
            "actor_loss": float(np.mean(pi_losses)) if pi_losses else 0.0,
            "critic_loss": float(np.mean(vf_losses)) if vf_losses else 0.0,
            "clip_frac": float(np.mean(clip_fracs)) if clip_fracs else 0.0,
            "approx_kl": float(np.mean(kls)) if kls else 0.0,
            "entropy": self.policy.entropy(),
            "value_offset": self.offset,
            "corr_err": corr_err,
        }

    def _apply(self, opt: Adam, grads: list) -> None:
        grads, _ = clip_grad_norm(grads, self.cfg.max_grad_norm)
        opt.step(grads)

    def policy_gradient(self, buf: RolloutBuffer) -> np.ndarray:
        """Flattened gradient of the surrogate at ratio 1 (the plain score-function estimate)."""
        tg = self.targets(buf)
        adv = normalize(tg.advantages) if self.cfg.normalize_advantages else tg.advantages
        loss = (self.policy.log_prob(buf.obs, buf.actions) * adv).mean()
        return np.concatenate([g.ravel() for g in grad(loss, self.policy.parameters())])
