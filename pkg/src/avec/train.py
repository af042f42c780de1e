"""Training loops for PPO and SAC with checkpointing, diagnostics and metric logging."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from avec.autodiff import load_params, save_params
from avec.buffers import Collector, Episode, ReplayBuffer, RunningNorm, collect_rollout
from avec.config import RunConfig
from avec.critic import sac_td_targets
from avec.diagnostics import DiagnosticsReport, diagnose
from avec.envs import make_env, state_visitation
from avec.ppo import PPOAgent
from avec.sac import SACAgent

METRICS_VERSION = 1
METRICS_HEADER = f"# avec-metrics v{METRICS_VERSION}"
UPDATE_FIELDS = ["critic_loss", "actor_loss", "value_loss", "entropy", "clip_frac", "approx_kl",
                 "alpha", "value_offset", "corr_err"]
DIAG_FIELDS = ["empirical_distance", "true_distance", "true_distance_raw", "true_distance_corrected",
               "bias2", "variance", "cosine"]
METRIC_FIELDS = ["step", "update", "episodes", "ep_return_mean", "ep_return_std"] + UPDATE_FIELDS + DIAG_FIELDS
EPISODE_FIELDS = ["step", "episode", "return", "length"]

# state ranges used for visitation histograms
VISITATION_RANGES = {"mountaincar_sparse": [(-1.2, 0.6), (-0.07, 0.07)]}
VISITATION_BINS = 40


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


class CsvLog:
    """Append-only CSV with a versioned comment header; flushed after every row."""

    def __init__(self, path: Path | None, fields: list[str], header: str | None = None):
        self.fields = fields
        self.rows: list[dict] = []
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", newline="", buffering=1)
            if header:
                self._fh.write(header + "\n")
            self._fh.write(",".join(fields) + "\n")

    def write(self, row: dict) -> None:
        unknown = set(row) - set(self.fields)
        if unknown:
            raise KeyError(f"unknown metric columns {sorted(unknown)}")
        self.rows.append(row)
        if self._fh is not None:
            self._fh.write(",".join(_fmt(row.get(f)) for f in self.fields) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


@dataclass
class TrainResult:
    agent: object
    metrics: list[dict]
    episodes: list[dict]
    reports: list[DiagnosticsReport] = field(default_factory=list)
    checkpoints: list[int] = field(default_factory=list)
    visitation: dict | None = None


class _UniformPolicy:
    def __init__(self, act_dim: int, scale: np.ndarray):
        self.act_dim, self.scale = act_dim, scale

    def act(self, obs, rng):
        a = rng.uniform(-1.0, 1.0, size=(len(obs), self.act_dim))
        return a, a * self.scale, np.zeros(len(obs))


def checkpoint_steps(cfg: RunConfig) -> list[int]:
    return sorted({max(1, int(round(f * cfg.total_steps))) for f in cfg.diag.schedule}) if cfg.total_steps else []


def build_agent(cfg: RunConfig, env, rng: np.random.Generator):
    spec = cfg.critic.spec
    if cfg.algo == "ppo":
        return PPOAgent(env.obs_dim, env.act_dim, cfg.ppo, spec, rng, cfg.avec, cfg.baseline)
    scale = np.where(np.isfinite(env.act_high), env.act_high, 1.0)
    return SACAgent(env.obs_dim, env.act_dim, cfg.sac, spec, rng, scale, cfg.baseline)


def _streams(seed: int) -> dict:
    names = ["init", "env", "update", "diag"]
    return {n: np.random.default_rng(s) for n, s in zip(names, np.random.SeedSequence(seed).spawn(len(names)))}


def save_checkpoint(path: Path, agent, step: int, empirical, obs_norm=None) -> None:
    params = [p for ps in agent.networks().values() for p in ps]
    extra = {"step": step, "offset": getattr(agent, "offset", None), "offsets": getattr(agent, "offsets", None)}
    if obs_norm is not None:
        extra["obs_norm"] = {"mean": obs_norm.mean.tolist(), "var": obs_norm.var.tolist(),
                             "count": obs_norm.count, "clip": obs_norm.clip}
    if empirical is not None:
        obs, targets, actions = empirical
        extra["empirical"] = {"obs": obs.tolist(), "targets": targets.tolist(),
                              "actions": None if actions is None else actions.tolist()}
    save_params(path, params, extra=extra)


def restore_checkpoint(path: Path, agent):
    """Load parameters and offsets into ``agent``; returns (extra, empirical batch or None).

    A saved observation filter is returned as ``extra["obs_norm"]`` rebuilt into a RunningNorm.
    """
    params = [p for ps in agent.networks().values() for p in ps]
    _, extra = load_params(path, params, with_extra=True)
    if extra.get("offset") is not None:
        agent.offset = extra["offset"]
    if extra.get("offsets") is not None:
        agent.offsets = list(extra["offsets"])
    if extra.get("obs_norm") is not None:
        d = extra["obs_norm"]
        norm = RunningNorm(len(d["mean"]), d["clip"])
        norm.mean, norm.var, norm.count = np.array(d["mean"]), np.array(d["var"]), d["count"]
        extra["obs_norm"] = norm
    emp = extra.get("empirical")
    if emp is None:
        return extra, None
    actions = None if emp["actions"] is None else np.array(emp["actions"])
    return extra, (np.array(emp["obs"]), np.array(emp["targets"]), actions)


def run_diagnostics(cfg: RunConfig, agent, env, step: int, empirical, obs_norm=None) -> DiagnosticsReport:
    gamma = cfg.ppo.gamma if cfg.algo == "ppo" else cfg.sac.gamma
    rng = np.random.default_rng([cfg.seed, step, 0xD1A6])
    return diagnose(agent, env, step, empirical, gamma, cfg.diag.budget, cfg.diag.n_batches,
                    cfg.diag.batch_size, rng, obs_norm)


def train(cfg: RunConfig, run_dir: Path | None = None) -> TrainResult:
    """Train per ``cfg``; when ``run_dir`` is given, write logs, checkpoints and diagnostics there.

    PPO rounds ``total_steps`` up to a whole number of rollouts.
    """
    cfg.validate()
    env = make_env(cfg.env.id, cfg.env.horizon)
    rngs = _streams(cfg.seed)
    agent = build_agent(cfg, env, rngs["init"])
    obs_norm = RunningNorm(env.obs_dim) if cfg.env.normalize_obs else None
    collector = Collector(env, rngs["env"], obs_norm)
    if run_dir is not None:
        run_dir = Path(run_dir)
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        (run_dir / "diagnostics").mkdir(parents=True, exist_ok=True)
    log = CsvLog(run_dir / "metrics.csv" if run_dir else None, METRIC_FIELDS, METRICS_HEADER)
    ep_log = CsvLog(run_dir / "episodes.csv" if run_dir else None, EPISODE_FIELDS)
    result = TrainResult(agent, log.rows, ep_log.rows)
    visited: list[np.ndarray] = []
    pending = checkpoint_steps(cfg)

    def checkpoint(step: int, empirical, row: dict | None) -> None:
        result.checkpoints.append(step)
        if run_dir is not None:
            save_checkpoint(run_dir / "checkpoints" / f"step_{step:08d}.json", agent, step, empirical, obs_norm)
        if cfg.diag.enabled and empirical is not None:
            report = run_diagnostics(cfg, agent, env, step, empirical, obs_norm)
            result.reports.append(report)
            if row is not None:
                row.update({k: getattr(report, k) for k in DIAG_FIELDS})
            if run_dir is not None:
                (run_dir / "diagnostics" / f"step_{step:08d}.json").write_text(json.dumps(report.to_dict(), indent=1))

    def log_episodes(eps: list[Episode]) -> None:
        for ep in eps:
            ep_log.write({"step": ep.step, "episode": len(ep_log.rows), "return": ep.ret, "length": ep.length})

    checkpoint(0, None, None)
    try:
        if cfg.algo == "ppo":
            _train_ppo(cfg, agent, collector, rngs, log, log_episodes, pending, checkpoint, visited)
        else:
            _train_sac(cfg, agent, collector, rngs, log, log_episodes, pending, checkpoint, visited, env)
    finally:
        log.close()
        ep_log.close()
    if visited and env.id in VISITATION_RANGES:
        hist, edges = state_visitation(visited, VISITATION_BINS, VISITATION_RANGES[env.id])
        result.visitation = {"env": env.id, "bins": VISITATION_BINS, "ranges": VISITATION_RANGES[env.id],
                             "histogram": hist.tolist()}
        if run_dir is not None:
            (run_dir / "visitation.json").write_text(json.dumps(result.visitation))
    return result


def _episode_stats(eps: list[Episode]) -> dict:
    if not eps:
        return {"episodes": 0}
    r = np.array([e.ret for e in eps])
    return {"episodes": len(eps), "ep_return_mean": float(r.mean()), "ep_return_std": float(r.std())}


def _train_ppo(cfg, agent: PPOAgent, collector, rngs, log, log_episodes, pending, checkpoint, visited):
    steps, update = 0, 0
    while steps < cfg.total_steps:
        buf, eps = collect_rollout(collector, agent.policy, agent.value_fn, cfg.ppo.horizon)
        steps += len(buf)
        visited.append(buf.states)
        log_episodes(eps)
        metrics = agent.update(buf, rngs["update"])
        update += 1
        row = {"step": steps, "update": update, **_episode_stats(eps), **metrics}
        if pending and steps >= pending[0]:
            while pending and steps >= pending[0]:
                pending.pop(0)
            checkpoint(steps, (buf.obs, agent.targets(buf).targets, None), row)
        log.write(row)


def _train_sac(cfg, agent: SACAgent, collector, rngs, log, log_episodes, pending, checkpoint, visited, env):
    sc = cfg.sac
    replay = ReplayBuffer(env.obs_dim, env.act_dim, sc.buffer_size, min_fill=max(sc.learning_starts, sc.batch_size))
    warmup = _UniformPolicy(env.act_dim, agent.policy.act_scale)
    states, window_eps, window_metrics = [], [], []
    update = 0
    for step in range(1, cfg.total_steps + 1):
        policy = agent.policy if len(replay) >= sc.learning_starts else warmup
        state, obs, a, res, _, ep = collector.step(policy)
        states.append(np.atleast_1d(state))
        replay.add(obs, a, res.reward, collector.observe(res.next_state), res.terminal)
        if ep is not None:
            log_episodes([ep])
            window_eps.append(ep)
        if replay.ready:
            for _ in range(sc.gradient_steps):
                window_metrics.append(agent.update(replay, rngs["update"]))
                update += 1
        at_checkpoint = bool(pending) and step >= pending[0]
        if step % sc.log_interval == 0 or at_checkpoint or step == cfg.total_steps:
            row = {"step": step, "update": update, **_episode_stats(window_eps)}
            if window_metrics:
                row.update({k: float(np.mean([m[k] for m in window_metrics])) for k in window_metrics[0]})
                row["corr_err"] = max(m["corr_err"] for m in window_metrics)
            if at_checkpoint:
                while pending and step >= pending[0]:
                    pending.pop(0)
                empirical = None
                if replay.ready:
                    b = replay.sample(min(sc.batch_size, len(replay)), np.random.default_rng([cfg.seed, step]))
                    q_hat = sac_td_targets(b["rewards"], b["terminals"],
                                           agent.nets.v_target.predict(b["next_obs"]).reshape(-1), sc.gamma)
                    empirical = (b["obs"], q_hat, b["actions"])
                checkpoint(step, empirical, row)
            log.write(row)
            window_eps, window_metrics = [], []
    if states:
        visited.append(np.array(states))
