"""Run configuration and its key-value file format.

Grammar (one entry per line)::

    # comment                      blank lines and whole-line '#' comments are ignored
    [section]                      prefixes the following keys with "section."
    key = value                    keys may be dotted: critic.loss = "avec"

A value is a JSON literal (number, true/false, null, "string", [list]);
anything that is not valid JSON is taken as a bare string, so
``algo = ppo`` and ``algo = "ppo"`` are equivalent. Unknown keys are errors.
"""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from avec.critic import CriticLossSpec
from avec.envs import ENV_IDS


class ConfigError(ValueError):
    pass


@dataclass
class EnvConfig:
    id: str = "mountaincar_sparse"
    horizon: typing.Optional[int] = None
    normalize_obs: bool = False


@dataclass
class CriticConfig:
    loss: str = "mse"
    alpha: float = 0.0

    @property
    def spec(self) -> CriticLossSpec:
        return CriticLossSpec(self.loss, self.alpha)


@dataclass
class AvecConfig:
    # feed the bias-corrected critic (rather than the raw one) into the actor's advantages
    correct_advantages: bool = False


@dataclass
class PPOConfig:
    horizon: int = 512
    epochs: int = 10
    minibatches: int = 32
    clip: float = 0.2
    lr: float = 2.5e-4
    actor_lr: typing.Optional[float] = None
    critic_lr: typing.Optional[float] = None
    gamma: float = 0.99
    lam: float = 0.95
    hidden: int = 64
    layers: int = 2
    activation: str = "tanh"
    normalize_advantages: bool = True
    max_grad_norm: typing.Optional[float] = 0.5
    init_log_std: float = 0.0
    ent_coef: float = 0.0


@dataclass
class SACConfig:
    lr: float = 3e-4
    gamma: float = 0.99
    buffer_size: int = 100_000
    batch_size: int = 256
    hidden: int = 256
    layers: int = 2
    activation: str = "relu"
    tau: float = 0.01
    target_update_interval: int = 1
    gradient_steps: int = 1
    alpha: float = 0.2
    learn_alpha: bool = False
    learning_starts: int = 1000
    max_grad_norm: typing.Optional[float] = None
    log_interval: int = 1000


@dataclass
class DiagConfig:
    enabled: bool = True
    schedule: typing.Tuple[float, ...] = (0.1, 0.2, 0.4, 0.6, 0.9)
    budget: int = 10_000
    n_batches: int = 10
    batch_size: int = 512


@dataclass
class RunConfig:
    algo: str = "ppo"
    seed: int = 0
    total_steps: int = 50_000
    # run the textbook critic code path, bypassing the loss-spec machinery
    baseline: bool = False
    out_dir: str = "runs"
    env: EnvConfig = field(default_factory=EnvConfig)
    critic: CriticConfig = field(default_factory=CriticConfig)
    avec: AvecConfig = field(default_factory=AvecConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    sac: SACConfig = field(default_factory=SACConfig)
    diag: DiagConfig = field(default_factory=DiagConfig)

    def validate(self) -> "RunConfig":
        if self.algo == "trpo":
            raise ConfigError("algo 'trpo' is not supported: only 'ppo' and 'sac' are implemented")
        if self.algo not in ("ppo", "sac"):
            raise ConfigError(f"algo must be 'ppo' or 'sac', got {self.algo!r}")
        if self.env.id not in ENV_IDS:
            raise ConfigError(f"env.id must be one of {ENV_IDS}, got {self.env.id!r}")
        try:
            self.critic.spec
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.total_steps < 0:
            raise ConfigError("total_steps must be >= 0")
        if self.ppo.horizon < 1 or self.ppo.minibatches < 1 or self.ppo.epochs < 0:
            raise ConfigError("ppo.horizon and ppo.minibatches must be >= 1, ppo.epochs >= 0")
        if self.ppo.horizon < self.ppo.minibatches:
            raise ConfigError("ppo.horizon must be at least ppo.minibatches")
        if not 0.0 <= self.sac.tau <= 1.0:
            raise ConfigError("sac.tau must lie in [0, 1]")
        if any(not 0.0 < f <= 1.0 for f in self.diag.schedule):
            raise ConfigError("diag.schedule entries must lie in (0, 1]")
        if self.diag.n_batches < 2:
            raise ConfigError("diag.n_batches must be >= 2")
        return self

    def replace(self, **flat) -> "RunConfig":
        d = to_flat_dict(self)
        for k, v in flat.items():
            if k not in d:
                raise ConfigError(f"unknown config key {k!r}")
            d[k] = v
        return from_flat_dict(d)


# ---------------------------------------------------------------------------


def _coerce(key: str, value, tp):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(key, value, args[0])
    if origin in (tuple, typing.Tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        inner = typing.get_args(tp)[0]
        return tuple(_coerce(key, v, inner) for v in value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{key}: unsupported type {tp}")


def to_flat_dict(cfg: RunConfig) -> dict:
    out = {}

    def walk(obj, prefix):
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if dataclasses.is_dataclass(v):
                walk(v, prefix + f.name + ".")
            else:
                out[prefix + f.name] = list(v) if isinstance(v, tuple) else v

    walk(cfg, "")
    return out


def from_flat_dict(flat: dict) -> RunConfig:
    """Build a validated config; missing keys take defaults, unknown keys are rejected."""
    cfg = RunConfig()
    hints_cache: dict = {}
    known = to_flat_dict(cfg)
    for key, value in flat.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        *path, name = key.split(".")
        obj = cfg
        for part in path:
            obj = getattr(obj, part)
        tp = hints_cache.setdefault(type(obj), typing.get_type_hints(type(obj)))[name]
        setattr(obj, name, _coerce(key, value, tp))
    return cfg.validate()


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_config_text(text: str) -> dict:
    """Parse the key-value grammar into a flat {dotted key: value} dict."""
    flat: dict = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        full = f"{section}.{key}" if section else key
        if full in flat:
            raise ConfigError(f"line {lineno}: duplicate key {full!r}")
        flat[full] = _parse_value(value)
    return flat


def parse_config(text: str, overrides: dict | None = None) -> RunConfig:
    flat = parse_config_text(text)
    flat.update(overrides or {})
    return from_flat_dict(flat)


def load_config(path, overrides: dict | None = None) -> RunConfig:
    return parse_config(Path(path).read_text(), overrides)


def parse_override(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise ConfigError(f"override must look like key=value, got {item!r}")
    k, v = item.split("=", 1)
    return k.strip(), _parse_value(v.strip())


def dump_config(cfg: RunConfig) -> str:
    lines = ["# avec run config (fully resolved)"]
    for k, v in to_flat_dict(cfg).items():
        lines.append(f"{k} = {json.dumps(v)}")
    return "\n".join(lines) + "\n"
