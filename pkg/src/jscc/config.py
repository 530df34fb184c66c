"""Experiment configuration: a JSON document with fixed sections.

Unknown keys are rejected with the dotted path of the offending key.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union, get_args, get_origin, get_type_hints

# 7 log-spaced points over [1e-3, 1e1]
DEFAULT_BETAS = [float(10.0 ** e) for e in (-3.0, -7 / 3, -5 / 3, -1.0, -1 / 3, 1 / 3, 1.0)]


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class DatasetSection:
    kind: str = "gauss_blobs"
    n: int = 3000
    n_eval: int = 500
    side: int = 8
    seed: int = 1234
    path: Optional[str] = None


@dataclass
class ModelSection:
    hidden: List[int] = field(default_factory=lambda: [256, 256])
    latent_dim: int = 20
    slots: int = 5
    prior: str = "standard"
    prior_hidden: int = 32
    alv: bool = False
    v_dim: int = 8
    alv_hidden: List[int] = field(default_factory=lambda: [256])
    alv_use_y: bool = False
    coder_hidden: List[int] = field(default_factory=lambda: [256])
    sigma_obs: float = 1.0


@dataclass
class ChannelSection:
    kind: str = "gaussian"
    snr: float = 1.0
    bandwidth_probs: Optional[List[float]] = None
    bandwidth: Optional[int] = None
    marginalization: str = "full_sum"
    mc_samples: int = 1
    keep_prob: float = 0.9
    noise_temperature: float = 0.5
    input_temperature: float = 0.5


@dataclass
class ObjectiveSection:
    mode: str = "joint"
    beta: float = 0.01
    betas: List[float] = field(default_factory=lambda: list(DEFAULT_BETAS))
    posterior: str = "encoder_channel"
    prior_fit_weight: float = 1.0


@dataclass
class TrainingSection:
    lr: float = 0.01
    momentum: float = 0.9
    steps: int = 1000
    batch: int = 64
    seed: int = 0
    log_every: int = 50
    clip_norm: Optional[float] = 10.0


@dataclass
class EvalSection:
    snrs: List[float] = field(default_factory=lambda: [0.25, 0.5, 1.0, 2.0, 4.0])
    bandwidths: Optional[List[int]] = None
    # roots far apart so that root ^ grid index never collides across roots
    seeds: List[int] = field(default_factory=lambda: [0, 100, 200])
    mmd_samples: int = 500
    variants: List[str] = field(
        default_factory=lambda: ["standard", "autoregressive", "standard+alv", "autoregressive+alv"]
    )
    workers: int = 1
    gradcheck_epsilon: float = 1e-5
    gradcheck_coords: int = 4
    sample_count: int = 8


@dataclass
class OutputSection:
    directory: str = "runs/default"
    record_wall_time: bool = False


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    channel: ChannelSection = field(default_factory=ChannelSection)
    objective: ObjectiveSection = field(default_factory=ObjectiveSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    eval: EvalSection = field(default_factory=EvalSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with some section fields overridden, e.g. ``replace(training={"steps": 0})``."""
        data = self.to_dict()
        for name, updates in sections.items():
            data[name].update(updates)
        return config_from_dict(data)

    @property
    def output_dir(self) -> Path:
        return Path(os.environ.get("JSCC_OUT_DIR") or self.output.directory)


_CHOICES = {
    "dataset.kind": {"gauss_blobs", "sprites", "idx"},
    "model.prior": {"standard", "autoregressive"},
    "channel.kind": {"gaussian", "bandwidth", "relaxed_binary"},
    "channel.marginalization": {"full_sum", "monte_carlo"},
    "objective.mode": {"joint", "alv", "source_vae", "separate"},
    "objective.posterior": {"encoder_channel", "inference_net"},
}


def _coerce(value: Any, tp: Any, key: str) -> Any:
    origin = get_origin(tp)
    if origin is Union:
        args = [a for a in get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], key)
    if origin in (list, List):
        if not isinstance(value, list):
            raise ConfigError(key, f"expected a list, got {type(value).__name__}")
        (inner,) = get_args(tp)
        return [_coerce(v, inner, f"{key}[{i}]") for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, "expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    raise ConfigError(key, f"unsupported type {tp}")


def _section(cls, data: Any, name: str):
    if not isinstance(data, dict):
        raise ConfigError(name, "expected an object")
    hints = get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown key")
    kwargs = {k: _coerce(v, hints[k], f"{name}.{k}") for k, v in data.items()}
    section = cls(**kwargs)
    for f in dataclasses.fields(cls):
        path = f"{name}.{f.name}"
        if path in _CHOICES and getattr(section, f.name) not in _CHOICES[path]:
            raise ConfigError(path, f"must be one of {sorted(_CHOICES[path])}")
    return section


def _validate(cfg: ExperimentConfig) -> None:
    positive = {
        "dataset.n": cfg.dataset.n,
        "model.latent_dim": cfg.model.latent_dim,
        "model.slots": cfg.model.slots,
        "model.sigma_obs": cfg.model.sigma_obs,
        "channel.snr": cfg.channel.snr,
        "channel.mc_samples": cfg.channel.mc_samples,
        "training.batch": cfg.training.batch,
        "eval.mmd_samples": cfg.eval.mmd_samples,
        "eval.workers": cfg.eval.workers,
    }
    for key, value in positive.items():
        if not value > 0:
            raise ConfigError(key, "must be positive")
    if cfg.model.latent_dim % cfg.model.slots:
        raise ConfigError("model.slots", "must divide model.latent_dim")
    if not 4 <= cfg.dataset.side <= 32:
        raise ConfigError("dataset.side", "must lie in [4, 32]")
    if cfg.dataset.kind == "idx" and not cfg.dataset.path:
        raise ConfigError("dataset.path", "required when dataset.kind is 'idx'")
    if not 0 <= cfg.dataset.n_eval < cfg.dataset.n:
        raise ConfigError("dataset.n_eval", "must lie in [0, dataset.n)")
    if cfg.training.steps < 0:
        raise ConfigError("training.steps", "must be >= 0")
    if cfg.training.lr < 0:
        raise ConfigError("training.lr", "must be >= 0")
    if not 0 <= cfg.training.momentum < 1:
        raise ConfigError("training.momentum", "must lie in [0, 1)")
    if cfg.objective.beta < 0 or any(b < 0 for b in cfg.objective.betas):
        raise ConfigError("objective.beta", "must be >= 0")
    if not cfg.objective.betas:
        raise ConfigError("objective.betas", "must be non-empty")
    if cfg.channel.bandwidth is not None and not 0 <= cfg.channel.bandwidth <= cfg.model.slots:
        raise ConfigError("channel.bandwidth", f"must lie in 0..{cfg.model.slots}")
    if cfg.channel.bandwidth_probs is not None:
        probs = cfg.channel.bandwidth_probs
        if len(probs) != cfg.model.slots + 1 or any(p < 0 for p in probs) or abs(sum(probs) - 1) > 1e-9:
            raise ConfigError("channel.bandwidth_probs", f"needs {cfg.model.slots + 1} non-negative entries summing to 1")
    if not 0 < cfg.channel.keep_prob < 1:
        raise ConfigError("channel.keep_prob", "must lie in (0, 1)")
    for v in cfg.eval.variants:
        prior, _, alv = v.partition("+")
        if prior not in _CHOICES["model.prior"] or alv not in ("", "alv"):
            raise ConfigError("eval.variants", f"unknown variant {v!r}")
    if not 0 < cfg.eval.gradcheck_epsilon <= 1e-2:
        raise ConfigError("eval.gradcheck_epsilon", "must lie in (0, 1e-2]")


def config_from_dict(data: Dict[str, Any]) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "expected an object")
    hints = get_type_hints(ExperimentConfig)
    for key in data:
        if key not in hints:
            raise ConfigError(key, "unknown section")
    sections = {name: _section(hints[name], data.get(name, {}), name) for name in hints}
    cfg = ExperimentConfig(**sections)
    _validate(cfg)
    return cfg


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from None
    return config_from_dict(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
