"""Model construction, the SGD training loop, and pipeline evaluation."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, SGD, Tensor
from .channels import (
    BandwidthLimitedSpec,
    BandwidthPartition,
    GaussianChannelSpec,
    Marginalization,
    bandwidth_transmit,
    gaussian_transmit,
    point_bandwidth,
    uniform_bandwidth,
)
from .config import ExperimentConfig
from .data import DatasetHandle, generate_synthetic, load_idx
from .mmd import mmd_statistic
from .models import ALVComponents, ChannelCoderPair, DecoderNet, EncoderNet, ModelBundle, PriorModel
from .objectives import (
    LossBreakdown,
    PosteriorMode,
    alv_loss,
    channel_ae_loss,
    joint_loss,
    rate_estimators,
    source_vae_loss,
)

LOG2 = math.log(2.0)

# substream indices for seed derivation
_ENCODER, _DECODER, _PRIOR, _ALV, _CODER, _INFERENCE, _DATA, _NOISE = range(8)


def derive_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


def split_seed(root: int, index: int) -> int:
    """Seed of grid point ``index`` under root seed ``root``."""
    return root ^ index


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, last: Optional[dict], cause: Exception):
        super().__init__(f"training diverged at step {step}: {cause}; last finite breakdown {last}")
        self.step = step
        self.last = last


@dataclass
class TrainConfig:
    objective: str = "joint"  # joint | alv | source_vae | channel_ae
    in_dim: int = 64
    latent_dim: int = 20
    slots: int = 5
    hidden: Sequence[int] = (256, 256)
    prior: str = "standard"
    prior_hidden: int = 32
    alv: bool = False
    v_dim: int = 8
    alv_hidden: Sequence[int] = (256,)
    alv_use_y: bool = False
    coder_hidden: Sequence[int] = (256,)
    sigma_obs: float = 1.0
    channel: str = "gaussian"  # gaussian | bandwidth | none
    snr: float = 1.0
    bandwidth_probs: Optional[Sequence[float]] = None
    marginalization: str = "full_sum"
    mc_samples: int = 1
    beta: float = 0.01
    posterior: str = "encoder_channel"
    prior_fit_weight: float = 1.0
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    steps: int = 1000
    seed: int = 0
    log_every: int = 50
    clip_norm: Optional[float] = 10.0

    @classmethod
    def from_experiment(cls, cfg: ExperimentConfig, in_dim: int, **overrides) -> "TrainConfig":
        m, c, o, t = cfg.model, cfg.channel, cfg.objective, cfg.training
        probs = c.bandwidth_probs
        if c.bandwidth is not None:
            probs = list(point_bandwidth(m.slots, c.bandwidth))
        objective = {"separate": "source_vae"}.get(o.mode, o.mode)
        base = cls(
            objective=objective, in_dim=in_dim, latent_dim=m.latent_dim, slots=m.slots,
            hidden=tuple(m.hidden), prior=m.prior, prior_hidden=m.prior_hidden, alv=m.alv or o.mode == "alv",
            v_dim=m.v_dim, alv_hidden=tuple(m.alv_hidden), alv_use_y=m.alv_use_y,
            coder_hidden=tuple(m.coder_hidden), sigma_obs=m.sigma_obs,
            channel=c.kind if c.kind != "relaxed_binary" else "gaussian", snr=c.snr,
            bandwidth_probs=probs, marginalization=c.marginalization, mc_samples=c.mc_samples,
            beta=o.beta, posterior=o.posterior, prior_fit_weight=o.prior_fit_weight,
            learning_rate=t.lr, momentum=t.momentum, batch_size=t.batch, steps=t.steps, seed=t.seed,
            log_every=t.log_every, clip_norm=t.clip_norm,
        )
        for k, v in overrides.items():
            setattr(base, k, v)
        if base.alv and base.objective == "joint":
            base.objective = "alv"
        return base

    @property
    def partition(self) -> BandwidthPartition:
        return BandwidthPartition.equal(self.latent_dim, self.slots)


def build_model(config: TrainConfig) -> ModelBundle:
    s = config.seed
    if config.objective == "channel_ae":
        coder = ChannelCoderPair(config.latent_dim, config.coder_hidden, seed=derive_seed(s, _CODER))
        return ModelBundle(encoder=None, decoder=None, prior=None, coder=coder)
    use_alv = config.alv or config.objective == "alv"
    v_dim = config.v_dim if use_alv else 0
    prior_kind = "standard" if config.objective == "source_vae" else config.prior
    bundle = ModelBundle(
        encoder=EncoderNet(config.in_dim, config.latent_dim, config.hidden, seed=derive_seed(s, _ENCODER)),
        decoder=DecoderNet(
            config.latent_dim, config.in_dim, config.hidden, v_dim=v_dim,
            sigma_obs=config.sigma_obs, seed=derive_seed(s, _DECODER),
        ),
        prior=PriorModel(prior_kind, config.partition, config.prior_hidden, seed=derive_seed(s, _PRIOR)),
    )
    if use_alv:
        bundle.alv = ALVComponents(
            config.in_dim, config.latent_dim, config.v_dim, config.alv_hidden,
            use_y=config.alv_use_y, seed=derive_seed(s, _ALV),
        )
    if config.posterior == PosteriorMode.INFERENCE_NET.value and config.objective == "joint":
        bundle.inference = EncoderNet(config.in_dim, config.latent_dim, config.hidden, seed=derive_seed(s, _INFERENCE))
    return bundle


def build_channel(config: TrainConfig, prior: Optional[PriorModel], bandwidth: Optional[int] = None):
    """Channel for training (``bandwidth=None``) or for evaluation at a fixed bandwidth."""
    if config.channel == "none":
        return None
    inner = GaussianChannelSpec(config.snr)
    if config.channel == "gaussian":
        return inner
    if config.channel != "bandwidth":
        raise ValueError(f"unknown channel {config.channel!r}")
    if bandwidth is not None:
        probs = point_bandwidth(config.slots, bandwidth)
    elif config.bandwidth_probs is not None:
        probs = np.asarray(config.bandwidth_probs, dtype=np.float64)
    else:
        probs = uniform_bandwidth(config.slots)
    return BandwidthLimitedSpec(
        config.partition, probs, inner, prior,
        mode=Marginalization(config.marginalization), n_samples=config.mc_samples,
    )


def compute_loss(config: TrainConfig, model: ModelBundle, channel, x, rng) -> LossBreakdown:
    if config.objective == "source_vae":
        return source_vae_loss(x, model, config.beta, rng)
    if config.objective == "joint":
        return joint_loss(x, model, channel, config.beta, rng, config.posterior, config.prior_fit_weight)
    if config.objective == "alv":
        return alv_loss(x, model, channel, config.beta, rng, config.prior_fit_weight)
    raise ValueError(f"unknown objective {config.objective!r}")


def _clip(grads: Dict[str, np.ndarray], max_norm: Optional[float]) -> Dict[str, np.ndarray]:
    if max_norm is None:
        return grads
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


def train(
    config: TrainConfig,
    data: Optional[DatasetHandle] = None,
    model: Optional[ModelBundle] = None,
) -> Tuple[ModelBundle, List[dict]]:
    """Run SGD on the configured objective. Deterministic given ``config.seed``.

    Returns the trained bundle and one trace row every ``log_every`` steps
    (and at the final step).
    """
    model = model if model is not None else build_model(config)
    trace: List[dict] = []
    if config.steps == 0:
        return model, trace
    params = model.parameters()
    opt = SGD(params, config.learning_rate, config.momentum)
    data_rng = np.random.default_rng(derive_seed(config.seed, _DATA))
    noise_rng = np.random.default_rng(derive_seed(config.seed, _NOISE))

    if config.objective == "channel_ae":
        channel = GaussianChannelSpec(config.snr)

        def step_loss():
            y_prior = noise_rng.standard_normal((config.batch_size, config.latent_dim))
            loss = channel_ae_loss(y_prior, model.coder, channel, noise_rng)
            return loss, {"distortion": loss.item(), "total": loss.item()}
    else:
        if data is None:
            raise ValueError("training this objective needs a dataset")
        channel = build_channel(config, model.prior)
        batches = data.batches(config.batch_size, data_rng)

        def step_loss():
            breakdown = compute_loss(config, model, channel, next(batches), noise_rng)
            return breakdown.total, breakdown

    last = None
    for step in range(1, config.steps + 1):
        try:
            total, info = step_loss()
            grads = ad.backward(total, params)
        except NonFiniteError as exc:
            raise TrainingDivergedError(step, last, exc) from exc
        opt.step(_clip(grads, config.clip_norm))
        row = info if isinstance(info, dict) else info.as_dict()
        last = row
        if step % config.log_every == 0 or step == config.steps:
            trace.append({"step": step, **row})
    return model, trace


# ---------------------------------------------------------------------------
# evaluation


class PipelineMode(str, enum.Enum):
    JOINT = "joint"
    SEPARATE = "separate"


@dataclass
class MetricsRecord:
    run_id: str
    seed: int
    mode: str
    snr: float
    bandwidth: Optional[int]
    beta: float
    steps: int
    distortion_l2: float
    rate_bits: float
    transmission_bits: float
    mmd: float = float("nan")
    wall_seconds: float = 0.0
    reconstructions: Optional[np.ndarray] = field(default=None, repr=False, compare=False)


def reconstruct(
    model: ModelBundle,
    channel,
    x: np.ndarray,
    mode: PipelineMode,
    rng: np.random.Generator,
    coder: Optional[ChannelCoderPair] = None,
    bandwidth: Optional[int] = None,
) -> np.ndarray:
    """Send ``x`` through the full system and return decoder means."""
    x = Tensor(x)
    q = model.encoder(x)
    y = q.sample(rng)
    if mode is PipelineMode.SEPARATE:
        if coder is None:
            raise ValueError("separate pipeline needs a channel coder pair")
        code = coder.encode(y)
        if isinstance(channel, GaussianChannelSpec):
            z_c = gaussian_transmit(code, code, channel, rng)
        else:
            z_c = bandwidth_transmit(code, code, bandwidth, channel, rng).z
        z = coder.decode(z_c)
    elif isinstance(channel, GaussianChannelSpec):
        z = gaussian_transmit(y, q.mean, channel, rng)
    elif isinstance(channel, BandwidthLimitedSpec):
        if bandwidth is None:
            raise ValueError("evaluation on a bandwidth-limited channel needs a bandwidth")
        z = bandwidth_transmit(y, q.mean, bandwidth, channel, rng).z
    elif channel is None:
        z = y
    else:
        raise TypeError(f"unsupported channel {type(channel).__name__}")
    v = model.alv.prior_sample(len(x), rng) if model.alv is not None else None
    return model.decoder(z, v).mean.data


def evaluate_pipeline(
    model: ModelBundle,
    channel,
    data: DatasetHandle,
    mode=PipelineMode.JOINT,
    rng: Optional[np.random.Generator] = None,
    coder: Optional[ChannelCoderPair] = None,
    bandwidth: Optional[int] = None,
    mmd_reference: Optional[np.ndarray] = None,
    keep_reconstructions: bool = False,
    **meta,
) -> MetricsRecord:
    """Mean squared L2 distortion of the end-to-end system plus R/T estimates in bits."""
    mode = PipelineMode(mode)
    if mode is PipelineMode.SEPARATE and coder is None:
        raise ValueError("separate mode requires the channel coder pair")
    rng = rng if rng is not None else np.random.default_rng(0)
    x = data.flat
    x_hat = reconstruct(model, channel, x, mode, rng, coder, bandwidth)
    distortion = float(np.mean(np.sum((x - x_hat) ** 2, axis=1)))
    if mode is PipelineMode.JOINT:
        report = rate_estimators(x, model, channel, rng, bandwidth=bandwidth)
    else:
        report = rate_estimators(x, model, None, rng)
    mmd = float("nan")
    if mmd_reference is not None:
        mmd = mmd_statistic(x_hat[: len(mmd_reference)], mmd_reference)
    snr = channel.snr if isinstance(channel, GaussianChannelSpec) else getattr(getattr(channel, "inner", None), "snr", float("nan"))
    return MetricsRecord(
        run_id=meta.get("run_id", ""),
        seed=meta.get("seed", 0),
        mode=meta.get("mode_label", mode.value),
        snr=snr,
        bandwidth=bandwidth,
        beta=meta.get("beta", float("nan")),
        steps=meta.get("steps", 0),
        distortion_l2=distortion,
        rate_bits=report.rate / LOG2,
        transmission_bits=report.transmission / LOG2,
        mmd=mmd,
        reconstructions=x_hat if keep_reconstructions else None,
    )


@dataclass
class EvalReport:
    rows: List[MetricsRecord]
    best: Optional[MetricsRecord] = None


def beta_sweep(
    config: TrainConfig,
    betas: Sequence[float],
    train_data: DatasetHandle,
    eval_data: DatasetHandle,
    bandwidth: Optional[int] = None,
    mode_label: Optional[str] = None,
) -> EvalReport:
    """Train one model per beta and keep the lowest end-to-end distortion."""
    if not betas:
        raise ValueError("beta grid is empty")
    rows = []
    for i, beta in enumerate(betas):
        cfg = TrainConfig(**{**config.__dict__, "beta": float(beta), "seed": split_seed(config.seed, i)})
        model, _ = train(cfg, train_data)
        channel = build_channel(cfg, model.prior, bandwidth)
        rows.append(
            evaluate_pipeline(
                model, channel, eval_data, PipelineMode.JOINT,
                np.random.default_rng(derive_seed(cfg.seed, _NOISE + 1)),
                bandwidth=bandwidth, seed=cfg.seed, beta=float(beta), steps=cfg.steps,
                mode_label=mode_label or cfg.objective,
            )
        )
    best = min(rows, key=lambda r: r.distortion_l2)
    return EvalReport(rows, best)


def load_dataset(cfg: ExperimentConfig) -> Tuple[DatasetHandle, DatasetHandle]:
    d = cfg.dataset
    if d.kind == "idx":
        full = load_idx(d.path)
    else:
        full = generate_synthetic(d.kind, d.n, d.side, d.seed)
    return full.split(min(d.n_eval, len(full) - 1) if len(full) else 0)
