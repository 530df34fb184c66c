"""Training objectives and rate / distortion / transmission estimators.

All quantities are in nats and averaged over the batch.

``total = distortion + alv_kl + beta * (rate + posterior_kl) + prior_fit_weight * prior_fit``

With auxiliary latents ``distortion + alv_kl`` is the bound on the
distortion term, so the KL on ``V`` is not scaled by ``beta``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .channels import (
    BandwidthLimitedSpec,
    ChannelOutput,
    GaussianChannelSpec,
    bandwidth_transmit,
    gaussian_channel_log_density,
    gaussian_transmit,
    marginalize_bandwidth,
)
from .distributions import DiagonalGaussian, gaussian_kl_diag, kl_to_standard
from .models import ModelBundle, PriorKind, alv_infer

ZERO = Tensor(0.0)


class PosteriorMode(str, enum.Enum):
    # Q(Y,Z|X) = E(Y|X) C(Z|Y); beta weights KL(E(Y|X) || prior)
    ENCODER_CHANNEL = "encoder_channel"
    # Q(Y,Z|X) = Q_net(Y|X) C(Z|Y); beta weights the single-sample KL(Q || E C)
    INFERENCE_NET = "inference_net"


@dataclass
class LossBreakdown:
    distortion: Tensor
    rate: Tensor
    beta: float
    alv_kl: Tensor = ZERO
    posterior_kl: Tensor = ZERO
    prior_fit: Tensor = ZERO
    prior_fit_weight: float = 1.0

    def __post_init__(self):
        self.total = (
            self.distortion
            + self.alv_kl
            + self.beta * (self.rate + self.posterior_kl)
            + self.prior_fit_weight * self.prior_fit
        )

    def as_dict(self) -> dict:
        return {
            "distortion": self.distortion.item(),
            "rate": self.rate.item(),
            "alv_kl": self.alv_kl.item(),
            "posterior_kl": self.posterior_kl.item(),
            "prior_fit": self.prior_fit.item(),
            "beta": self.beta,
            "total": self.total.item(),
        }


def _rate_to_prior(q: DiagonalGaussian, y: Tensor, prior) -> Tensor:
    """KL(q || prior): closed form for the unit Gaussian, single-sample MC otherwise."""
    if prior.kind is PriorKind.STANDARD:
        return kl_to_standard(q)
    return q.log_prob(y) - prior.log_density(y)


def _prior_fit(model: ModelBundle, y: Tensor, q: DiagonalGaussian, channel, rng) -> Tensor:
    """Maximum likelihood of the prior on detached codes.

    On a bandwidth-limited channel the in-fill conditions on received slots,
    so each conditional is fit given a noisy channel copy of the prefix.
    """
    if model.prior.kind is PriorKind.STANDARD:
        return ZERO
    y = y.detach()
    if isinstance(channel, BandwidthLimitedSpec):
        context = gaussian_transmit(y, q.mean.detach(), channel.inner, rng).detach()
        return -model.prior.conditional_log_density(y, context).mean()
    return -model.prior.log_density(y).mean()


def source_vae_loss(x, model: ModelBundle, beta: float, rng: np.random.Generator) -> LossBreakdown:
    if beta < 0:
        raise ValueError("beta must be >= 0")
    x = as_tensor(x)
    q = model.encoder(x)
    y = q.sample(rng)
    distortion = model.nll(x, y).mean()
    rate = kl_to_standard(q).mean()
    return LossBreakdown(distortion, rate, beta)


def _transmit_gaussian(q: DiagonalGaussian, y: Tensor, channel: GaussianChannelSpec, rng) -> Tensor:
    return gaussian_transmit(y, q.mean, channel, rng)


def joint_loss(
    x,
    model: ModelBundle,
    channel,
    beta: float,
    rng: np.random.Generator,
    posterior: PosteriorMode = PosteriorMode.ENCODER_CHANNEL,
    prior_fit_weight: float = 1.0,
) -> LossBreakdown:
    x = as_tensor(x)
    posterior = PosteriorMode(posterior)
    e = model.encoder(x)
    if posterior is PosteriorMode.INFERENCE_NET:
        if model.inference is None:
            raise ValueError("inference_net posterior requires model.inference")
        q = model.inference(x)
    else:
        q = e
    y = q.sample(rng)

    def recon(out: ChannelOutput) -> Tensor:
        return model.nll(x, out.z).mean()

    if isinstance(channel, GaussianChannelSpec):
        z = _transmit_gaussian(q, y, channel, rng)
        distortion = recon(ChannelOutput(z))
        # log Q(y,z|x) - log E(y|x)C(z|y); the channel factor is shared by both
        log_c = gaussian_channel_log_density(z, y, q.mean, channel)
        posterior_kl = ((q.log_prob(y) + log_c) - (e.log_prob(y) + log_c)).mean()
    elif isinstance(channel, BandwidthLimitedSpec):
        distortion = marginalize_bandwidth(y, q.mean, channel, recon, rng)
        posterior_kl = (q.log_prob(y) - e.log_prob(y)).mean()
    else:
        raise TypeError(f"unsupported channel {type(channel).__name__}")

    if posterior is PosteriorMode.ENCODER_CHANNEL:
        rate = _rate_to_prior(e, y, model.prior).mean()
    else:
        rate = ZERO
    return LossBreakdown(
        distortion, rate, beta,
        posterior_kl=posterior_kl,
        prior_fit=_prior_fit(model, y, q, channel, rng),
        prior_fit_weight=prior_fit_weight,
    )


def alv_loss(
    x,
    model: ModelBundle,
    channel,
    beta: float,
    rng: np.random.Generator,
    prior_fit_weight: float = 1.0,
) -> LossBreakdown:
    """Joint loss with the reconstruction term replaced by its ALV lower bound."""
    if model.alv is None:
        raise ValueError("alv_loss requires ALV components")
    x = as_tensor(x)
    e = model.encoder(x)
    y = e.sample(rng)

    def recon(out: ChannelOutput):
        v, kl_v = alv_infer(x, y, out.z, model.alv, rng)
        return model.nll(x, out.z, v).mean(), kl_v.mean()

    if isinstance(channel, GaussianChannelSpec):
        distortion, alv_kl = recon(ChannelOutput(_transmit_gaussian(e, y, channel, rng)))
    elif isinstance(channel, BandwidthLimitedSpec):
        distortion, alv_kl = marginalize_bandwidth(y, e.mean, channel, recon, rng)
    else:
        raise TypeError(f"unsupported channel {type(channel).__name__}")
    rate = _rate_to_prior(e, y, model.prior).mean()
    return LossBreakdown(
        distortion, rate, beta,
        alv_kl=alv_kl,
        prior_fit=_prior_fit(model, y, e, channel, rng),
        prior_fit_weight=prior_fit_weight,
    )


def channel_ae_loss(y_prior, pair, channel, rng) -> Tensor:
    """Mean squared L2 distance between prior codes and their channel reconstructions."""
    from .models import channel_code

    y_prior = as_tensor(y_prior)
    return (channel_code(y_prior, pair, channel, rng) - y_prior).square().sum(axis=1).mean()


# ---------------------------------------------------------------------------
# estimators


@dataclass
class RateReport:
    distortion: float
    rate: float
    transmission: float

    def bits(self) -> "RateReport":
        return RateReport(self.distortion / math.log(2), self.rate / math.log(2), self.transmission / math.log(2))


def rate_estimators(
    x,
    model,
    channel=None,
    rng: Optional[np.random.Generator] = None,
    bandwidth: Optional[int] = None,
) -> RateReport:
    """Monte Carlo estimates of D, R and T (nats) with the prior as marginal model.

    ``model`` needs ``encoder(x) -> DiagonalGaussian``, ``nll(x, z)`` and
    ``prior.log_density(y)``. With ``channel=None`` the code is decoded
    directly and T is NaN. For a bandwidth-limited channel ``bandwidth``
    fixes B; T uses the B-conditional channel density, in which prior-filled
    slots cancel against the marginal.
    """
    x = as_tensor(x)
    q = model.encoder(x)
    y = q.sample(rng)
    rate = (q.log_prob(y) - model.prior.log_density(y)).data.mean()

    def distortion(z) -> float:
        # with auxiliary latents, D is the variational upper bound on -log D(x|z)
        if getattr(model, "alv", None) is None:
            return float(model.nll(x, z).data.mean())
        v, kl_v = alv_infer(x, y, z, model.alv, rng)
        return float((model.nll(x, z, v) + kl_v).data.mean())

    if channel is None:
        return RateReport(distortion(y), float(rate), float("nan"))
    if isinstance(channel, GaussianChannelSpec):
        z = gaussian_transmit(y, q.mean, channel, rng)
        log_c = gaussian_channel_log_density(z, y, q.mean, channel)
        log_n = model.prior.log_density(z)
        transmission = (log_c - log_n).data.mean()
    elif isinstance(channel, BandwidthLimitedSpec):
        if bandwidth is None:
            raise ValueError("bandwidth-limited estimators need a fixed bandwidth")
        out = bandwidth_transmit(y, q.mean, bandwidth, channel, rng, with_densities=True)
        z = out.z
        transmission = 0.0
        for t in range(bandwidth):
            log_n_t = model.prior.slot_log_density(z, t)
            transmission = transmission + (out.slot_log_densities[t] - log_n_t).data
        transmission = float(np.mean(transmission))
    elif callable(getattr(channel, "transmit", None)):
        z, log_c = channel.transmit(y, q, rng)
        transmission = (as_tensor(log_c) - model.prior.log_density(z)).data.mean()
    else:
        raise TypeError(f"unsupported channel {type(channel).__name__}")
    return RateReport(distortion(z), float(rate), float(transmission))
