"""Encoders, decoders, code priors, ALV components and the channel-coder pair.

All networks are small dense tanh MLPs on flattened inputs.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor, as_tensor
from .channels import BandwidthPartition, GaussianChannelSpec, gaussian_transmit
from .distributions import LOG_2PI, DiagonalGaussian, gaussian_log_density, kl_to_standard

LOG_STD_MIN, LOG_STD_MAX = -6.0, 2.0
# sigmoid(RAW_FOR_UNIT_STD) puts the squashed log-std at 0
RAW_FOR_UNIT_STD = math.log(-LOG_STD_MIN / LOG_STD_MAX)


def squash_log_std(raw: Tensor) -> Tensor:
    return LOG_STD_MIN + (LOG_STD_MAX - LOG_STD_MIN) * ad.sigmoid(raw)


class MLP:
    def __init__(self, store: ParameterStore, prefix: str, sizes: Sequence[int], zero_last: bool = False):
        self.layers = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            self.layers.append(store.dense(f"{prefix}/l{i}", a, b, zero=last and zero_last))

    def __call__(self, x) -> Tensor:
        h = as_tensor(x)
        for i, (w, b) in enumerate(self.layers):
            h = ad.affine(h, w, b)
            if i < len(self.layers) - 1:
                h = ad.tanh(h)
        return h

    @property
    def out_bias(self) -> Tensor:
        return self.layers[-1][1]


def _check_width(op: str, x: Tensor, width: int) -> None:
    if x.ndim != 2 or x.shape[1] != width:
        raise ad.ShapeError(f"{op}: expected input of shape (batch, {width}), got {x.shape}")


class EncoderNet:
    """x -> DiagonalGaussian over the latent code, slot order = transmission order."""

    def __init__(self, in_dim: int, latent_dim: int, hidden: Sequence[int] = (256, 256), seed: int = 0):
        self.in_dim, self.latent_dim = in_dim, latent_dim
        self.store = ParameterStore(seed)
        self.net = MLP(self.store, "enc", [in_dim, *hidden, 2 * latent_dim])

    def __call__(self, x) -> DiagonalGaussian:
        x = as_tensor(x)
        _check_width("encode", x, self.in_dim)
        out = self.net(x)
        return DiagonalGaussian(out[:, : self.latent_dim], squash_log_std(out[:, self.latent_dim:]))


def encode(x, enc: EncoderNet) -> DiagonalGaussian:
    return enc(x)


class DecoderNet:
    """(z[, v]) -> Gaussian over the reconstruction with fixed scale ``sigma_obs``."""

    def __init__(
        self,
        latent_dim: int,
        out_dim: int,
        hidden: Sequence[int] = (256, 256),
        v_dim: int = 0,
        sigma_obs: float = 1.0,
        seed: int = 0,
    ):
        self.latent_dim, self.out_dim, self.v_dim = latent_dim, out_dim, v_dim
        self.sigma_obs = sigma_obs
        self.store = ParameterStore(seed)
        self.net = MLP(self.store, "dec", [latent_dim + v_dim, *hidden, out_dim])

    def __call__(self, z, v=None) -> DiagonalGaussian:
        z = as_tensor(z)
        _check_width("decode", z, self.latent_dim)
        if self.v_dim:
            if v is None:
                raise ValueError("decoder expects an auxiliary latent v")
            z = ad.concat([z, as_tensor(v)], axis=1)
        mean = self.net(z)
        return DiagonalGaussian(mean, Tensor(np.full(mean.shape, math.log(self.sigma_obs))))

    def nll(self, x, z, v=None) -> Tensor:
        """Per-row ``-log D(x | z[, v])``."""
        return -self(z, v).log_prob(x)


def decode(z, dec: DecoderNet, v=None) -> DiagonalGaussian:
    return dec(z, v)


def gaussian_nll_constant(dim: int, sigma_obs: float) -> float:
    return 0.5 * dim * (LOG_2PI + 2.0 * math.log(sigma_obs))


# ---------------------------------------------------------------------------
# priors over codes


class PriorKind(str, enum.Enum):
    STANDARD = "standard"
    AUTOREGRESSIVE = "autoregressive"


class PriorModel:
    """Prior over slot-structured codes.

    STANDARD is a unit Gaussian per coordinate. AUTOREGRESSIVE gives slot
    ``t`` a Gaussian whose parameters come from a per-slot MLP applied to
    the code with slots ``>= t`` zeroed out.
    """

    def __init__(self, kind, partition: BandwidthPartition, hidden: int = 32, seed: int = 0):
        self.kind = PriorKind(kind)
        self.partition = partition
        self.store = ParameterStore(seed)
        self.nets = []
        if self.kind is PriorKind.AUTOREGRESSIVE:
            n = partition.n
            for t, (lo, hi) in enumerate(partition.slots):
                sizes = [n, hidden, 2 * (hi - lo)] if hidden else [n, 2 * (hi - lo)]
                net = MLP(self.store, f"prior/slot{t}", sizes, zero_last=True)
                net.out_bias.data[hi - lo:] = RAW_FOR_UNIT_STD
                self.nets.append(net)

    @property
    def num_slots(self) -> int:
        return self.partition.num_slots

    def _masked_input(self, z: Tensor, t: int) -> Tensor:
        lo = self.partition.boundaries[t]
        n = self.partition.n
        if lo == 0:
            return Tensor(np.zeros((z.shape[0], n)))
        if lo == n:
            return z
        return ad.concat([z[:, :lo], Tensor(np.zeros((z.shape[0], n - lo)))], axis=1)

    def slot_distribution(self, z, t: int) -> DiagonalGaussian:
        z = as_tensor(z)
        lo, hi = self.partition.slots[t]
        if self.kind is PriorKind.STANDARD:
            return DiagonalGaussian.standard((z.shape[0], hi - lo))
        out = self.nets[t](self._masked_input(z, t))
        width = hi - lo
        return DiagonalGaussian(out[:, :width], squash_log_std(out[:, width:]))

    def slot_log_density(self, z, t: int) -> Tensor:
        z = as_tensor(z)
        lo, hi = self.partition.slots[t]
        return self.slot_distribution(z, t).log_prob(z[:, lo:hi])

    def log_density(self, z) -> Tensor:
        z = as_tensor(z)
        _check_width("prior_log_density", z, self.partition.n)
        if self.kind is PriorKind.STANDARD:
            return DiagonalGaussian.standard(z.shape).log_prob(z)
        total = self.slot_log_density(z, 0)
        for t in range(1, self.num_slots):
            total = total + self.slot_log_density(z, t)
        return total

    def conditional_log_density(self, y, context) -> Tensor:
        """``sum_t log p(y_t | context_<t)``; equals ``log_density(y)`` when ``context`` is ``y``."""
        y, context = as_tensor(y), as_tensor(context)
        _check_width("conditional_log_density", y, self.partition.n)
        if self.kind is PriorKind.STANDARD:
            return DiagonalGaussian.standard(y.shape).log_prob(y)
        total = None
        for t, (lo, hi) in enumerate(self.partition.slots):
            term = self.slot_distribution(context, t).log_prob(y[:, lo:hi])
            total = term if total is None else total + term
        return total

    def sample_slot(self, t: int, prefix: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        lo, hi = self.partition.slots[t]
        prefix = np.asarray(prefix, dtype=np.float64)
        n_rows = prefix.shape[0]
        if self.kind is PriorKind.STANDARD:
            return rng.standard_normal((n_rows, hi - lo))
        padded = np.zeros((n_rows, self.partition.n))
        padded[:, :lo] = prefix[:, :lo]
        d = self.slot_distribution(Tensor(padded), t)
        return d.mean.data + d.std * rng.standard_normal(d.shape)

    def sample_slot_tensor(self, t: int, prefix: Tensor, rng: np.random.Generator) -> Tensor:
        """Reparameterised draw of slot ``t`` given the code prefix (differentiable)."""
        lo, hi = self.partition.slots[t]
        prefix = as_tensor(prefix)
        n_rows = prefix.shape[0]
        if self.kind is PriorKind.STANDARD:
            return Tensor(rng.standard_normal((n_rows, hi - lo)))
        if lo < self.partition.n:
            filler = Tensor(np.zeros((n_rows, self.partition.n - lo)))
            padded = filler if lo == 0 else ad.concat([prefix[:, :lo], filler], axis=1)
        else:
            padded = prefix
        d = self.slot_distribution(padded, t)
        return d.sample(rng)

    def sample(self, n: int, rng: np.random.Generator, given: Optional[np.ndarray] = None) -> np.ndarray:
        """Draw codes, keeping the leading columns of ``given`` fixed."""
        z = np.zeros((n, 0)) if given is None else np.asarray(given, dtype=np.float64)
        start = int(np.searchsorted(self.partition.boundaries, z.shape[1]))
        if self.partition.boundaries[start] != z.shape[1]:
            raise ValueError("given prefix must end on a slot boundary")
        for t in range(start, self.num_slots):
            z = np.concatenate([z, self.sample_slot(t, z, rng)], axis=1)
        return z


def prior_log_density(z_slots, prior: PriorModel) -> Tensor:
    return prior.log_density(z_slots)


def prior_sample(prior: PriorModel, n: int, rng: np.random.Generator) -> np.ndarray:
    return prior.sample(n, rng)


# ---------------------------------------------------------------------------
# auxiliary latent variables


class ALVComponents:
    """Posterior ``Q(V | x, z)`` (or ``Q(V | x, y, z)``) with unit Gaussian ``P(V)``.

    The decoder that consumes ``v`` is the bundle's :class:`DecoderNet`
    built with ``v_dim > 0``.
    """

    def __init__(
        self,
        x_dim: int,
        z_dim: int,
        v_dim: int,
        hidden: Sequence[int] = (256,),
        use_y: bool = False,
        seed: int = 0,
    ):
        self.x_dim, self.z_dim, self.v_dim, self.use_y = x_dim, z_dim, v_dim, use_y
        self.store = ParameterStore(seed)
        in_dim = x_dim + z_dim * (2 if use_y else 1)
        self.net = MLP(self.store, "alv_q", [in_dim, *hidden, 2 * v_dim])

    def posterior(self, x, y, z) -> DiagonalGaussian:
        parts = [as_tensor(x)] + ([as_tensor(y)] if self.use_y else []) + [as_tensor(z)]
        out = self.net(ad.concat(parts, axis=1))
        return DiagonalGaussian(out[:, : self.v_dim], squash_log_std(out[:, self.v_dim:]))

    def prior_sample(self, n: int, rng: np.random.Generator) -> Tensor:
        return Tensor(rng.standard_normal((n, self.v_dim)))


def alv_infer(x, y, z, alv: ALVComponents, rng: np.random.Generator) -> Tuple[Tensor, Tensor]:
    """Reparameterised ``v ~ Q(V|.)`` and per-row ``KL(Q || P(V))``."""
    q = alv.posterior(x, y, z)
    return q.sample(rng), kl_to_standard(q)


# ---------------------------------------------------------------------------
# separate system: deterministic channel coder


class ChannelCoderPair:
    """Deterministic residual maps ``E^C`` and ``D^C``; identity at initialisation."""

    def __init__(self, dim: int, hidden: Sequence[int] = (256,), seed: int = 0):
        self.dim = dim
        self.store = ParameterStore(seed)
        self.enc = MLP(self.store, "coder_enc", [dim, *hidden, dim], zero_last=True)
        self.dec = MLP(self.store, "coder_dec", [dim, *hidden, dim], zero_last=True)

    def encode(self, y) -> Tensor:
        y = as_tensor(y)
        _check_width("channel_encode", y, self.dim)
        return y + self.enc(y)

    def decode(self, z) -> Tensor:
        z = as_tensor(z)
        return z + self.dec(z)


def channel_code(y_prior_sample, pair: ChannelCoderPair, channel, rng: np.random.Generator) -> Tensor:
    """``D^C(channel(E^C(y')))``; the deterministic code is its own channel mean."""
    y = pair.encode(y_prior_sample)
    if isinstance(channel, GaussianChannelSpec):
        z = gaussian_transmit(y, y, channel, rng)
    else:
        z = channel(y, rng)
    return pair.decode(z)


# ---------------------------------------------------------------------------
# bundle


@dataclass
class ModelBundle:
    encoder: Optional[EncoderNet]
    decoder: Optional[DecoderNet]
    prior: Optional[PriorModel]
    alv: Optional[ALVComponents] = None
    coder: Optional[ChannelCoderPair] = None
    inference: Optional[EncoderNet] = None

    def stores(self) -> Dict[str, ParameterStore]:
        out = {}
        for name in ("encoder", "decoder", "prior", "alv", "coder", "inference"):
            part = getattr(self, name)
            if part is not None:
                out[name] = part.store
        return out

    def parameters(self) -> ParameterStore:
        return ParameterStore.merged(self.stores())

    def nll(self, x, z, v=None) -> Tensor:
        return self.decoder.nll(x, z, v)
