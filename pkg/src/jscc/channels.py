"""Differentiable channel models.

* Gaussian channel at fixed SNR ``s``: ``z = y + (|mu_y| / s) * w``, ``w ~ N(0, 1)``.
* Bandwidth-limited channel: the code is split into ``T`` ordered slots; the
  first ``B`` pass the inner channel and the rest are filled with samples
  from a prior over codes. ``B`` is a latent variable with distribution
  ``P(B)`` that is summed out exactly or sampled.
* Relaxed binary symmetric channel driven by Binary Concrete noise.

The prior passed to the bandwidth-limited channel is duck-typed; it must
provide ``sample_slot_tensor(t, prefix, rng)`` and ``slot_log_density(z, t)``
(see :class:`jscc.models.PriorModel`).
"""
from __future__ import annotations

import enum
import math
from collections import Counter
from dataclasses import dataclass
from typing import Any, Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .distributions import LOG_2PI, BinaryConcrete, binary_concrete_log_density, binary_concrete_sample

# ---------------------------------------------------------------------------
# Gaussian channel


@dataclass(frozen=True)
class GaussianChannelSpec:
    snr: float

    def __post_init__(self):
        if not self.snr > 0:
            raise ValueError(f"snr must be positive, got {self.snr}")


def gaussian_transmit(
    y_sample, y_mean, spec: GaussianChannelSpec, rng: Optional[np.random.Generator], noise: Optional[np.ndarray] = None
) -> Tensor:
    y_sample, y_mean = as_tensor(y_sample), as_tensor(y_mean)
    if y_sample.shape != y_mean.shape:
        raise ad.ShapeError(f"gaussian_transmit: sample shape {y_sample.shape} != mean shape {y_mean.shape}")
    if noise is None:
        noise = rng.standard_normal(y_sample.shape)
    return y_sample + y_mean.abs() * (np.asarray(noise, dtype=np.float64) / spec.snr)


def gaussian_channel_log_density(z, y_sample, y_mean, spec: GaussianChannelSpec) -> Tensor:
    """``log C(z | y)`` summed over the last axis."""
    z, y_sample, y_mean = as_tensor(z), as_tensor(y_sample), as_tensor(y_mean)
    log_sigma = ad.log(y_mean.abs()) - math.log(spec.snr)
    r = (z - y_sample) * (-log_sigma).exp()
    return (-0.5 * r.square() - log_sigma - 0.5 * LOG_2PI).sum(axis=-1)


def gaussian_capacity(s: float) -> float:
    """Capacity of the power-limited Gaussian channel in bits per transmission."""
    if s < 0:
        raise ValueError("snr must be non-negative")
    return 0.5 * math.log2(1.0 + s)


# ---------------------------------------------------------------------------
# bandwidth-limited channel


@dataclass(frozen=True)
class BandwidthPartition:
    n: int
    boundaries: Tuple[int, ...]

    def __post_init__(self):
        b = tuple(int(v) for v in self.boundaries)
        object.__setattr__(self, "boundaries", b)
        if len(b) < 2 or b[0] != 0 or b[-1] != self.n:
            raise ValueError(f"boundaries {b} must start at 0 and end at n={self.n}")
        if any(hi <= lo for lo, hi in zip(b, b[1:])):
            raise ValueError(f"boundaries {b} must be strictly increasing")

    @classmethod
    def equal(cls, n: int, num_slots: int) -> "BandwidthPartition":
        if num_slots < 1 or n % num_slots:
            raise ValueError(f"cannot split {n} dims into {num_slots} equal slots")
        step = n // num_slots
        return cls(n, tuple(range(0, n + 1, step)))

    @property
    def num_slots(self) -> int:
        return len(self.boundaries) - 1

    @property
    def slots(self) -> List[Tuple[int, int]]:
        return list(zip(self.boundaries[:-1], self.boundaries[1:]))

    def slot_of(self, index: int) -> int:
        if not 0 <= index < self.n:
            raise IndexError(index)
        return int(np.searchsorted(self.boundaries, index, side="right")) - 1


class Marginalization(str, enum.Enum):
    FULL_SUM = "full_sum"
    MONTE_CARLO = "monte_carlo"


@dataclass
class BandwidthLimitedSpec:
    partition: BandwidthPartition
    bandwidth_probs: Sequence[float]
    inner: GaussianChannelSpec
    prior: Any
    mode: Marginalization = Marginalization.FULL_SUM
    n_samples: int = 1

    def __post_init__(self):
        p = np.asarray(self.bandwidth_probs, dtype=np.float64)
        if p.shape != (self.partition.num_slots + 1,):
            raise ValueError(f"bandwidth_probs needs {self.partition.num_slots + 1} entries, got {p.shape}")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("bandwidth_probs must be non-negative and sum to 1")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        self.bandwidth_probs = p
        self.mode = Marginalization(self.mode)

    @property
    def num_slots(self) -> int:
        return self.partition.num_slots


def uniform_bandwidth(num_slots: int, include_zero: bool = False) -> np.ndarray:
    p = np.ones(num_slots + 1)
    if not include_zero:
        p[0] = 0.0
    return p / p.sum()


def point_bandwidth(num_slots: int, bandwidth: int) -> np.ndarray:
    p = np.zeros(num_slots + 1)
    p[bandwidth] = 1.0
    return p


@dataclass
class ChannelOutput:
    z: Tensor
    bandwidth: Optional[int] = None
    prior_filled: Tuple[bool, ...] = ()
    slot_log_densities: Optional[List[Tensor]] = None


def bandwidth_transmit(
    y_sample,
    y_mean,
    bandwidth: int,
    spec: BandwidthLimitedSpec,
    rng: np.random.Generator,
    with_densities: bool = False,
) -> ChannelOutput:
    """Send slots ``0..B-1`` through the inner channel and fill the rest from the prior.

    Prior in-fill is a reparameterised draw, slot by slot, conditioned on
    everything to its left, so gradients reach the prior and the sent prefix.
    Filled slots are not passed through the noisy channel.
    """
    y_sample, y_mean = as_tensor(y_sample), as_tensor(y_mean)
    T = spec.num_slots
    if not 0 <= bandwidth <= T:
        raise ValueError(f"bandwidth {bandwidth} outside 0..{T}")
    if y_sample.shape[-1] != spec.partition.n:
        raise ad.ShapeError(f"bandwidth_transmit: code width {y_sample.shape[-1]} != partition n={spec.partition.n}")
    slots = spec.partition.slots
    cut = spec.partition.boundaries[bandwidth]
    parts: List[Tensor] = []
    densities: List[Tensor] = []
    if bandwidth > 0:
        ys, ym = y_sample[:, :cut], y_mean[:, :cut]
        sent = gaussian_transmit(ys, ym, spec.inner, rng)
        parts.append(sent)
        if with_densities:
            for lo, hi in slots[:bandwidth]:
                densities.append(
                    gaussian_channel_log_density(sent[:, lo:hi], ys[:, lo:hi], ym[:, lo:hi], spec.inner)
                )
    for t in range(bandwidth, T):
        prefix = parts[0] if len(parts) == 1 else (ad.concat(parts, axis=1) if parts else Tensor(np.zeros((y_sample.shape[0], 0))))
        parts.append(spec.prior.sample_slot_tensor(t, prefix, rng))
    z = parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)
    if with_densities:
        for t in range(bandwidth, T):
            densities.append(spec.prior.slot_log_density(z, t))
    flags = tuple(t >= bandwidth for t in range(T))
    return ChannelOutput(z=z, bandwidth=bandwidth, prior_filled=flags, slot_log_densities=densities or None)


def bandwidth_log_density(z, y_sample, y_mean, spec: BandwidthLimitedSpec) -> np.ndarray:
    """``log C(z | y) = log sum_B P(B) C(z | B, y)`` per row (numpy, no gradient)."""
    z, y_sample, y_mean = as_tensor(z), as_tensor(y_sample), as_tensor(y_mean)
    slots = spec.partition.slots
    T = spec.num_slots
    channel_terms = np.stack(
        [
            gaussian_channel_log_density(z[:, lo:hi], y_sample[:, lo:hi], y_mean[:, lo:hi], spec.inner).data
            for lo, hi in slots
        ]
    )
    prior_terms = np.stack([spec.prior.slot_log_density(z, t).data for t in range(T)])
    rows = []
    for b, pb in enumerate(spec.bandwidth_probs):
        if pb == 0:
            continue
        rows.append(math.log(pb) + channel_terms[:b].sum(axis=0) + prior_terms[b:].sum(axis=0))
    return logsumexp(np.stack(rows), axis=0)


Estimate = Union[Tensor, Tuple[Tensor, ...]]


def _combine(acc, value, weight):
    if isinstance(value, tuple):
        if acc is None:
            return tuple(v * weight for v in value)
        return tuple(a + v * weight for a, v in zip(acc, value))
    return value * weight if acc is None else acc + value * weight


def marginalize_bandwidth(
    y_sample,
    y_mean,
    spec: BandwidthLimitedSpec,
    integrand: Callable[[ChannelOutput], Estimate],
    rng: np.random.Generator,
    with_densities: bool = False,
    return_terms: bool = False,
):
    """Expectation of ``integrand`` over ``B ~ P(B)`` and the channel noise.

    FULL_SUM weights one channel draw per supported ``B`` by ``P(B)``;
    MONTE_CARLO averages over ``spec.n_samples`` draws of ``B``. The
    integrand may return a tensor or a tuple of tensors.
    """
    terms = []
    acc = None
    if spec.mode is Marginalization.FULL_SUM:
        for b, pb in enumerate(spec.bandwidth_probs):
            if pb == 0:
                continue
            value = integrand(bandwidth_transmit(y_sample, y_mean, b, spec, rng, with_densities))
            terms.append((b, float(pb), value))
            acc = _combine(acc, value, float(pb))
    else:
        k = spec.n_samples
        draws = rng.choice(len(spec.bandwidth_probs), size=k, p=spec.bandwidth_probs)
        for b in draws:
            value = integrand(bandwidth_transmit(y_sample, y_mean, int(b), spec, rng, with_densities))
            terms.append((int(b), 1.0 / k, value))
            acc = _combine(acc, value, 1.0 / k)
    return (acc, terms) if return_terms else acc


# ---------------------------------------------------------------------------
# relaxed binary symmetric channel

SINGULAR_INPUT_MARGIN = 1e-6
clamp_events: Counter = Counter()


@dataclass(frozen=True)
class RelaxedBinarySpec:
    keep_prob: float
    noise_temperature: float = 0.5
    input_temperature: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.keep_prob < 1.0:
            raise ValueError("keep_prob must lie in (0, 1)")
        if not (self.noise_temperature > 0 and self.input_temperature > 0):
            raise ValueError("temperatures must be positive")


def _clamp_away_from_half(y: Tensor) -> Tensor:
    gap = y.data - 0.5
    bad = np.abs(gap) < SINGULAR_INPUT_MARGIN
    if not np.any(bad):
        return y
    clamp_events["relaxed_binary_singular_input"] += int(bad.sum())
    target = np.where(bad, 0.5 + np.where(gap < 0, -1.0, 1.0) * SINGULAR_INPUT_MARGIN, y.data)
    return y + Tensor(target - y.data)


def relaxed_binary_transform(y, w) -> Tensor:
    """``z = (2w - 1) / (2 (2y - 1)) + 1/2``."""
    y = _clamp_away_from_half(as_tensor(y))
    return (2.0 * as_tensor(w) - 1.0) / (2.0 * (2.0 * y - 1.0)) + 0.5


def relaxed_binary_transmit(
    y, spec: RelaxedBinarySpec, rng: Optional[np.random.Generator], logistic: Optional[np.ndarray] = None
) -> Tensor:
    y = as_tensor(y)
    log_alpha = math.log(spec.keep_prob) - math.log1p(-spec.keep_prob)
    noise = BinaryConcrete(Tensor(np.full(y.shape, log_alpha)), spec.noise_temperature)
    _, w = binary_concrete_sample(noise, rng, logistic)
    return relaxed_binary_transform(y, w)


def noise_argument(z, y) -> np.ndarray:
    """The keep-noise value ``w = (2z - 1)(2y - 1)/2 + 1/2`` that maps ``y`` to ``z``."""
    z, y = np.asarray(z, dtype=np.float64), np.asarray(y, dtype=np.float64)
    return (2.0 * z - 1.0) * (2.0 * y - 1.0) / 2.0 + 0.5


def relaxed_binary_density(z, y, spec: RelaxedBinarySpec, jacobian: bool = False) -> np.ndarray:
    """Log-density of the channel noise at the argument that maps ``y`` to ``z``.

    By default this is the pre-sigmoid Binary Concrete log-density at
    ``logit(w)``. With ``jacobian=True`` the change-of-variables terms are
    added so the result is a normalised log-density over ``z``.
    """
    w = noise_argument(z, y)
    if np.any((w <= 0.0) | (w >= 1.0)):
        raise ValueError("relaxed_binary_density: transformed argument outside (0, 1)")
    u = np.log(w) - np.log1p(-w)
    log_alpha = math.log(spec.keep_prob) - math.log1p(-spec.keep_prob)
    out = binary_concrete_log_density(u, log_alpha, spec.noise_temperature).data
    if jacobian:
        y = np.asarray(y, dtype=np.float64)
        out = out - np.log(w) - np.log1p(-w) + np.log(np.abs(2.0 * y - 1.0))
    return out


def binary_snr(p: float, p_y: float) -> float:
    """SNR of the binary channel for keep-probability ``p`` and input bias ``p_y``.

    Evaluates ``(2 p p_y + 0.5 - p - p_y) / (-2 p_y p - 0.5 - p - p_y)``.
    The numerator is grouped as ``(2 p p_y - p_y) + (0.5 - p)`` so that it
    cancels exactly at ``p = 0.5``.
    """
    numerator = (2.0 * p * p_y - p_y) + (0.5 - p)
    denominator = -2.0 * p_y * p - 0.5 - p - p_y
    return numerator / denominator + 0.0
