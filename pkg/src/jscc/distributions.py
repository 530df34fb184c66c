"""Reparameterised distributions: diagonal Gaussian and Binary Concrete.

Binary Concrete samples are drawn as ``y = (L + log_alpha) / T`` with
``L`` standard logistic, and ``x = sigmoid(y)``. Densities are evaluated on
``y`` (before the sigmoid) to avoid underflow when ``x`` saturates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor

LOG_2PI = math.log(2.0 * math.pi)
UNIFORM_CLAMP = 1e-12

ArrayLike = Union[Tensor, np.ndarray, float]


@dataclass
class DiagonalGaussian:
    mean: Tensor
    log_std: Tensor

    def __post_init__(self):
        self.mean = as_tensor(self.mean)
        self.log_std = as_tensor(self.log_std)
        if self.mean.shape != self.log_std.shape:
            raise ad.ShapeError(
                f"DiagonalGaussian: mean shape {self.mean.shape} != log_std shape {self.log_std.shape}"
            )

    @classmethod
    def standard(cls, shape) -> "DiagonalGaussian":
        return cls(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))

    @property
    def shape(self):
        return self.mean.shape

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std.data)

    def sample(self, rng: np.random.Generator, eps: Optional[np.ndarray] = None) -> Tensor:
        return gaussian_sample(self, rng, eps)

    def log_prob(self, x: ArrayLike) -> Tensor:
        return gaussian_log_density(self, x)

    def detach(self) -> "DiagonalGaussian":
        return DiagonalGaussian(self.mean.detach(), self.log_std.detach())


def gaussian_sample(d: DiagonalGaussian, rng: Optional[np.random.Generator], eps: Optional[np.ndarray] = None) -> Tensor:
    if eps is None:
        eps = rng.standard_normal(d.shape)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != d.shape:
        raise ad.ShapeError(f"gaussian_sample: noise shape {eps.shape} != {d.shape}")
    return d.mean + d.log_std.exp() * eps


def gaussian_log_density(d: DiagonalGaussian, x: ArrayLike) -> Tensor:
    """Log-density summed over the last axis."""
    x = as_tensor(x)
    z = (x - d.mean) * (-d.log_std).exp()
    per_dim = -0.5 * z.square() - d.log_std - 0.5 * LOG_2PI
    return per_dim.sum(axis=-1)


def gaussian_kl_diag(q: DiagonalGaussian, p: DiagonalGaussian) -> Tensor:
    """KL(q || p) summed over the last axis."""
    if q.shape != p.shape and np.broadcast_shapes(q.shape, p.shape) != q.shape:
        raise ad.ShapeError(f"gaussian_kl_diag: shapes {q.shape} and {p.shape}")
    var_ratio = (2.0 * (q.log_std - p.log_std)).exp()
    mean_term = ((q.mean - p.mean) * (-p.log_std).exp()).square()
    per_dim = 0.5 * (var_ratio + mean_term) - 0.5 - (q.log_std - p.log_std)
    return per_dim.sum(axis=-1)


def kl_to_standard(q: DiagonalGaussian) -> Tensor:
    """KL(q || N(0, I)) summed over the last axis."""
    per_dim = 0.5 * ((2.0 * q.log_std).exp() + q.mean.square()) - 0.5 - q.log_std
    return per_dim.sum(axis=-1)


# ---------------------------------------------------------------------------
# logistic / Binary Concrete

def logistic_from_uniform(u: np.ndarray) -> np.ndarray:
    u = np.clip(np.asarray(u, dtype=np.float64), UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP)
    return np.log(u) - np.log1p(-u)


def logistic_sample(rng: np.random.Generator, shape=()) -> np.ndarray:
    return logistic_from_uniform(rng.random(shape))


@dataclass
class BinaryConcrete:
    log_alpha: Tensor
    temperature: float

    def __post_init__(self):
        self.log_alpha = as_tensor(self.log_alpha)
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")

    @classmethod
    def from_probability(cls, p: float, temperature: float) -> "BinaryConcrete":
        return cls(Tensor(math.log(p) - math.log1p(-p)), temperature)

    def sample(self, rng, logistic: Optional[np.ndarray] = None) -> Tuple[Tensor, Tensor]:
        return binary_concrete_sample(self, rng, logistic)

    def log_prob(self, y_pre: ArrayLike) -> Tensor:
        return binary_concrete_log_density(y_pre, self.log_alpha, self.temperature)


def binary_concrete_sample(
    b: BinaryConcrete, rng: Optional[np.random.Generator], logistic: Optional[np.ndarray] = None
) -> Tuple[Tensor, Tensor]:
    """Returns ``(y_pre, x_post)``; both differentiable in ``log_alpha``."""
    if logistic is None:
        logistic = logistic_sample(rng, b.log_alpha.shape)
    y_pre = (b.log_alpha + np.asarray(logistic, dtype=np.float64)) * (1.0 / b.temperature)
    return y_pre, ad.sigmoid(y_pre)


def binary_concrete_log_density(y: ArrayLike, log_alpha: ArrayLike, temperature: float) -> Tensor:
    """Elementwise log-density of the pre-sigmoid variable.

    ``log T - T*y + log_alpha - 2*softplus(-T*y + log_alpha)``
    """
    y, log_alpha = as_tensor(y), as_tensor(log_alpha)
    a = log_alpha - temperature * y
    return math.log(temperature) + a - 2.0 * ad.softplus(a)


def binary_concrete_log_density_post_sigmoid(
    x: ArrayLike, log_alpha: ArrayLike, temperature: float, clip: float = 1e-6
) -> Tensor:
    """Log-density in ``x = sigmoid(y)`` space with ``x`` clipped into ``[clip, 1-clip]``.

    Prefer :func:`binary_concrete_log_density`; this variant loses precision
    as ``x`` saturates.
    """
    x = as_tensor(x)
    xc = x + Tensor(np.clip(x.data, clip, 1.0 - clip) - x.data)
    y = ad.log(xc) - ad.log(1.0 - xc)
    return binary_concrete_log_density(y, log_alpha, temperature) - ad.log(xc) - ad.log(1.0 - xc)
