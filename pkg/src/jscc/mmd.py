"""Unbiased squared MMD with a Gaussian kernel.

Used as a self-contained sample-quality proxy: it compares reconstructions
with held-out source images directly in pixel space. It is not FID.
"""
from __future__ import annotations

from typing import Optional, Union

import numpy as np

from . import kernels


def median_heuristic(a: np.ndarray, b: np.ndarray) -> float:
    """Median pairwise Euclidean distance over the pooled samples."""
    pooled = np.ascontiguousarray(np.vstack([a, b]), dtype=np.float64)
    med = float(np.median(np.sqrt(kernels.pairwise_sq_dists(pooled))))
    return med if med > 0 else 1.0


def mmd_statistic(samples_a, samples_b, bandwidth: Union[float, str, None] = "auto") -> float:
    """Unbiased MMD^2 with ``k(u, v) = exp(-|u - v|^2 / (2 sigma^2))``.

    For equal sample sizes the cross term also drops the paired ``i == j``
    entries (the U-statistic over pairs), so identical inputs give exactly 0.
    """
    a = np.ascontiguousarray(np.asarray(samples_a, dtype=np.float64).reshape(len(samples_a), -1))
    b = np.ascontiguousarray(np.asarray(samples_b, dtype=np.float64).reshape(len(samples_b), -1))
    m, n = len(a), len(b)
    if m < 2 or n < 2:
        raise ValueError("mmd_statistic needs at least 2 samples per side")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if bandwidth is None or bandwidth == "auto":
        sigma = median_heuristic(a, b)
    else:
        sigma = float(bandwidth)
        if not sigma > 0:
            raise ValueError("kernel bandwidth must be positive")
    gamma = 1.0 / (2.0 * sigma * sigma)
    k_aa = kernels.rbf_sum(a, a, gamma, True) / (m * (m - 1))
    k_bb = kernels.rbf_sum(b, b, gamma, True) / (n * (n - 1))
    if m == n:
        k_ab = kernels.rbf_sum(a, b, gamma, True) / (m * (m - 1))
    else:
        k_ab = kernels.rbf_sum(a, b, gamma, False) / (m * n)
    return float(k_aa + k_bb - 2.0 * k_ab)


def permutation_null(
    samples_a, samples_b, bandwidth: float, n_permutations: int, rng: np.random.Generator
) -> np.ndarray:
    """MMD^2 values under random relabelling of the pooled samples."""
    pooled = np.vstack([np.asarray(samples_a, dtype=np.float64), np.asarray(samples_b, dtype=np.float64)])
    m = len(samples_a)
    out = np.empty(n_permutations)
    for i in range(n_permutations):
        idx = rng.permutation(len(pooled))
        out[i] = mmd_statistic(pooled[idx[:m]], pooled[idx[m:]], bandwidth)
    return out
