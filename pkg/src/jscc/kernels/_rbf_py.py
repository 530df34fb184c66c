"""Pure numpy fallback for the compiled kernel sums in ``_rbf.pyx``."""
import numpy as np

_BLOCK = 64


def rbf_sum(a, b, gamma, exclude_diagonal=False):
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise ValueError("dimension mismatch")
    total = 0.0
    for start in range(0, a.shape[0], _BLOCK):
        blk = a[start:start + _BLOCK]
        diff = blk[:, None, :] - b[None, :, :]
        k = np.exp(-gamma * np.einsum("ijk,ijk->ij", diff, diff))
        if exclude_diagonal:
            rows = np.arange(blk.shape[0])
            cols = rows + start
            keep = cols < b.shape[0]
            k[rows[keep], cols[keep]] = 0.0
        total += k.sum()
    return float(total)


def pairwise_sq_dists(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    diff = a[:, None, :] - a[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    iu = np.triu_indices(a.shape[0], k=1)
    return d2[iu]
