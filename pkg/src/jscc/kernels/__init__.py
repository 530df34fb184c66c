"""Hot kernels: compiled Cython when available, numpy otherwise.

Set ``JSCC_PURE_PYTHON=1`` to force the numpy fallback.
"""
import os

BACKEND = "python"
if os.environ.get("JSCC_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from ._rbf import pairwise_sq_dists, rbf_sum  # noqa: F401

        BACKEND = "cython"
    except ImportError:  # extension not built
        pass
if BACKEND == "python":
    from ._rbf_py import pairwise_sq_dists, rbf_sum  # noqa: F401

from . import _rbf_py as python  # noqa: E402

__all__ = ["BACKEND", "rbf_sum", "pairwise_sq_dists", "python"]
