"""Counterfactual inference via bi-level quantile regression.

Set ``CFQUANT_THREADS`` before importing to cap BLAS/OpenMP threads; results
are bit-reproducible for a fixed thread count.
"""
import os as _os

_threads = _os.environ.get("CFQUANT_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
