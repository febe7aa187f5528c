"""Numeric kernel backend selection.

The hot inner kernels exist twice: numba-compiled loops (numba_ops) and a
pure-numpy reference (numpy_ops).  The AGCM_KERNELS environment variable
picks the backend at import time:

    AGCM_KERNELS=numba   force the numba backend (error if numba is missing)
    AGCM_KERNELS=numpy   force the pure-numpy fallback
    unset                numba when importable, numpy otherwise

Both backends are single-threaded and bit-deterministic per backend; see
benchmarks/bench_kernels.py for a side-by-side timing comparison.
"""

import os

_KERNEL_NAMES = [
    "leaky_relu_fwd",
    "leaky_relu_bwd",
    "softmax_fwd",
    "softmax_bwd",
    "layernorm_fwd",
    "layernorm_bwd",
    "window_mean_fwd",
    "window_mean_bwd",
    "block_mean",
    "bce_fwd",
    "bce_bwd",
    "adam_step",
    "disk_union_map",
]

__all__ = _KERNEL_NAMES + ["backend_name", "get_backends"]


def _load(choice):
    if choice == "numpy":
        from . import numpy_ops as mod
        return "numpy", mod
    if choice == "numba":
        from . import numba_ops as mod
        return "numba", mod
    # auto
    try:
        from . import numba_ops as mod
        return "numba", mod
    except ImportError:
        from . import numpy_ops as mod
        return "numpy", mod


_choice = os.environ.get("AGCM_KERNELS", "auto").strip().lower()
if _choice not in ("auto", "numba", "numpy"):
    raise RuntimeError(f"AGCM_KERNELS must be 'numba' or 'numpy', got {_choice!r}")

_BACKEND, _mod = _load(_choice)
for _name in _KERNEL_NAMES:
    globals()[_name] = getattr(_mod, _name)


def backend_name():
    """Name of the active kernel backend ('numba' or 'numpy')."""
    return _BACKEND


def get_backends():
    """Both backend modules keyed by name, for equivalence tests and benchmarks."""
    out = {}
    from . import numpy_ops
    out["numpy"] = numpy_ops
    try:
        from . import numba_ops
        out["numba"] = numba_ops
    except ImportError:
        pass
    return out
