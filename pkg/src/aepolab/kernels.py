"""Numeric kernel dispatch.

The compiled extension ``aepolab._ckernels`` is used when it imports;
otherwise the numpy versions in :mod:`aepolab._kernels_py` are used.  Set
``AEPOLAB_KERNELS=python`` to force the fallback.  Kernels listed in
``NUMPY_FASTER`` are dominated by transcendental functions that numpy
evaluates with vectorized routines; the scalar compiled loops measured slower
(``benchmarks/bench_kernels.py``), so they always dispatch to numpy.
"""

import os

from aepolab import _kernels_py

_names = (
    "gelu_forward",
    "gelu_backward",
    "layer_norm_forward",
    "layer_norm_backward",
    "log_softmax",
    "attention_forward",
    "attention_backward",
    "attention_decode",
    "nucleus_sample",
)

NUMPY_FASTER = ("gelu_forward", "log_softmax", "attention_backward")


def _load():
    if os.environ.get("AEPOLAB_KERNELS", "").lower() in ("python", "py", "numpy"):
        return _kernels_py, "python"
    try:
        from aepolab import _ckernels
    except ImportError:
        return _kernels_py, "python"
    return _ckernels, "cython"


_impl, BACKEND = _load()


def _pick(name: str):
    impl = _kernels_py if name in NUMPY_FASTER else _impl
    return getattr(impl, name)


gelu_forward = _pick("gelu_forward")
gelu_backward = _pick("gelu_backward")
layer_norm_forward = _pick("layer_norm_forward")
layer_norm_backward = _pick("layer_norm_backward")
log_softmax = _pick("log_softmax")
attention_forward = _pick("attention_forward")
attention_backward = _pick("attention_backward")
attention_decode = _pick("attention_decode")
nucleus_sample = _pick("nucleus_sample")

__all__ = ["BACKEND", *_names]
