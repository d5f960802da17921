"""Kernel backend selection.

The compiled core (`phasediff._kernels._core`, built from Cython) is used
when it imported cleanly and the arrays are 64-bit; otherwise the numpy
reference implementation runs.  Set PHASEDIFF_KERNELS=python to force the
fallback, =cython to require the extension.

Both backends implement identical math on identical cache layouts, so they
are interchangeable mid-pipeline; results agree to float rounding (see
tests/test_kernels.py), and each backend is bit-reproducible run to run.
"""

from __future__ import annotations

import os

import numpy as np

from . import pyref
from .pyref import (
    GRU_PARAMS,
    MLP_PARAMS,
    WNET_PARAMS,
    proj_backward,
    proj_forward,
    proj_jvp,
    sigmoid,
    softmax_rows,
    softplus,
    wnet_forward,
    wnet_grad_w,
)

_MODE = os.environ.get("PHASEDIFF_KERNELS", "auto").lower()
_core = None
if _MODE in ("auto", "cython"):
    try:
        import importlib

        _core = importlib.import_module(__name__ + "._core")
    except ImportError:
        _core = None
        if _MODE == "cython":
            raise ImportError(
                "PHASEDIFF_KERNELS=cython but the compiled core is not built; "
                "run `python setup.py build_ext --inplace`"
            )


def backend() -> str:
    """Name of the active default backend."""
    return "cython" if _core is not None else "python"


def _use_core(*arrays) -> bool:
    if _core is None:
        return False
    return all(a.dtype == np.float64 for a in arrays)


def _c64(arrays):
    return tuple(np.ascontiguousarray(a, dtype=np.float64) for a in arrays)


def gru_forward(x, params):
    if _use_core(x):
        return _core.gru_forward(np.ascontiguousarray(x), _c64(params))
    return pyref.gru_forward(x, params)


def gru_backward(cache, params, dh_up):
    if _use_core(cache[0], dh_up):
        return _core.gru_backward(_c64(cache), _c64(params), np.ascontiguousarray(dh_up))
    return pyref.gru_backward(cache, params, dh_up)


def gru_jvp(cache, params, dparams):
    if _use_core(cache[0]):
        return _core.gru_jvp(_c64(cache), _c64(params), _c64(dparams))
    return pyref.gru_jvp(cache, params, dparams)


def mlp_forward(u, tfrac, params):
    if _use_core(u):
        return _core.mlp_forward(np.ascontiguousarray(u), np.ascontiguousarray(tfrac), _c64(params))
    return pyref.mlp_forward(u, tfrac, params)


def mlp_backward(cache, params, dout):
    if _use_core(cache[0], dout):
        return _core.mlp_backward(_c64(cache), _c64(params), np.ascontiguousarray(dout))
    return pyref.mlp_backward(cache, params, dout)


def mlp_jvp(cache, params, dparams, du):
    if _use_core(cache[0]):
        return _core.mlp_jvp(_c64(cache), _c64(params), _c64(dparams), np.ascontiguousarray(du))
    return pyref.mlp_jvp(cache, params, dparams, du)


def reverse_chain(z, mlp_params, tfracs, marg, pair, noise_init, noise_steps):
    if _use_core(z, noise_init):
        return _core.reverse_chain(
            np.ascontiguousarray(z),
            _c64(mlp_params),
            np.ascontiguousarray(tfracs, dtype=np.float64),
            np.ascontiguousarray(marg, dtype=np.float64),
            np.ascontiguousarray(pair, dtype=np.float64),
            np.ascontiguousarray(noise_init),
            np.ascontiguousarray(noise_steps),
        )
    return pyref.reverse_chain(z, mlp_params, tfracs, marg, pair, noise_init, noise_steps)
