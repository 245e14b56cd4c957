"""Backend selection for the hot kernels.

The compiled Cython module is used when it imports; otherwise the numpy
fallback is used. ``DDP_KERNELS=python`` forces the fallback and
``DDP_KERNELS=compiled`` makes a missing extension an import error.
"""

import contextlib
import os

import numpy as np

from . import _kernels_py

_choice = os.environ.get("DDP_KERNELS", "auto").lower()
_compiled = None
if _choice != "python":
    try:
        from . import _kernels as _compiled
    except ImportError:
        if _choice == "compiled":
            raise
        _compiled = None

BACKEND = "compiled" if _compiled is not None else "python"


def get_backend(name=None):
    """Return the kernel module for ``name`` ("compiled", "python" or None for default)."""
    name = name or BACKEND
    if name == "python":
        return _kernels_py
    if name == "compiled":
        if _compiled is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        return _CompiledAdapter
    raise ValueError(f"unknown kernel backend {name!r}")


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


class _CompiledAdapter:
    """Normalises layouts before calling into the extension."""

    @staticmethod
    def prompted_attention_fwd(q, kv, prompt, N, H, scale):
        return _compiled.prompted_attention_fwd(_c(q), _c(kv), _c(prompt), int(N), int(H), float(scale))

    @staticmethod
    def prompted_attention_bwd(q, kv, prompt, probs, dctx, H, scale, need_dqkv):
        return _compiled.prompted_attention_bwd(
            _c(q), _c(kv), _c(prompt), _c(probs), _c(dctx), int(H), float(scale), bool(need_dqkv)
        )

    @staticmethod
    def layer_norm_fwd(x, gamma, beta, eps):
        y, xhat, rstd = _compiled.layer_norm_fwd(_c(x), _c(gamma), _c(beta), float(eps))
        return y, xhat, rstd

    @staticmethod
    def layer_norm_bwd(dy, xhat, rstd, gamma):
        return _compiled.layer_norm_bwd(_c(dy), _c(xhat), _c(rstd), _c(gamma))

    # elementwise exp is already vectorised in numpy; a scalar loop loses
    gelu_fwd = staticmethod(_kernels_py.gelu_fwd)
    gelu_bwd = staticmethod(_kernels_py.gelu_bwd)


K = get_backend()


def set_backend(name):
    """Switch the process-wide kernel backend; returns the previous name."""
    global K, BACKEND
    previous = BACKEND
    K = get_backend(name)
    BACKEND = name
    return previous


@contextlib.contextmanager
def backend(name):
    previous = set_backend(name)
    try:
        yield K
    finally:
        set_backend(previous)
