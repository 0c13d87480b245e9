"""Backend selection for the framing kernels.

The compiled extension is used when importable; setting
``LATMASK_PURE_PYTHON=1`` forces the numpy fallback.
"""
import os

import numpy as np

from latmask import _kernels_py

try:
    if os.environ.get("LATMASK_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure python requested")
    from latmask import _kernels as _compiled
except ImportError:
    _compiled = None

BACKEND = "cython" if _compiled is not None else "python"


def _impl(backend):
    if backend is None:
        backend = BACKEND
    if backend == "cython":
        if _compiled is None:
            raise ImportError("compiled kernels are not built")
        return _compiled
    return _kernels_py


def frame(x, size, hop, backend=None):
    """Frame the last axis of ``x``: (..., L) -> (..., T, size)."""
    x = np.asarray(x)
    lead = x.shape[:-1]
    rows = np.ascontiguousarray(x.reshape(-1, x.shape[-1]))
    out = _impl(backend).frame(rows, int(size), int(hop))
    return np.asarray(out).reshape(lead + out.shape[1:])


def overlap_add(frames, hop, length, backend=None):
    """Sum frames (..., T, size) at stride ``hop`` into (..., length)."""
    frames = np.asarray(frames)
    t, size = frames.shape[-2:]
    if t and length < (t - 1) * hop + size:
        raise ValueError(f"length {length} too short for {t} frames of {size} at hop {hop}")
    lead = frames.shape[:-2]
    rows = np.ascontiguousarray(frames.reshape((-1,) + frames.shape[-2:]))
    out = _impl(backend).overlap_add(rows, int(hop), int(length))
    return np.asarray(out).reshape(lead + (length,))
