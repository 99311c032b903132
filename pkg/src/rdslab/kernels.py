"""Kernel dispatch: the compiled extension when it imports, numpy otherwise.

Set RDSLAB_PURE=1 to force the numpy versions.
"""
import os

import numpy as np

from . import _fallback

BACKEND = "python"
_impl = _fallback
if os.environ.get("RDSLAB_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        _impl = _fallback


def qr_sweep(jacs, Q0, record=False):
    """Push a frame through a Jacobian stack with reorthonormalisation after each step.

    Returns (logs, Q, frames): logs[t, i] = log|R_ii| at step t, the final frame,
    and all intermediate frames when ``record`` is set.
    """
    jacs = np.ascontiguousarray(jacs, dtype=np.float64)
    Q0 = np.ascontiguousarray(Q0, dtype=np.float64)
    return _impl.qr_sweep(jacs, Q0, bool(record))


def nearest_leaf(V, cell, w, B):
    """Index of and distance to the nearest leaf for samples on a shared 1-d grid.

    V: (leaves, nodes, k) leaf values; cell: left node index per sample;
    w: interpolation weight in [0, 1]; B: (samples, k) sample offsets.
    """
    V = np.ascontiguousarray(V, dtype=np.float64)
    B = np.ascontiguousarray(B, dtype=np.float64)
    cell = np.ascontiguousarray(cell, dtype=np.int64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    if V.ndim != 3 or B.ndim != 2 or V.shape[2] != B.shape[1]:
        raise ValueError("shape mismatch between leaf table and samples")
    if len(V) == 0:
        raise ValueError("no leaves")
    if len(cell) and (cell.min() < 0 or cell.max() > V.shape[1] - 2):
        raise ValueError("cell index outside the grid")
    return _impl.nearest_leaf(V, cell, w, B)
