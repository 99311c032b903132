import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rdslab import _fallback, kernels

try:
    from rdslab import _kernels
except ImportError:
    _kernels = None

compiled = pytest.mark.skipif(_kernels is None, reason="extension not built")


def _qr_reference(jacs, Q):
    logs = []
    for J in jacs:
        Q, R = np.linalg.qr(J @ Q)
        logs.append(np.log(np.abs(np.diag(R))))
    return np.array(logs)


@settings(max_examples=30)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 40), st.integers(1, 4), st.data())
def test_qr_sweep_matches_reference(seed, steps, d, data):
    k = data.draw(st.integers(1, d))
    rng = np.random.default_rng(seed)
    jacs = rng.normal(size=(steps, d, d))
    Q0, _ = np.linalg.qr(rng.normal(size=(d, k)))
    ref = _qr_reference(jacs, Q0)
    logs, Q, frames = kernels.qr_sweep(jacs, Q0, record=True)
    assert np.allclose(logs, ref, atol=1e-9)
    assert np.allclose(Q.T @ Q, np.eye(k), atol=1e-12)
    assert np.allclose(frames[-1], Q)
    if _kernels is not None:
        fl, fQ, _ = _fallback.qr_sweep(jacs, Q0, False)
        cl, cQ, _ = _kernels.qr_sweep(np.ascontiguousarray(jacs), np.ascontiguousarray(Q0), False)
        assert np.allclose(fl, cl, atol=1e-10) and np.allclose(np.abs(fQ.T @ cQ), np.eye(k), atol=1e-9)


def _nearest_reference(V, cell, w, B):
    interp = (1 - w)[None, :, None] * V[:, cell] + w[None, :, None] * V[:, cell + 1]
    D = np.linalg.norm(interp - B[None], axis=-1)
    return D.argmin(axis=0), D.min(axis=0)


@settings(max_examples=30)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 6), st.integers(2, 30), st.integers(0, 200), st.integers(1, 3))
def test_nearest_leaf_matches_reference(seed, leaves, nodes, samples, k):
    rng = np.random.default_rng(seed)
    V = rng.normal(size=(leaves, nodes, k))
    cell = rng.integers(0, nodes - 1, samples)
    w = rng.random(samples)
    B = rng.normal(size=(samples, k))
    idx, dist = kernels.nearest_leaf(V, cell, w, B)
    ri, rd = _nearest_reference(V, cell, w, B)
    assert np.allclose(dist, rd, atol=1e-12)
    assert np.allclose(dist, np.linalg.norm((1 - w)[:, None] * V[idx, cell] + w[:, None] * V[idx, cell + 1] - B,
                                            axis=1), atol=1e-12)
    if _kernels is not None:
        fi, fd = _fallback.nearest_leaf(V, cell, w, B)
        ci, cd = _kernels.nearest_leaf(V, cell.astype(np.int64), w, B)
        assert np.allclose(fd, cd, atol=1e-12)


def test_nearest_leaf_rejects_bad_cells():
    V = np.zeros((2, 5, 1))
    with pytest.raises(ValueError):
        kernels.nearest_leaf(V, np.array([4]), np.array([0.5]), np.zeros((1, 1)))
    with pytest.raises(ValueError):
        kernels.nearest_leaf(V, np.array([0]), np.array([0.5]), np.zeros((1, 2)))


@compiled
def test_compiled_backend_is_default():
    if os.environ.get("RDSLAB_PURE"):
        pytest.skip("pure backend forced")
    assert kernels.BACKEND == "cython"


def test_pure_environment_selects_fallback():
    code = "from rdslab import kernels; print(kernels.BACKEND)"
    out = subprocess.run([sys.executable, "-c", code], env={**os.environ, "RDSLAB_PURE": "1"},
                         capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
