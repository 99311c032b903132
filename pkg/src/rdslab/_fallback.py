"""Pure numpy versions of the compiled kernels (same signatures and results up to rounding)."""
import numpy as np


def qr_sweep(jacs, Q0, record=False):
    jacs = np.asarray(jacs, dtype=float)
    Q = np.array(Q0, dtype=float)
    n, k = len(jacs), Q.shape[1]
    logs = np.empty((n, k))
    frames = np.empty((n + 1,) + Q.shape) if record else None
    if record:
        frames[0] = Q
    for t in range(n):
        Q, R = np.linalg.qr(jacs[t] @ Q)
        r = np.diag(R)
        Q = Q * np.sign(r)
        logs[t] = np.log(np.abs(r))
        if record:
            frames[t + 1] = Q
    return logs, Q, frames


def nearest_leaf(V, cell, w, B, chunk=65536):
    V = np.asarray(V, dtype=float)
    idx = np.empty(len(B), dtype=np.int64)
    dist = np.empty(len(B))
    for a in range(0, len(B), chunk):
        c = cell[a:a + chunk]
        ww = w[a:a + chunk, None]
        vals = (1 - ww)[None] * V[:, c] + ww[None] * V[:, c + 1]      # (L, m, k)
        d2 = ((vals - B[None, a:a + chunk]) ** 2).sum(axis=-1)
        j = d2.argmin(axis=0)
        idx[a:a + chunk] = j
        dist[a:a + chunk] = np.sqrt(d2[j, np.arange(len(j))])
    return idx, dist
