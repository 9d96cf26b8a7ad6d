"""Pure numpy implementations of the hot loops.

Every function has the same signature and, up to floating-point summation
order in ``batch_bhattacharyya``, the same output as its compiled twin.
The pairwise kernels accumulate squared differences coordinate by coordinate
so that distances are bitwise identical across backends.
"""

from __future__ import annotations

import numpy as np

_CHUNK = 1 << 15


def batch_bhattacharyya(p_ref, agree, d0, horizon):
    n, n_states = agree.shape
    out = np.empty(n, dtype=np.float64)
    for start in range(0, n, _CHUNK):
        mask = agree[start:start + _CHUNK].astype(np.float64)
        x = np.broadcast_to(d0, mask.shape).copy()
        for _ in range(horizon):
            x = (x * mask) @ p_ref
        out[start:start + _CHUNK] = x.sum(axis=1)
    return out


def sample_paths(cum_p, cum_d0, policies, which, uniforms):
    n, width = uniforms.shape
    horizon = width - 1
    states = np.empty((n, horizon + 1), dtype=np.int64)
    actions = np.empty((n, horizon), dtype=np.int64)
    s = (cum_d0[None, :] <= uniforms[:, :1]).sum(axis=1)
    states[:, 0] = s
    for h in range(horizon):
        a = policies[which, s]
        actions[:, h] = a
        rows = cum_p[s, a]
        s = (rows <= uniforms[:, h + 1:h + 2]).sum(axis=1)
        states[:, h + 1] = s
    return states, actions


def _pair_values(z, lin, bonus, gamma, rows):
    zi = z[rows]
    acc = np.zeros((zi.shape[0], z.shape[0]))
    for k in range(z.shape[1]):
        diff = zi[:, None, k] - z[None, :, k]
        acc += diff * diff
    dist = np.sqrt(acc)
    return (lin[rows, None] - lin[None, :]) + gamma * dist + (bonus[rows, None] + bonus[None, :])


def filter_mask(z, scores, bonus, gamma, tol):
    n = z.shape[0]
    keep = np.ones(n, dtype=bool)
    step = max(1, _CHUNK // max(n, 1))
    for start in range(0, n, step):
        rows = np.arange(start, min(n, start + step))
        vals = _pair_values(z, scores, bonus, gamma, rows)
        keep[rows] = ~(vals < -tol).any(axis=1)
    return keep


def best_pair(z, lin, bonus, gamma):
    n = z.shape[0]
    best, bi, bj = -np.inf, 0, 0
    step = max(1, _CHUNK // max(n, 1))
    for start in range(0, n, step):
        rows = np.arange(start, min(n, start + step))
        vals = _pair_values(z, lin, bonus, gamma, rows)
        flat = int(np.argmax(vals))
        v = vals.flat[flat]
        if v > best:
            best = float(v)
            bi, bj = int(rows[flat // n]), flat % n
    return bi, int(bj), best
