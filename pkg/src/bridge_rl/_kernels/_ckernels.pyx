# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Signatures and results mirror ``_pykernels``."""

import numpy as np

from libc.math cimport sqrt


def batch_bhattacharyya(const double[:, ::1] p_ref,
                        const unsigned char[:, ::1] agree,
                        const double[::1] d0,
                        int horizon):
    cdef Py_ssize_t n = agree.shape[0]
    cdef Py_ssize_t n_states = p_ref.shape[0]
    cdef Py_ssize_t k, s, t
    cdef int h
    cdef double xs, total
    out = np.empty(n, dtype=np.float64)
    buf_a = np.empty(n_states, dtype=np.float64)
    buf_b = np.empty(n_states, dtype=np.float64)
    cdef double[::1] out_v = out
    cdef double[::1] x = buf_a
    cdef double[::1] y = buf_b
    cdef double[::1] tmp
    with nogil:
        for k in range(n):
            for s in range(n_states):
                x[s] = d0[s]
            for h in range(horizon):
                for t in range(n_states):
                    y[t] = 0.0
                for s in range(n_states):
                    xs = x[s]
                    if agree[k, s] and xs != 0.0:
                        for t in range(n_states):
                            y[t] += xs * p_ref[s, t]
                tmp = x
                x = y
                y = tmp
            total = 0.0
            for s in range(n_states):
                total += x[s]
            out_v[k] = total
    return out


def sample_paths(const double[:, :, ::1] cum_p,
                 const double[::1] cum_d0,
                 const long long[:, ::1] policies,
                 const long long[::1] which,
                 const double[:, ::1] uniforms):
    cdef Py_ssize_t n = uniforms.shape[0]
    cdef Py_ssize_t horizon = uniforms.shape[1] - 1
    cdef Py_ssize_t k, h, idx
    cdef long long s, a, row
    states = np.empty((n, horizon + 1), dtype=np.int64)
    actions = np.empty((n, horizon), dtype=np.int64)
    cdef long long[:, ::1] st = states
    cdef long long[:, ::1] ac = actions
    cdef double u
    with nogil:
        for k in range(n):
            row = which[k]
            u = uniforms[k, 0]
            idx = 0
            while cum_d0[idx] <= u:
                idx += 1
            s = idx
            st[k, 0] = s
            for h in range(horizon):
                a = policies[row, s]
                ac[k, h] = a
                u = uniforms[k, h + 1]
                idx = 0
                while cum_p[s, a, idx] <= u:
                    idx += 1
                s = idx
                st[k, h + 1] = s
    return states, actions


cdef inline double _dist(const double[:, ::1] z, Py_ssize_t i, Py_ssize_t j,
                         Py_ssize_t d) noexcept nogil:
    cdef double acc = 0.0
    cdef double diff
    cdef Py_ssize_t k
    for k in range(d):
        diff = z[i, k] - z[j, k]
        acc += diff * diff
    return sqrt(acc)


def filter_mask(const double[:, ::1] z,
                const double[::1] scores,
                const double[::1] bonus,
                double gamma,
                double tol):
    cdef Py_ssize_t n = z.shape[0]
    cdef Py_ssize_t d = z.shape[1]
    cdef Py_ssize_t i, j
    cdef double v
    keep = np.ones(n, dtype=np.bool_)
    cdef unsigned char[::1] kv = keep.view(np.uint8)
    with nogil:
        for i in range(n):
            for j in range(n):
                v = scores[i] - scores[j]
                v = v + gamma * _dist(z, i, j, d)
                v = v + (bonus[i] + bonus[j])
                if v < -tol:
                    kv[i] = 0
                    break
    return keep


def best_pair(const double[:, ::1] z,
              const double[::1] lin,
              const double[::1] bonus,
              double gamma):
    cdef Py_ssize_t n = z.shape[0]
    cdef Py_ssize_t d = z.shape[1]
    cdef Py_ssize_t i, j
    cdef Py_ssize_t bi = 0, bj = 0
    cdef double v
    cdef double best = -1.0 / 0.0
    with nogil:
        for i in range(n):
            for j in range(n):
                v = lin[i] - lin[j]
                v = v + gamma * _dist(z, i, j, d)
                v = v + (bonus[i] + bonus[j])
                if v > best:
                    best = v
                    bi = i
                    bj = j
    return int(bi), int(bj), float(best)
