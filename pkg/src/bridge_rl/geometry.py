"""Squared Hellinger distance between trajectory distributions of deterministic policies.

For deterministic policies only trajectories on which both policies agree
carry Bhattacharyya mass, which gives a forward recursion over states:
``x_{t+1} = x_t @ M`` with

    M[s, s'] = sqrt(P1(s'|s, pi1(s)) * P2(s'|s, pi2(s))) * [pi1(s) == pi2(s)]

starting from ``x_0 = d0``.  The squared distance is ``1 - sum(x_H)``.
"""

from __future__ import annotations

import math

import numpy as np

from . import _kernels
from .mdp import policy_transitions


class StochasticPolicyError(ValueError):
    """Raised when a stochastic policy is passed where a deterministic one is required."""


class EnumerationTooLarge(ValueError):
    pass


BRUTE_FORCE_LIMIT = 10**6
# Bhattacharyya sums of identical laws land a few ulp off 1; treat that as 0.
NUMERICAL_ZERO = 1e-13


def _deterministic(policy, n_states: int) -> np.ndarray:
    pi = np.asarray(policy)
    if pi.ndim == 2 and pi.shape[0] == n_states:
        raise StochasticPolicyError(
            "Hellinger recursion needs deterministic policies; got an action-distribution matrix"
        )
    if pi.ndim != 1 or len(pi) != n_states or not np.issubdtype(pi.dtype, np.integer):
        raise StochasticPolicyError("policy must be an integer action vector of length n_states")
    return pi.astype(np.int64)


def agreement_matrix(p1, pi1, p2, pi2) -> np.ndarray:
    p1, p2 = np.asarray(p1, dtype=np.float64), np.asarray(p2, dtype=np.float64)
    n_states = p1.shape[0]
    pi1, pi2 = _deterministic(pi1, n_states), _deterministic(pi2, n_states)
    m = np.sqrt(policy_transitions(p1, pi1) * policy_transitions(p2, pi2))
    m[pi1 != pi2] = 0.0
    return m


def _clip_unit(h2):
    h2 = np.clip(h2, 0.0, 1.0)
    return np.where(h2 < NUMERICAL_ZERO, 0.0, h2)


def squared_hellinger(p1, pi1, p2, pi2, d0, horizon: int) -> float:
    """Squared Hellinger distance between the trajectory laws of ``(P1, pi1)`` and ``(P2, pi2)``."""
    p1 = np.asarray(p1, dtype=np.float64)
    n_states = p1.shape[0]
    pi1, pi2 = _deterministic(pi1, n_states), _deterministic(pi2, n_states)
    ref = np.sqrt(policy_transitions(p1, pi1) * policy_transitions(p2, pi2))
    bc = _kernels.batch_bhattacharyya(ref, pi1 == pi2, d0, horizon)[0]
    return float(_clip_unit(1.0 - bc))


def squared_hellinger_to_reference(transitions, pool, reference, d0, horizon: int) -> np.ndarray:
    """Squared distances from every policy in ``pool`` to ``reference`` under one shared model."""
    transitions = np.asarray(transitions, dtype=np.float64)
    pool = np.atleast_2d(np.asarray(pool, dtype=np.int64))
    ref = _deterministic(reference, transitions.shape[0])
    p_ref = policy_transitions(transitions, ref)
    bc = _kernels.batch_bhattacharyya(p_ref, pool == ref[None, :], d0, horizon)
    return _clip_unit(1.0 - bc)


def brute_force_squared_hellinger(p1, pi1, p2, pi2, d0, horizon: int, limit: int = BRUTE_FORCE_LIMIT) -> float:
    """Definitional sum over every state/action sequence; a test oracle only."""
    p1, p2 = np.asarray(p1, dtype=np.float64), np.asarray(p2, dtype=np.float64)
    n_states, n_actions = p1.shape[0], p1.shape[1]
    pi1, pi2 = _deterministic(pi1, n_states), _deterministic(pi2, n_states)
    n_terms = n_states ** (horizon + 1) * n_actions**horizon
    if n_terms > limit:
        raise EnumerationTooLarge(f"{n_terms} trajectories exceed the enumeration limit {limit}")
    # columns: s_0, a_0, s_1, a_1, ..., s_H
    dims = []
    for _ in range(horizon):
        dims += [n_states, n_actions]
    dims.append(n_states)
    grid = np.indices(dims).reshape(len(dims), -1)
    d0 = np.asarray(d0, dtype=np.float64)

    def density(p, pi):
        prob = d0[grid[0]].copy()
        for h in range(horizon):
            s, a, nxt = grid[2 * h], grid[2 * h + 1], grid[2 * h + 2]
            prob *= (pi[s] == a) * p[s, a, nxt]
        return prob

    bc = np.sqrt(density(p1, pi1) * density(p2, pi2)).sum()
    return float(1.0 - bc)


def tv_upper_bound(h2: float) -> float:
    """Upper bound ``sqrt(2 H^2)`` on total variation from a squared Hellinger distance."""
    if not 0.0 <= h2 <= 1.0:
        raise ValueError(f"squared Hellinger distance must lie in [0, 1], got {h2}")
    return math.sqrt(2.0 * h2)
