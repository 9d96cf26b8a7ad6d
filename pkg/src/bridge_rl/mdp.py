"""Finite-horizon tabular MDPs: rollouts, exact evaluation and the two test environments.

Policies are deterministic and stationary, stored as integer arrays of
length ``n_states`` (one action per state).  A batch of policies is a 2-D
integer array with one policy per row.

Rewards are per-state and collected at every visited state ``s_0 .. s_H``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _kernels

_STOCH_TOL = 1e-12


class InvalidMDPError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TabularMDP:
    transitions: np.ndarray
    initial_dist: np.ndarray
    rewards: np.ndarray
    horizon: int
    name: str = "custom"
    _cum: tuple = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        p = np.array(self.transitions, dtype=np.float64)
        d0 = np.array(self.initial_dist, dtype=np.float64)
        r = np.array(self.rewards, dtype=np.float64)
        if p.ndim != 3 or p.shape[0] != p.shape[2]:
            raise InvalidMDPError(f"transitions must have shape (S, A, S), got {p.shape}")
        n_states = p.shape[0]
        if d0.shape != (n_states,) or r.shape != (n_states,):
            raise InvalidMDPError("initial_dist and rewards must have length n_states")
        if int(self.horizon) < 1:
            raise InvalidMDPError("horizon must be positive")
        check_stochastic(p)
        if (d0 < 0).any() or abs(d0.sum() - 1.0) > _STOCH_TOL:
            raise InvalidMDPError("initial_dist is not a probability vector")
        for arr in (p, d0, r):
            arr.setflags(write=False)
        object.__setattr__(self, "transitions", p)
        object.__setattr__(self, "initial_dist", d0)
        object.__setattr__(self, "rewards", r)
        object.__setattr__(self, "horizon", int(self.horizon))
        object.__setattr__(self, "_cum", (_kernels.cumulative(p), _kernels.cumulative(d0)))

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]

    @property
    def n_policies(self) -> int:
        return self.n_actions ** self.n_states

    def with_transitions(self, transitions) -> "TabularMDP":
        """Same MDP with a different (e.g. estimated) transition tensor."""
        return TabularMDP(transitions, self.initial_dist, self.rewards, self.horizon, self.name)


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.states, dtype=np.int64)
        a = np.asarray(self.actions, dtype=np.int64)
        if s.ndim != 1 or a.ndim != 1 or len(s) != len(a) + 1:
            raise ValueError("a trajectory has H+1 states and H actions")
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "actions", a)

    @property
    def horizon(self) -> int:
        return len(self.actions)


def check_stochastic(p, tol: float = _STOCH_TOL) -> None:
    p = np.asarray(p)
    if (p < 0).any():
        raise InvalidMDPError("negative transition probability")
    bad = np.abs(p.sum(axis=-1) - 1.0) > tol
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise InvalidMDPError(f"transition row {idx} does not sum to 1")


def check_policy(policy, n_states: int, n_actions: int) -> np.ndarray:
    pi = np.asarray(policy)
    if pi.ndim != 1 or len(pi) != n_states:
        raise ValueError(f"a deterministic policy is a length-{n_states} action vector")
    pi = pi.astype(np.int64)
    if (pi < 0).any() or (pi >= n_actions).any():
        raise ValueError("policy action index out of range")
    return pi


def policy_transitions(transitions, policy) -> np.ndarray:
    """``P_pi[s, s'] = P[s, pi(s), s']``; batched when ``policy`` is 2-D."""
    p = np.asarray(transitions)
    pi = np.asarray(policy, dtype=np.int64)
    states = np.arange(p.shape[0])
    return p[states, pi]


# ---------------------------------------------------------------------------
# rollouts


def sample_paths(mdp: TabularMDP, policies, n: int, rng: np.random.Generator, which=None):
    """Draw ``n`` rollouts; returns ``(states (n, H+1), actions (n, H))``.

    ``policies`` is one policy or a batch; ``which[k]`` selects the row used by
    rollout ``k`` (default: row 0 for every rollout).
    """
    pol = np.atleast_2d(np.asarray(policies, dtype=np.int64))
    if which is None:
        which = np.zeros(n, dtype=np.int64)
    uniforms = rng.random((n, mdp.horizon + 1))
    cum_p, cum_d0 = mdp._cum
    return _kernels.sample_paths(cum_p, cum_d0, pol, which, uniforms)


def sample_trajectory(mdp: TabularMDP, policy, rng: np.random.Generator) -> Trajectory:
    pi = check_policy(policy, mdp.n_states, mdp.n_actions)
    states, actions = sample_paths(mdp, pi, 1, rng)
    return Trajectory(states[0], actions[0])


def path_returns(mdp: TabularMDP, states) -> np.ndarray:
    return mdp.rewards[np.asarray(states)].sum(axis=-1)


def monte_carlo_return(mdp: TabularMDP, policy, n_rollouts: int, rng: np.random.Generator) -> float:
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be at least 1")
    pi = check_policy(policy, mdp.n_states, mdp.n_actions)
    states, _ = sample_paths(mdp, pi, n_rollouts, rng)
    return float(path_returns(mdp, states).mean())


# ---------------------------------------------------------------------------
# exact evaluation


def state_distributions(transitions, policies, d0, horizon: int) -> np.ndarray:
    """Marginal state distributions for ``h = 0..H``.

    Shape ``(H+1, S)`` for one policy, ``(N, H+1, S)`` for a batch.
    """
    pol = np.asarray(policies, dtype=np.int64)
    single = pol.ndim == 1
    pol = np.atleast_2d(pol)
    p_pi = policy_transitions(transitions, pol)  # (N, S, S)
    out = np.empty((pol.shape[0], horizon + 1, len(d0)))
    x = np.broadcast_to(np.asarray(d0, dtype=np.float64), (pol.shape[0], len(d0))).copy()
    out[:, 0] = x
    for h in range(horizon):
        x = np.einsum("ns,nst->nt", x, p_pi)
        out[:, h + 1] = x
    return out[0] if single else out


def expected_return(mdp: TabularMDP, policy) -> float:
    pi = check_policy(policy, mdp.n_states, mdp.n_actions)
    dist = state_distributions(mdp.transitions, pi, mdp.initial_dist, mdp.horizon)
    return float((dist @ mdp.rewards).sum())


def expected_returns(mdp: TabularMDP, policies) -> np.ndarray:
    """Exact returns for a batch of policies."""
    dist = state_distributions(mdp.transitions, np.atleast_2d(policies), mdp.initial_dist, mdp.horizon)
    return (dist @ mdp.rewards).sum(axis=1)


def occupancy(mdp: TabularMDP, policy, transitions=None) -> np.ndarray:
    """Per-step state-action distribution ``d[t, s, a]`` for ``t = 0..H-1``."""
    pi = check_policy(policy, mdp.n_states, mdp.n_actions)
    p = mdp.transitions if transitions is None else transitions
    dist = state_distributions(p, pi, mdp.initial_dist, mdp.horizon)[:-1]
    occ = np.zeros((mdp.horizon, mdp.n_states, mdp.n_actions))
    occ[:, np.arange(mdp.n_states), pi] = dist
    return occ


def optimal_policy(mdp: TabularMDP) -> np.ndarray:
    """Best deterministic stationary policy, ties broken towards low action indices.

    Backward induction proposes one greedy policy per steps-to-go; the best
    of those by exact return is then polished by single-state action
    switches that strictly improve the return.  For the environments here
    the backward-induction greedy policy is already stationary-optimal.
    """
    p, r, H = mdp.transitions, mdp.rewards, mdp.horizon
    value = r.copy()  # value with 0 steps to go
    proposals = []
    for _ in range(H):
        q = r[:, None] + p @ value
        greedy = _argmax_low(q)
        proposals.append(greedy)
        value = q[np.arange(mdp.n_states), greedy]
    proposals = np.array(proposals[::-1])  # proposals[0] = greedy with H steps to go
    returns = expected_returns(mdp, proposals)
    best = proposals[_first_max(returns)].copy()
    best_ret = returns.max()

    improved = True
    while improved:
        improved = False
        for s in range(mdp.n_states):
            trial = np.repeat(best[None, :], mdp.n_actions, axis=0)
            trial[:, s] = np.arange(mdp.n_actions)
            rets = expected_returns(mdp, trial)
            a = _first_max(rets)
            if rets[a] > best_ret + 1e-12:
                best, best_ret, improved = trial[a].copy(), rets[a], True
    return best


def _argmax_low(q, tol: float = 1e-12) -> np.ndarray:
    top = q.max(axis=1, keepdims=True)
    return np.argmax(q >= top - tol, axis=1)


def _first_max(x, tol: float = 1e-12) -> int:
    return int(np.argmax(x >= x.max() - tol))


def all_policies(n_states: int, n_actions: int) -> np.ndarray:
    """Every deterministic stationary policy, lexicographic order."""
    return np.array(list(itertools.product(range(n_actions), repeat=n_states)), dtype=np.int64).reshape(
        -1, n_states
    )


# ---------------------------------------------------------------------------
# environments

STAR_ACTIONS = ("right", "left", "up", "down")
STAR_EDGES = {  # (state, action) -> intended successor
    (0, 0): 1,
    (1, 1): 0,
    (1, 0): 2,
    (2, 1): 1,
    (1, 3): 3,
    (3, 2): 1,
    (1, 2): 4,
    (4, 3): 1,
}


def build_star_mdp(p_success: float = 0.7, horizon: int = 8) -> TabularMDP:
    """Five-state star: hub ``s1`` linked to ``s0, s2, s3, s4``.

    An available action reaches its target with ``p_success`` and otherwise
    lands uniformly on one of the four non-target states; unavailable
    actions leave the agent in place.
    """
    n_states, n_actions = 5, 4
    p = np.zeros((n_states, n_actions, n_states))
    for s in range(n_states):
        for a in range(n_actions):
            target = STAR_EDGES.get((s, a))
            if target is None:
                p[s, a, s] = 1.0
                continue
            p[s, a, :] = (1.0 - p_success) / (n_states - 1)
            p[s, a, target] = p_success
    d0 = np.eye(n_states)[0]
    rewards = np.array([0.0, 0.0, 6.0, -1.0, 10.0])
    return TabularMDP(p, d0, rewards, horizon, name="star")


GRID_ACTIONS = ("up", "left", "down", "right", "stay")
_GRID_MOVES = ((-1, 0), (0, -1), (1, 0), (0, 1))
GRID_SIZE = 4
GRID_ENCLOSED = (2, 1)
GRID_REWARDS = {(3, 3): 10.0, (0, 2): -1.0, (0, 3): -1.0, (1, 2): -1.0, (1, 3): -1.0, GRID_ENCLOSED: 20.0}


def _grid_walls():
    r, c = GRID_ENCLOSED
    walls = set()
    for dr, dc in _GRID_MOVES:
        nb = (r + dr, c + dc)
        walls.add(((r, c), nb))
        walls.add((nb, (r, c)))
    return walls


def build_gridworld(p_succ: float = 0.8, horizon: int = 10) -> TabularMDP:
    """4x4 grid, start top-left, goal bottom-right, walled-in 20-reward cell.

    A move succeeds with ``p_succ``; otherwise one of the other three moves
    is executed uniformly.  Mass on blocked moves (grid edge or wall) is
    shared equally among the unblocked ones; with none unblocked the agent
    stays.  ``stay`` is deterministic.  States are numbered ``row * 4 + col``.
    """
    n = GRID_SIZE
    n_states, n_actions = n * n, len(GRID_ACTIONS)
    walls = _grid_walls()
    p = np.zeros((n_states, n_actions, n_states))
    for s in range(n_states):
        r, c = divmod(s, n)
        dest = []
        for dr, dc in _GRID_MOVES:
            nr, nc = r + dr, c + dc
            ok = 0 <= nr < n and 0 <= nc < n and ((r, c), (nr, nc)) not in walls
            dest.append(nr * n + nc if ok else None)
        valid = [i for i, d in enumerate(dest) if d is not None]
        for a in range(4):
            if not valid:
                p[s, a, s] = 1.0
                continue
            w = np.full(4, (1.0 - p_succ) / 3.0)
            w[a] = p_succ
            blocked = sum(w[i] for i in range(4) if dest[i] is None)
            for i in valid:
                p[s, a, dest[i]] += w[i] + blocked / len(valid)
        p[s, 4, s] = 1.0
    d0 = np.eye(n_states)[0]
    rewards = np.zeros(n_states)
    for (r, c), val in GRID_REWARDS.items():
        rewards[r * n + c] = val
    return TabularMDP(p, d0, rewards, horizon, name="gridworld")


ENVIRONMENTS: dict[str, Callable[..., TabularMDP]] = {
    "star": build_star_mdp,
    "gridworld": build_gridworld,
}


def make_env(name: str, p_succ: float | None = None) -> TabularMDP:
    """Build a registered environment; ``p_succ`` only applies to the gridworld."""
    if name not in ENVIRONMENTS:
        raise KeyError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}")
    if name == "gridworld" and p_succ is not None:
        return build_gridworld(p_succ=p_succ)
    return ENVIRONMENTS[name]()
