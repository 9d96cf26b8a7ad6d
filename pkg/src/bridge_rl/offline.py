"""Offline stage: behavioral cloning, transition MLE and the Hellinger-ball policy set."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import EnumerationTooLarge, squared_hellinger_to_reference
from .mdp import TabularMDP, Trajectory, all_policies, check_policy, occupancy, sample_paths


class EmptyPoolError(ValueError):
    pass


DEFAULT_ENUMERATE_CAP = 10**6


@dataclass(frozen=True, eq=False)
class OfflineDataset:
    """``n`` trajectories stored as dense arrays.

    Attributes:
        states: ``(n, H+1)`` state indices.
        actions: ``(n, H)`` action indices.
    """

    states: np.ndarray
    actions: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.states, dtype=np.int64).reshape(-1, np.shape(self.states)[-1])
        a = np.asarray(self.actions, dtype=np.int64).reshape(len(s), -1)
        if s.shape[1] != a.shape[1] + 1:
            raise ValueError("every trajectory needs H+1 states and H actions")
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "actions", a)

    @classmethod
    def from_trajectories(cls, trajectories) -> "OfflineDataset":
        trajectories = list(trajectories)
        if not trajectories:
            raise ValueError("cannot build a dataset from zero trajectories")
        horizons = {t.horizon for t in trajectories}
        if len(horizons) != 1:
            raise ValueError(f"trajectories have mixed horizons {sorted(horizons)}")
        return cls(np.stack([t.states for t in trajectories]), np.stack([t.actions for t in trajectories]))

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]

    @property
    def trajectories(self) -> list[Trajectory]:
        return [Trajectory(s, a) for s, a in zip(self.states, self.actions)]

    def transition_counts(self, n_states: int, n_actions: int) -> np.ndarray:
        """``N[s, a, s']`` over every observed step."""
        counts = np.zeros((n_states, n_actions, n_states), dtype=np.int64)
        np.add.at(counts, (self.states[:, :-1], self.actions, self.states[:, 1:]), 1)
        return counts


def collect_dataset(mdp: TabularMDP, policy, n: int, rng: np.random.Generator) -> OfflineDataset:
    """Roll out ``policy`` ``n`` times in the true environment."""
    if n < 1:
        raise ValueError("n must be at least 1")
    pi = check_policy(policy, mdp.n_states, mdp.n_actions)
    states, actions = sample_paths(mdp, pi, n, rng)
    return OfflineDataset(states, actions)


def corrupt_dataset(dataset: OfflineDataset, noise_p: float, n_actions: int, rng: np.random.Generator) -> OfflineDataset:
    """Replace each action by a uniform random action with probability ``noise_p``.

    The replacement may coincide with the original, so the expected changed
    fraction is ``noise_p * (1 - 1/|A|)``.
    """
    if not 0.0 <= noise_p <= 1.0:
        raise ValueError(f"noise_p must lie in [0, 1], got {noise_p}")
    hit = rng.random(dataset.actions.shape) < noise_p
    replacement = rng.integers(0, n_actions, size=dataset.actions.shape)
    return OfflineDataset(dataset.states.copy(), np.where(hit, replacement, dataset.actions))


def bc_fit(dataset: OfflineDataset, n_states: int, n_actions: int) -> np.ndarray:
    """Log-loss behavioral cloning over deterministic tabular policies.

    The maximiser is the per-state majority action. Ties and unvisited
    states go to the lowest action index.
    """
    if dataset.n == 0:
        raise ValueError("dataset is empty")
    counts = np.zeros((n_states, n_actions), dtype=np.int64)
    np.add.at(counts, (dataset.states[:, :-1], dataset.actions), 1)
    return np.argmax(counts, axis=1).astype(np.int64)


def normalize_counts(counts) -> np.ndarray:
    """Row-normalise ``N[s, a, s']``; rows with no data become uniform."""
    counts = np.asarray(counts, dtype=np.float64)
    totals = counts.sum(axis=-1, keepdims=True)
    uniform = np.full_like(counts, 1.0 / counts.shape[-1])
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(totals > 0, counts / np.where(totals > 0, totals, 1.0), uniform)
    return p


def transition_mle(dataset: OfflineDataset, n_states: int, n_actions: int) -> np.ndarray:
    if dataset.n == 0:
        raise ValueError("dataset is empty")
    return normalize_counts(dataset.transition_counts(n_states, n_actions))


def theoretical_radius(n: int, n_states: int, n_actions: int, horizon: int, delta: float, gamma_min: float) -> float:
    """High-probability Hellinger radius of the offline policy set.

    Args:
        n: number of expert trajectories.
        n_states: ``|S|``.
        n_actions: ``|A|``.
        horizon: episode length ``H``.
        delta: failure probability in ``(0, 1)``.
        gamma_min: minimum nonzero expert state-action visitation probability.

    Returns:
        ``alpha/sqrt(n) + beta/sqrt(n) * (1 + sqrt(H * (1 + 2 alpha / (gamma_min sqrt(n)))))``
        with ``alpha = sqrt(4 |S| ln(2|A|/delta))`` and
        ``beta = sqrt(4 |S|^2 |A| ln(2nH/delta))``.
    """
    if n < 1 or n_states < 1 or n_actions < 1 or horizon < 1:
        raise ValueError("n, n_states, n_actions and horizon must be positive")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if not gamma_min > 0.0:
        raise ValueError(f"gamma_min must be positive, got {gamma_min}")
    alpha, beta = radius_constants(n, n_states, n_actions, horizon, delta)
    root_n = math.sqrt(n)
    return alpha / root_n + beta / root_n * (1.0 + math.sqrt(horizon * (1.0 + 2.0 * alpha / (gamma_min * root_n))))


def radius_constants(n: int, n_states: int, n_actions: int, horizon: int, delta: float) -> tuple[float, float]:
    alpha = math.sqrt(4.0 * n_states * math.log(2.0 * n_actions / delta))
    beta = math.sqrt(4.0 * n_states**2 * n_actions * math.log(2.0 * n * horizon / delta))
    return alpha, beta


def expert_gamma_min(mdp: TabularMDP, expert, floor: float = 1e-15) -> float:
    """Smallest nonzero per-step state-action visitation probability of ``expert``."""
    occ = occupancy(mdp, expert)
    return float(occ[occ > floor].min())


def build_candidate_pool(
    mdp: TabularMDP,
    mode: str,
    pool_size: int | None = None,
    rng: np.random.Generator | None = None,
    cap: int = DEFAULT_ENUMERATE_CAP,
) -> np.ndarray:
    """Candidate policies, one per row.

    ``"enumerate"`` lists every deterministic policy in lexicographic order;
    ``"sample"`` draws ``pool_size`` uniform policies, duplicates kept.
    """
    if mode == "enumerate":
        if mdp.n_policies > cap:
            raise EnumerationTooLarge(f"{mdp.n_policies} policies exceed the enumeration cap {cap}")
        return all_policies(mdp.n_states, mdp.n_actions)
    if mode == "sample":
        if not pool_size or pool_size < 1:
            raise EmptyPoolError("sampled pool needs pool_size >= 1")
        if rng is None:
            raise ValueError("sample mode needs a random generator")
        return rng.integers(0, mdp.n_actions, size=(pool_size, mdp.n_states), dtype=np.int64)
    raise ValueError(f"unknown pool mode {mode!r}")


@dataclass(frozen=True, eq=False)
class OfflineConfidenceSet:
    bc_policy: np.ndarray
    p_hat: np.ndarray
    radius: float
    candidates: np.ndarray
    candidate_fraction: float
    pool_size: int

    def __len__(self) -> int:
        return len(self.candidates)

    def contains(self, policy) -> bool:
        return bool((self.candidates == np.asarray(policy)[None, :]).all(axis=1).any())

    def index_of(self, policy) -> int:
        hits = np.flatnonzero((self.candidates == np.asarray(policy)[None, :]).all(axis=1))
        return int(hits[0]) if len(hits) else -1


def _dedupe(policies: np.ndarray) -> np.ndarray:
    _, first = np.unique(policies, axis=0, return_index=True)
    return policies[np.sort(first)]


def build_confidence_set(pool, bc_policy, p_hat, radius: float, d0, horizon: int) -> OfflineConfidenceSet:
    """Keep pool members whose root squared Hellinger distance to BC is within ``radius``.

    Distances are measured under the estimated model ``p_hat``. Pool order is
    kept; duplicates count towards the fraction but appear once in the list.
    """
    pool = np.atleast_2d(np.asarray(pool, dtype=np.int64))
    if pool.shape[0] == 0:
        raise EmptyPoolError("candidate pool is empty")
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    bc = np.asarray(bc_policy, dtype=np.int64)
    h2 = squared_hellinger_to_reference(p_hat, pool, bc, d0, horizon)
    passing = np.sqrt(h2) <= radius
    kept = _dedupe(pool[passing]) if passing.any() else np.empty((0, pool.shape[1]), dtype=np.int64)
    if not (kept == bc[None, :]).all(axis=1).any():
        kept = np.vstack([kept, bc[None, :]])
    return OfflineConfidenceSet(
        bc_policy=bc,
        p_hat=np.asarray(p_hat, dtype=np.float64),
        radius=float(radius),
        candidates=kept,
        candidate_fraction=float(passing.mean()),
        pool_size=int(pool.shape[0]),
    )


# ---------------------------------------------------------------------------
# file formats

DATASET_COLUMNS = ("traj_id", "step", "state", "action", "next_state")


def save_dataset(dataset: OfflineDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DATASET_COLUMNS)
        for k in range(dataset.n):
            for h in range(dataset.horizon):
                writer.writerow(
                    (k, h, dataset.states[k, h], dataset.actions[k, h], dataset.states[k, h + 1])
                )


def load_dataset(path) -> OfflineDataset:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no transitions")
    by_traj: dict[int, list[dict]] = {}
    for row in rows:
        by_traj.setdefault(int(row["traj_id"]), []).append(row)
    trajectories = []
    for k in sorted(by_traj):
        steps = sorted(by_traj[k], key=lambda r: int(r["step"]))
        if [int(r["step"]) for r in steps] != list(range(len(steps))):
            raise ValueError(f"{path}: trajectory {k} has missing steps")
        for prev, cur in zip(steps, steps[1:]):
            if prev["next_state"] != cur["state"]:
                raise ValueError(f"{path}: trajectory {k} is not contiguous at step {cur['step']}")
        states = [int(r["state"]) for r in steps] + [int(steps[-1]["next_state"])]
        trajectories.append(Trajectory(states, [int(r["action"]) for r in steps]))
    return OfflineDataset.from_trajectories(trajectories)


def dump_confidence_set(conf: OfflineConfidenceSet, path, n: int) -> None:
    """JSON header line, then one candidate per line as space-separated actions."""
    header = {"radius": conf.radius, "fraction": conf.candidate_fraction, "n": int(n), "size": len(conf)}
    lines = [json.dumps(header, sort_keys=True)]
    lines += [" ".join(str(int(a)) for a in row) for row in conf.candidates]
    Path(path).write_text("\n".join(lines) + "\n")


def load_confidence_set_dump(path) -> tuple[dict, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    rows = [list(map(int, line.split())) for line in lines[1:] if line.strip()]
    return header, np.array(rows, dtype=np.int64)
