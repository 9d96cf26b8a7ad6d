"""Online stage: preference queries constrained to the offline policy set.

One round of the loop

1. estimates dynamics from offline plus online visit counts,
2. embeds every candidate policy under that estimate,
3. prices transition uncertainty with a count-based bonus,
4. filters the candidates against the current weight estimate,
5. picks the most informative pair, queries the oracle on true-environment
   rollouts and updates counts, data matrices and weights.

The same loop drives the pure-online baseline, which just starts from an
unfiltered pool and empty counts.
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .config import ExperimentConfig
from .mdp import TabularMDP, expected_returns, optimal_policy, sample_paths, state_distributions
from .offline import (
    OfflineConfidenceSet,
    OfflineDataset,
    bc_fit,
    build_candidate_pool,
    build_confidence_set,
    expert_gamma_min,
    normalize_counts,
    theoretical_radius,
)
from .preference import (
    DataMatrix,
    Embedding,
    PreferenceOracle,
    WeightEstimate,
    gamma_known,
    gamma_theoretical,
    history_log_inv_delta,
    kappa,
    mle_weights,
    project_weights,
)

# ---------------------------------------------------------------------------
# counts and bonuses


@dataclass(frozen=True, eq=False)
class VisitCounts:
    """Offline and online transition counts ``N[s, a, s']``."""

    offline: np.ndarray
    online: np.ndarray

    @classmethod
    def empty(cls, n_states: int, n_actions: int) -> "VisitCounts":
        z = np.zeros((n_states, n_actions, n_states), dtype=np.int64)
        return cls(z, z.copy())

    @classmethod
    def from_dataset(cls, dataset: OfflineDataset, n_states: int, n_actions: int) -> "VisitCounts":
        off = dataset.transition_counts(n_states, n_actions)
        return cls(off, np.zeros_like(off))

    @property
    def n_offline(self) -> np.ndarray:
        return self.offline.sum(axis=2)

    @property
    def n_online(self) -> np.ndarray:
        return self.online.sum(axis=2)

    @property
    def combined(self) -> np.ndarray:
        return self.offline + self.online

    def add_paths(self, states, actions) -> "VisitCounts":
        online = self.online.copy()
        np.add.at(online, (states[:, :-1], actions, states[:, 1:]), 1)
        return VisitCounts(self.offline, online)


def combined_transition_estimate(counts: VisitCounts) -> np.ndarray:
    """``(N_off(s,a,s') + N_t(s,a,s')) / (N_off(s,a) + N_t(s,a))``; empty rows uniform."""
    return normalize_counts(counts.combined)


def xi_table(visits, eta: float, log_inv_delta: float, horizon: int, n_states: int, n_actions: int) -> np.ndarray:
    """Per-pair uncertainty ``min(2 eta, 4 eta sqrt(U / N))``.

    ``U = H log(|S||A|) + log(6 log(max(N, 2))) + log(1/delta)``; unvisited pairs get ``2 eta``.
    """
    visits = np.asarray(visits, dtype=np.float64)
    n_eff = np.maximum(visits, 2.0)
    u = horizon * math.log(n_states * n_actions) + np.log(6.0 * np.log(n_eff)) + log_inv_delta
    with np.errstate(divide="ignore"):
        xi = np.minimum(2.0 * eta, 4.0 * eta * np.sqrt(u / visits))
    return np.where(visits > 0, xi, 2.0 * eta)


def filter_log_inv_delta(delta_online: float, n_states: int, n_actions: int) -> float:
    """``log(1/delta')`` for ``delta' = delta_online / (2 |A|^|S|)``, kept in log space."""
    return math.log(2.0 / delta_online) + n_states * math.log(n_actions)


def expected_bonus(policies, xi, transitions, d0, horizon: int) -> np.ndarray:
    """Exact ``E[sum_h xi(s_h, a_h)]`` over ``h = 0..H-1`` under ``transitions``."""
    pol = np.atleast_2d(np.asarray(policies, dtype=np.int64))
    dist = state_distributions(transitions, pol, d0, horizon)[:, :horizon]  # (N, H, S)
    per_state = xi[np.arange(xi.shape[0])[None, :], pol]  # (N, S)
    return np.einsum("nhs,ns->n", dist, per_state)


def bonus(policies, xi, model: TabularMDP, n_rollouts: int, rng: np.random.Generator) -> np.ndarray:
    """Monte Carlo ``E[sum_h xi(s_h, a_h)]`` with ``n_rollouts`` rollouts per policy under ``model``."""
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be at least 1")
    pol = np.atleast_2d(np.asarray(policies, dtype=np.int64))
    which = np.repeat(np.arange(len(pol)), n_rollouts)
    states, actions = sample_paths(model, pol, len(which), rng, which=which)
    per_path = xi[states[:, :-1], actions].sum(axis=1)
    return per_path.reshape(len(pol), n_rollouts).mean(axis=1)


# ---------------------------------------------------------------------------
# filtering and selection


def online_filter(z, scores, gamma: float, bonuses) -> np.ndarray:
    """Indices ``i`` with ``s_i - s_j + gamma |z_i - z_j| + b_i + b_j >= 0`` for every ``j``.

    ``z`` holds whitened embeddings, so Euclidean distances between rows are
    Mahalanobis distances under the data matrix.
    """
    keep = _kernels.filter_mask(z, scores, bonuses, gamma)
    return np.flatnonzero(keep)


def select_pair(pi_t, z, scores, gamma: float, bonuses, mode: str = "alg1", rng: np.random.Generator | None = None):
    """Choose the query pair among the surviving indices ``pi_t``.

    Args:
        pi_t: sorted candidate indices.
        z: whitened embeddings of all candidates.
        scores: predicted scores of all candidates.
        gamma: width multiplier.
        bonuses: transition bonuses of all candidates.
        mode: ``alg1`` maximises ``gamma D + b_i + b_j``; ``ucb`` adds the score
            gap; ``pure_uncertainty`` uses ``D`` alone; ``best_vs_random`` pairs
            the top scorer with a uniform member of ``pi_t``.
        rng: needed by ``best_vs_random``.

    Returns:
        ``(i, j)`` candidate indices, lexicographically smallest among ties.
    """
    pi_t = np.asarray(pi_t, dtype=np.int64)
    if len(pi_t) == 0:
        raise ValueError("pi_t is empty")
    sub_z = np.asarray(z)[pi_t]
    sub_b = np.asarray(bonuses, dtype=np.float64)[pi_t]
    sub_s = np.asarray(scores, dtype=np.float64)[pi_t]
    if mode == "alg1":
        i, j, _ = _kernels.best_pair(sub_z, np.zeros(len(pi_t)), sub_b, gamma)
    elif mode == "ucb":
        i, j, _ = _kernels.best_pair(sub_z, sub_s, sub_b, gamma)
    elif mode == "pure_uncertainty":
        i, j, _ = _kernels.best_pair(sub_z, np.zeros(len(pi_t)), np.zeros(len(pi_t)), 1.0)
    elif mode == "best_vs_random":
        if rng is None:
            raise ValueError("best_vs_random needs a random generator")
        i = int(np.argmax(sub_s))
        j = int(rng.integers(len(pi_t)))
    else:
        raise ValueError(f"unknown selection mode {mode!r}")
    return int(pi_t[i]), int(pi_t[j])


# ---------------------------------------------------------------------------
# run state and records


@dataclass(frozen=True)
class StepRecord:
    seed: int
    t: int
    pi_t_size: int
    pair_i: int
    pair_j: int
    outcome: int
    inst_regret: float
    cum_regret: float
    best_policy_regret: float
    bonus_1: float
    bonus_2: float
    gamma: float


STEP_FIELDS = tuple(f.name for f in dataclasses.fields(StepRecord))


@dataclass(frozen=True)
class PreferenceLogEntry:
    t: int
    outcome: int
    score_diff: float
    delta_phi: tuple[float, ...]


@dataclass(frozen=True, eq=False)
class OnlineState:
    t: int
    counts: VisitCounts
    p_hat: np.ndarray
    v_bar: DataMatrix
    v_emp: DataMatrix
    records_x: np.ndarray
    records_o: np.ndarray
    w_proj: WeightEstimate
    pi_t: np.ndarray
    bonus_history: tuple[float, ...] = ()
    cum_regret: float = 0.0
    embeddings: np.ndarray | None = None
    embeddings_p: np.ndarray | None = None


@dataclass(eq=False)
class RunResult:
    seed: int
    algorithm: str
    records: list[StepRecord]
    preference_log: list[PreferenceLogEntry]
    best_policy: np.ndarray
    bc_policy: np.ndarray
    bc_regret: float
    candidates: np.ndarray
    offline_size: int
    candidate_fraction: float
    radius: float
    pi_star_in_offline: bool
    wall_time: float = 0.0
    final_state: OnlineState | None = field(default=None, repr=False)

    @property
    def final_cum_regret(self) -> float:
        return self.records[-1].cum_regret if self.records else 0.0

    @property
    def final_best_regret(self) -> float:
        return self.records[-1].best_policy_regret if self.records else self.bc_regret

    def first_singleton_step(self) -> int | None:
        """First round whose filtered set has one member, or ``None``."""
        for rec in self.records:
            if rec.pi_t_size == 1:
                return rec.t
        return None


# ---------------------------------------------------------------------------
# regret


@dataclass(frozen=True, eq=False)
class RegretEvaluator:
    """Scores policies against the optimum in reward or pseudo (linear-score) units."""

    env: TabularMDP
    reference: np.ndarray
    mode: str = "reward"
    w_star: np.ndarray | None = None
    embedding: Embedding | None = None

    def __post_init__(self):
        if self.mode == "pseudo" and (self.w_star is None or self.embedding is None):
            raise ValueError("pseudo regret needs w_star and an embedding")
        if self.mode not in ("reward", "pseudo"):
            raise ValueError(f"unknown regret mode {self.mode!r}")

    def values(self, policies) -> np.ndarray:
        pol = np.atleast_2d(np.asarray(policies, dtype=np.int64))
        if self.mode == "reward":
            return expected_returns(self.env, pol)
        phi = self.embedding.policies_exact(pol, self.env.transitions, self.env.initial_dist)
        return phi @ self.w_star

    @property
    def optimum(self) -> float:
        return float(self.values(self.reference)[0])

    def policy_regret(self, policy) -> float:
        return self.optimum - float(self.values(policy)[0])

    def pair_regret(self, pi1, pi2) -> float:
        v = self.values(np.stack([pi1, pi2]))
        return float((2.0 * self.optimum - v[0] - v[1]) / 2.0)


def evaluate_regret(env: TabularMDP, policy_or_pair, reference, mode: str = "reward", w_star=None, embedding=None) -> float:
    """Regret of one policy, or pair regret ``(2 s* - s1 - s2)/2`` for a ``(pi1, pi2)`` pair."""
    ev = RegretEvaluator(env, np.asarray(reference), mode, None if w_star is None else np.asarray(w_star), embedding)
    arr = np.asarray(policy_or_pair)
    if arr.ndim == 2 and arr.shape[0] == 2:
        return ev.pair_regret(arr[0], arr[1])
    return ev.policy_regret(arr)


# ---------------------------------------------------------------------------
# the loop


@dataclass(eq=False)
class _Context:
    env: TabularMDP
    config: ExperimentConfig
    candidates: np.ndarray
    embedding: Embedding
    oracle: PreferenceOracle
    regret: RegretEvaluator
    bc_index: int
    seed: int
    kappa: float
    eta: float
    log_inv_delta: float


def _best_index(scores, bc_index: int, tol: float = 1e-12) -> int:
    top = float(np.max(scores))
    if bc_index >= 0 and scores[bc_index] >= top - tol:
        return bc_index
    return int(np.argmax(scores >= top - tol))


def _fit_weights(ctx: _Context, state: OnlineState) -> WeightEstimate:
    cfg = ctx.config
    if cfg.frozen_w is not None:
        return WeightEstimate(np.asarray(cfg.frozen_w, dtype=np.float64), is_projected=True)
    mle = mle_weights(state.records_x, state.records_o, cfg.lam)
    return project_weights(mle.w, state.records_x, cfg.lam, ctx.kappa * cfg.lam, cfg.W)


def _gamma(ctx: _Context, state: OnlineState, t: int) -> float:
    cfg = ctx.config
    if cfg.gamma != "theoretical":
        return float(cfg.gamma)
    d, B = ctx.embedding.dim, ctx.embedding.norm_bound
    T = max(cfg.T, 1)
    if cfg.dynamics == "known":
        return gamma_known(t, T, d, B, cfg.W, cfg.lam, cfg.online_delta, ctx.kappa)
    return gamma_theoretical(t, T, d, B, cfg.W, cfg.lam, cfg.online_delta, ctx.kappa, state.bonus_history)


def _embeddings(ctx: _Context, state: OnlineState, p_hat) -> np.ndarray:
    if (
        ctx.config.cache_embeddings
        and state.embeddings is not None
        and np.max(np.abs(p_hat - state.embeddings_p)) <= 1e-6
    ):
        return state.embeddings
    return ctx.embedding.policies_exact(ctx.candidates, p_hat, ctx.env.initial_dist)


def _bonuses(ctx: _Context, policies, xi, p_hat, rng) -> np.ndarray:
    cfg = ctx.config
    if cfg.bonus_estimator == "exact":
        return expected_bonus(policies, xi, p_hat, ctx.env.initial_dist, ctx.env.horizon)
    return bonus(policies, xi, ctx.env.with_transitions(p_hat), cfg.bonus_rollouts, rng)


def bridge_step(ctx: _Context, state: OnlineState, rng: np.random.Generator):
    """One round; returns the next state, its ``StepRecord`` and the new preference-log entries."""
    cfg, env = ctx.config, ctx.env
    S, A, H = env.n_states, env.n_actions, env.horizon
    t = state.t + 1
    known = cfg.dynamics == "known"

    p_hat = env.transitions if known else state.p_hat
    phi = _embeddings(ctx, state, p_hat)
    if known or ctx.eta == 0.0:
        xi = np.zeros((S, A))
        bonuses = np.zeros(len(ctx.candidates))
    else:
        xi = xi_table(state.counts.combined.sum(axis=2), ctx.eta, ctx.log_inv_delta, H, S, A)
        bonuses = _bonuses(ctx, ctx.candidates, xi, p_hat, rng)

    w = state.w_proj.w
    scores = phi @ w
    gamma = _gamma(ctx, state, t)
    z = state.v_bar.whiten(phi)
    pi_t = online_filter(z, scores, gamma, bonuses)
    i, j = select_pair(pi_t, z, scores, gamma, bonuses, cfg.selection, rng)
    pi1, pi2 = ctx.candidates[i], ctx.candidates[j]

    # queries and counts use the real environment
    m = cfg.n_rollouts_per_pair
    both = np.stack([pi1, pi2])
    which = np.concatenate([np.zeros(m, dtype=np.int64), np.ones(m, dtype=np.int64)])
    states, actions = sample_paths(env, both, 2 * m, rng, which=which)
    outcomes = ctx.oracle.compare(states[:m], actions[:m], states[m:], actions[m:], rng)
    dphi_paths = ctx.embedding.paths(states[:m], actions[:m]) - ctx.embedding.paths(states[m:], actions[m:])

    v_emp = state.v_emp
    for x in dphi_paths:
        v_emp = v_emp.update(x)
    counts = state.counts.add_paths(states, actions)
    history = state.bonus_history
    if cfg.gamma == "theoretical" and not known:
        lid = history_log_inv_delta(t, t, ctx.embedding.dim, ctx.embedding.norm_bound, cfg.W, cfg.lam, ctx.kappa, cfg.online_delta, S, A)
        xi_hist = xi_table(state.counts.combined.sum(axis=2), 2.0 * cfg.W * ctx.embedding.norm_bound, lid, H, S, A)
        history = history + tuple(float(b) for b in _bonuses(ctx, both, xi_hist, p_hat, rng))

    new_state = OnlineState(
        t=t,
        counts=counts,
        p_hat=env.transitions if known else combined_transition_estimate(counts),
        v_bar=state.v_bar.update(phi[i] - phi[j]),
        v_emp=v_emp,
        records_x=np.vstack([state.records_x, dphi_paths]),
        records_o=np.concatenate([state.records_o, outcomes]),
        w_proj=state.w_proj,
        pi_t=pi_t,
        bonus_history=history,
        cum_regret=state.cum_regret,
        embeddings=phi,
        embeddings_p=np.array(p_hat),
    )
    new_w = _fit_weights(ctx, new_state)
    best = _best_index(phi @ new_w.w, ctx.bc_index)
    inst = ctx.regret.pair_regret(pi1, pi2)
    cum = state.cum_regret + inst
    new_state = dataclasses.replace(new_state, w_proj=new_w, cum_regret=cum)

    record = StepRecord(
        seed=ctx.seed,
        t=t,
        pi_t_size=len(pi_t),
        pair_i=i,
        pair_j=j,
        outcome=int(outcomes.sum()),
        inst_regret=inst,
        cum_regret=cum,
        best_policy_regret=ctx.regret.policy_regret(ctx.candidates[best]),
        bonus_1=float(bonuses[i]),
        bonus_2=float(bonuses[j]),
        gamma=gamma,
    )
    log = [
        PreferenceLogEntry(t, int(o), float(x @ w), tuple(float(v) for v in x))
        for x, o in zip(dphi_paths, outcomes)
    ]
    return new_state, record, log


def _initial_state(ctx: _Context, counts: VisitCounts) -> OnlineState:
    d = ctx.embedding.dim
    reg = ctx.kappa * ctx.config.lam
    state = OnlineState(
        t=0,
        counts=counts,
        p_hat=ctx.env.transitions if ctx.config.dynamics == "known" else combined_transition_estimate(counts),
        v_bar=DataMatrix.identity(d, reg),
        v_emp=DataMatrix.identity(d, reg),
        records_x=np.zeros((0, d)),
        records_o=np.zeros(0, dtype=np.int64),
        w_proj=WeightEstimate(np.zeros(d), is_projected=True),
        pi_t=np.arange(len(ctx.candidates)),
    )
    return dataclasses.replace(state, w_proj=_fit_weights(ctx, state))


def _online_loop(ctx: _Context, counts: VisitCounts, rng: np.random.Generator):
    state = _initial_state(ctx, counts)
    records, log = [], []
    for _ in range(ctx.config.T):
        state, rec, entries = bridge_step(ctx, state, rng)
        records.append(rec)
        log.extend(entries)
    return state, records, log


# ---------------------------------------------------------------------------
# entry points


@dataclass(frozen=True, eq=False)
class Problem:
    """Everything a run needs that does not depend on the algorithm."""

    env: TabularMDP
    expert: np.ndarray
    embedding: Embedding
    oracle: PreferenceOracle
    regret: RegretEvaluator


def make_problem(config: ExperimentConfig, w_star=None) -> Problem:
    from .mdp import make_env

    env = make_env(config.env, config.p_succ)
    expert = optimal_policy(env)
    emb = Embedding.for_mdp(config.embedding, env)
    if (config.oracle == "bt" or config.regret_mode == "pseudo") and w_star is None:
        raise ValueError("bt oracle and pseudo regret need w_star")
    oracle = PreferenceOracle(config.oracle, emb, w_star=w_star, rewards=env.rewards)
    regret = RegretEvaluator(env, expert, config.regret_mode, None if w_star is None else np.asarray(w_star), emb)
    return Problem(env, expert, emb, oracle, regret)


def offline_stage(problem: Problem, dataset: OfflineDataset, config: ExperimentConfig, rng: np.random.Generator) -> OfflineConfidenceSet:
    env = problem.env
    S, A, H = env.n_states, env.n_actions, env.horizon
    bc = bc_fit(dataset, S, A)
    p_hat = env.transitions if config.dynamics == "known" else normalize_counts(dataset.transition_counts(S, A))
    if config.radius == "theoretical":
        gmin = expert_gamma_min(env, problem.expert) if config.gamma_min == "expert" else float(config.gamma_min)
        radius = theoretical_radius(dataset.n, S, A, H, config.delta, gmin)
    else:
        radius = float(config.radius)
    pool = build_candidate_pool(env, config.pool, config.pool_size, rng, cap=config.enumerate_cap)
    return build_confidence_set(pool, bc, p_hat, radius, env.initial_dist, H)


def _context(problem: Problem, config: ExperimentConfig, candidates, bc, seed: int) -> _Context:
    emb = problem.embedding
    k = kappa(emb.norm_bound, config.W)
    eta = 2.0 * config.W * emb.norm_bound if config.bonus_eta == "theoretical" else float(config.bonus_eta)
    hits = np.flatnonzero((candidates == bc[None, :]).all(axis=1))
    return _Context(
        env=problem.env,
        config=config,
        candidates=candidates,
        embedding=emb,
        oracle=problem.oracle,
        regret=problem.regret,
        bc_index=int(hits[0]) if len(hits) else -1,
        seed=seed,
        kappa=k,
        eta=eta,
        log_inv_delta=filter_log_inv_delta(config.online_delta, problem.env.n_states, problem.env.n_actions),
    )


def _result(problem, config, seed, conf, candidates, state, records, log, started) -> RunResult:
    bc = conf.bc_policy
    if records:
        best = candidates[_best_index(state.embeddings @ state.w_proj.w, _index(candidates, bc))]
    else:
        best = bc
    return RunResult(
        seed=seed,
        algorithm=config.algorithm,
        records=records,
        preference_log=log,
        best_policy=np.array(best),
        bc_policy=bc,
        bc_regret=problem.regret.policy_regret(bc),
        candidates=candidates,
        offline_size=len(conf),
        candidate_fraction=conf.candidate_fraction,
        radius=conf.radius,
        pi_star_in_offline=conf.contains(problem.expert),
        wall_time=time.perf_counter() - started,
        final_state=state,
    )


def _index(candidates, policy) -> int:
    hits = np.flatnonzero((candidates == np.asarray(policy)[None, :]).all(axis=1))
    return int(hits[0]) if len(hits) else -1


def run_bridge(problem: Problem, dataset: OfflineDataset, config: ExperimentConfig, rngs, seed: int = 0) -> RunResult:
    """Offline set construction followed by ``T`` online rounds.

    Args:
        problem: environment, expert, embedding, oracle and regret scorer.
        dataset: expert demonstrations, already corrupted if required.
        config: run configuration.
        rngs: mapping with generators under ``"pool"`` and ``"online"``.
        seed: seed label copied into every record.
    """
    started = time.perf_counter()
    conf = offline_stage(problem, dataset, config, rngs["pool"])
    candidates = conf.candidates
    ctx = _context(problem, config, candidates, conf.bc_policy, seed)
    counts = VisitCounts.from_dataset(dataset, problem.env.n_states, problem.env.n_actions)
    state, records, log = _online_loop(ctx, counts, rngs["online"])
    return _result(problem, config, seed, conf, candidates, state, records, log, started)


def pbrl_pool(problem: Problem, conf: OfflineConfidenceSet, config: ExperimentConfig, rng: np.random.Generator) -> np.ndarray:
    """Every policy when enumerable, else the offline set topped up with random policies."""
    env = problem.env
    if config.pool == "enumerate" and env.n_policies <= config.enumerate_cap:
        return build_candidate_pool(env, "enumerate", cap=config.enumerate_cap)
    extra = max(config.pbrl_pool_size - len(conf), 0)
    parts = [conf.candidates]
    if extra:
        parts.append(rng.integers(0, env.n_actions, size=(extra, env.n_states), dtype=np.int64))
    return np.vstack(parts)


def run_baseline_pbrl(problem: Problem, dataset: OfflineDataset, config: ExperimentConfig, rngs, seed: int = 0) -> RunResult:
    """Same loop without the Hellinger filter and without offline transition counts."""
    started = time.perf_counter()
    conf = offline_stage(problem, dataset, config, rngs["pool"])
    candidates = pbrl_pool(problem, conf, config, rngs["pbrl_pool"])
    ctx = _context(problem, config, candidates, conf.bc_policy, seed)
    counts = VisitCounts.empty(problem.env.n_states, problem.env.n_actions)
    state, records, log = _online_loop(ctx, counts, rngs["online"])
    return _result(problem, config, seed, conf, candidates, state, records, log, started)
