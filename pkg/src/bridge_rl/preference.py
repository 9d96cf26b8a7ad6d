"""Trajectory embeddings, Bradley-Terry preferences and the logistic weight estimate."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.special import expit, log_expit

from .mdp import TabularMDP, check_policy, path_returns, sample_paths, state_distributions

# ---------------------------------------------------------------------------
# embeddings

EMBEDDING_KINDS = ("identity_long", "identity_short", "state_counts", "final_state")


@dataclass(frozen=True)
class Embedding:
    """A discrete trajectory embedding with its dimension and norm bound."""

    kind: str
    n_states: int
    n_actions: int
    horizon: int

    def __post_init__(self):
        if self.kind not in EMBEDDING_KINDS:
            raise ValueError(f"unknown embedding kind {self.kind!r}; expected one of {EMBEDDING_KINDS}")

    @classmethod
    def for_mdp(cls, kind: str, mdp: TabularMDP) -> "Embedding":
        return cls(kind, mdp.n_states, mdp.n_actions, mdp.horizon)

    @property
    def dim(self) -> int:
        S, A, H = self.n_states, self.n_actions, self.horizon
        return {"identity_long": H * (S + A), "identity_short": S + A, "state_counts": S, "final_state": S}[self.kind]

    @property
    def norm_bound(self) -> float:
        H = self.horizon
        return {
            "identity_long": math.sqrt(2 * H),
            "identity_short": math.sqrt(2) * H,
            "state_counts": float(H),
            "final_state": 1.0,
        }[self.kind]

    def paths(self, states, actions) -> np.ndarray:
        """Embed a batch of rollouts, ``(n, H+1)`` states and ``(n, H)`` actions, into ``(n, d)``."""
        states = np.atleast_2d(np.asarray(states, dtype=np.int64))
        actions = np.atleast_2d(np.asarray(actions, dtype=np.int64))
        S, A, H = self.n_states, self.n_actions, self.horizon
        if states.shape[1] != H + 1 or actions.shape[1] != H:
            raise ValueError(f"rollouts must have {H + 1} states and {H} actions")
        n = states.shape[0]
        rows = np.arange(n)[:, None]
        out = np.zeros((n, self.dim))
        if self.kind == "final_state":
            out[np.arange(n), states[:, H]] = 1.0
        elif self.kind == "state_counts":
            np.add.at(out, (rows, states[:, :H]), 1.0)
        elif self.kind == "identity_short":
            np.add.at(out, (rows, states[:, :H]), 1.0)
            np.add.at(out, (rows, S + actions), 1.0)
        else:
            offset = np.arange(H) * (S + A)
            out[rows, offset + states[:, :H]] = 1.0
            out[rows, offset + S + actions] = 1.0
        return out

    def __call__(self, trajectory) -> np.ndarray:
        return self.paths(trajectory.states[None, :], trajectory.actions[None, :])[0]

    def policies_exact(self, policies, transitions, d0) -> np.ndarray:
        """Expected embedding of each policy under ``transitions`` via exact state marginals.

        Returns:
            ``(N, d)`` for a batch of policies.
        """
        pol = np.atleast_2d(np.asarray(policies, dtype=np.int64))
        S, A, H = self.n_states, self.n_actions, self.horizon
        dist = state_distributions(transitions, pol, d0, H)  # (N, H+1, S)
        if self.kind == "final_state":
            return dist[:, H].copy()
        if self.kind == "state_counts":
            return dist[:, :H].sum(axis=1)
        onehot = (pol[:, :, None] == np.arange(A)[None, None, :]).astype(np.float64)  # (N, S, A)
        act = np.einsum("nhs,nsa->nha", dist[:, :H], onehot)
        per_step = np.concatenate([dist[:, :H], act], axis=2)  # (N, H, S+A)
        if self.kind == "identity_short":
            return per_step.sum(axis=1)
        return per_step.reshape(len(pol), H * (S + A))


def embed(kind: str, trajectory, n_states: int, n_actions: int) -> np.ndarray:
    return Embedding(kind, n_states, n_actions, trajectory.horizon)(trajectory)


def policy_embedding(
    policy,
    mdp: TabularMDP,
    kind: str,
    mode: str = "exact",
    transitions=None,
    n_rollouts: int = 100,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Expected trajectory embedding of ``policy`` under ``transitions`` (default: the MDP's own).

    Args:
        policy: deterministic action vector.
        mdp: supplies dimensions, ``d0`` and default dynamics.
        kind: embedding name.
        mode: ``"exact"`` (occupancy) or ``"mc"`` (rollout average).
        transitions: dynamics to evaluate under.
        n_rollouts: rollouts for ``"mc"``.
        rng: generator for ``"mc"``.
    """
    pi = check_policy(policy, mdp.n_states, mdp.n_actions)
    emb = Embedding.for_mdp(kind, mdp)
    p = mdp.transitions if transitions is None else np.asarray(transitions)
    if mode == "exact":
        return emb.policies_exact(pi, p, mdp.initial_dist)[0]
    if mode == "mc":
        if n_rollouts < 1:
            raise ValueError("n_rollouts must be at least 1")
        if rng is None:
            raise ValueError("mc mode needs a random generator")
        model = mdp if transitions is None else mdp.with_transitions(p)
        states, actions = sample_paths(model, pi, n_rollouts, rng)
        return emb.paths(states, actions).mean(axis=0)
    raise ValueError(f"unknown embedding mode {mode!r}")


# ---------------------------------------------------------------------------
# Bradley-Terry model


def sigmoid(x):
    return expit(x)


def kappa(B: float, W: float) -> float:
    """Worst-case inverse slope ``1/sigma'(W B) = 2 + 2 cosh(W B)``."""
    if B < 0 or W < 0:
        raise ValueError("B and W must be nonnegative")
    return 2.0 + 2.0 * math.cosh(W * B)


class PreferenceOracle:
    """Synthetic labeller for trajectory pairs.

    ``"bt"`` draws ``o ~ Bernoulli(sigmoid(<phi(t1) - phi(t2), w*>))``;
    ``"deterministic"`` returns 1 iff ``return(t1) >= return(t2)``.
    """

    def __init__(self, mode: str, embedding: Embedding | None = None, w_star=None, rewards=None):
        if mode == "bt":
            if w_star is None or embedding is None:
                raise ValueError("bt oracle needs w_star and an embedding")
        elif mode == "deterministic":
            if rewards is None:
                raise ValueError("deterministic oracle needs the reward table")
        else:
            raise ValueError(f"unknown oracle mode {mode!r}")
        self.mode = mode
        self.embedding = embedding
        self.w_star = None if w_star is None else np.asarray(w_star, dtype=np.float64)
        self.rewards = None if rewards is None else np.asarray(rewards, dtype=np.float64)

    def compare(self, states1, actions1, states2, actions2, rng: np.random.Generator) -> np.ndarray:
        """Outcomes for a batch of rollout pairs."""
        if self.mode == "deterministic":
            r1 = self.rewards[np.asarray(states1)].sum(axis=-1)
            r2 = self.rewards[np.asarray(states2)].sum(axis=-1)
            return (r1 >= r2).astype(np.int64)
        diff = self.embedding.paths(states1, actions1) - self.embedding.paths(states2, actions2)
        return bt_sample(diff, self.w_star, rng)

    def __call__(self, tau1, tau2, rng: np.random.Generator) -> int:
        out = self.compare(tau1.states[None], tau1.actions[None], tau2.states[None], tau2.actions[None], rng)
        return int(out[0])


def bt_sample(delta_phi, w_star, rng: np.random.Generator) -> np.ndarray:
    p = sigmoid(np.atleast_2d(delta_phi) @ np.asarray(w_star))
    return (rng.random(p.shape) < p).astype(np.int64)


def fit_true_weights(mdp: TabularMDP, embedding: Embedding, rng: np.random.Generator, n_policies: int = 2000, n_rollouts: int = 20):
    """Least-squares weights mapping trajectory embeddings to returns.

    Rollouts come from uniformly random deterministic policies. The
    minimum-norm solution is returned so unidentified directions stay 0.
    """
    policies = rng.integers(0, mdp.n_actions, size=(n_policies, mdp.n_states))
    which = np.repeat(np.arange(n_policies), n_rollouts)
    states, actions = sample_paths(mdp, policies, len(which), rng, which=which)
    X = embedding.paths(states, actions)
    y = path_returns(mdp, states)
    w, *_ = np.linalg.lstsq(X, y, rcond=None)
    return w


# ---------------------------------------------------------------------------
# regularized logistic likelihood


def log_likelihood(w, X, outcomes, lam: float) -> float:
    """``sum o log s(xw) + (1-o) log(1-s(xw)) - lam/2 |w|^2``."""
    w = np.asarray(w, dtype=np.float64)
    z = np.asarray(X) @ w if len(X) else np.zeros(0)
    o = np.asarray(outcomes, dtype=np.float64)
    ll = float(np.sum(o * log_expit(z) + (1.0 - o) * log_expit(-z)))
    return ll - 0.5 * lam * float(w @ w)


def log_likelihood_grad(w, X, outcomes, lam: float) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if len(X) == 0:
        return -lam * w
    X = np.asarray(X)
    return X.T @ (np.asarray(outcomes, dtype=np.float64) - sigmoid(X @ w)) - lam * w


class ConvergenceWarning(RuntimeWarning):
    pass


@dataclass(frozen=True, eq=False)
class WeightEstimate:
    w: np.ndarray
    is_projected: bool = False
    grad_norm: float = 0.0
    iterations: int = 0
    converged: bool = True


def mle_weights(X, outcomes, lam: float, init=None, max_iter: int = 10_000, tol: float = 1e-8) -> WeightEstimate:
    """Maximise the regularised log-likelihood by damped Newton steps.

    The objective is strictly concave, so Newton with Armijo backtracking
    converges globally; it stops once ``|grad| <= tol * (1 + |w|)``.

    Args:
        X: ``(m, d)`` embedding differences.
        outcomes: ``m`` bits.
        lam: ridge strength, positive.
        init: starting point; defaults to the normalised ones vector.
        max_iter: Newton iteration cap.
        tol: relative gradient tolerance.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    X = np.asarray(X, dtype=np.float64)
    d = X.shape[1]
    if X.shape[0] == 0:
        return WeightEstimate(np.zeros(d))
    o = np.asarray(outcomes, dtype=np.float64)
    w = np.ones(d) / math.sqrt(d) if init is None else np.array(init, dtype=np.float64)
    f = log_likelihood(w, X, o, lam)
    g = log_likelihood_grad(w, X, o, lam)
    for it in range(max_iter):
        gnorm = float(np.linalg.norm(g))
        scale = 1.0 + float(np.linalg.norm(w))
        if gnorm <= tol * scale:
            return WeightEstimate(w, grad_norm=gnorm, iterations=it)
        s = sigmoid(X @ w)
        hess = (X * (s * (1.0 - s))[:, None]).T @ X + lam * np.eye(d)
        step = cho_solve(cho_factor(hess), g)
        slope = float(g @ step)  # Newton decrement squared
        if slope <= 1e-24 * scale * scale and gnorm <= 1e-6 * scale:
            # objective changes are below rounding; the full step is as good as it gets
            w = w + step
            g = log_likelihood_grad(w, X, o, lam)
            return WeightEstimate(w, grad_norm=float(np.linalg.norm(g)), iterations=it + 1)
        t = 1.0
        while True:
            cand = w + t * step
            f_new = log_likelihood(cand, X, o, lam)
            if f_new >= f + 1e-4 * t * slope - 1e-13 * abs(f) or t < 1e-10:
                break
            t *= 0.5
        w, f = cand, f_new
        g = log_likelihood_grad(w, X, o, lam)
    gnorm = float(np.linalg.norm(g))
    warnings.warn(f"MLE did not converge in {max_iter} iterations (|grad|={gnorm:.3e})", ConvergenceWarning)
    return WeightEstimate(w, grad_norm=gnorm, iterations=max_iter, converged=False)


def link_transform(w, X, lam: float) -> np.ndarray:
    """``g(w) = sum sigmoid(x w) x + lam w``."""
    w = np.asarray(w, dtype=np.float64)
    if len(X) == 0:
        return lam * w
    return np.asarray(X).T @ sigmoid(np.asarray(X) @ w) + lam * w


def _ball(w, radius):
    norm = float(np.linalg.norm(w))
    return w if norm <= radius else w * (radius / norm)


def projection_objective(w, w_mle, X, lam: float, v_chol) -> float:
    r = link_transform(w, X, lam) - link_transform(w_mle, X, lam)
    z = solve_triangular(v_chol, r, lower=True)
    return float(z @ z)


def _ball_quadratic_min(A, b, radius: float) -> np.ndarray:
    """Minimise ``u^T A u / 2 + b^T u`` over ``|u| <= radius`` for symmetric PSD ``A``."""
    lam, Q = np.linalg.eigh(A)
    lam = np.maximum(lam, 0.0)
    c = Q.T @ b

    def u_of(mu):
        return -(Q @ (c / (lam + mu)))

    if lam.min() > 1e-14 * max(lam.max(), 1.0):
        u = u_of(0.0)
        if np.linalg.norm(u) <= radius:
            return u
    lo, hi = 0.0, max(float(np.linalg.norm(b)) / radius, 1e-300)
    while np.linalg.norm(u_of(hi)) > radius:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if np.linalg.norm(u_of(mid)) > radius:
            lo = mid
        else:
            hi = mid
    return _ball(u_of(hi), radius)


def project_weights(
    w_mle, X, lam: float, kappa_lambda: float, W: float, max_iter: int = 500, tol: float = 1e-10
) -> WeightEstimate:
    """Minimise ``|g(w) - g(w_mle)|^2`` in the ``V^{-1}`` norm over ``|w| <= W``.

    ``V = kappa_lambda * I + X^T X``. Each iteration minimises a quadratic
    model of the objective over the ball (negative curvature is clipped),
    then backtracks along the segment to it, so every iterate stays feasible.
    """
    w_mle = np.asarray(w_mle, dtype=np.float64)
    if np.linalg.norm(w_mle) <= W:
        return WeightEstimate(w_mle.copy(), is_projected=True)
    X = np.asarray(X, dtype=np.float64).reshape(-1, len(w_mle))
    d = len(w_mle)
    chol = np.linalg.cholesky(kappa_lambda * np.eye(d) + X.T @ X)
    g_target = link_transform(w_mle, X, lam)

    def residual(w):
        return link_transform(w, X, lam) - g_target

    def objective(r):
        z = solve_triangular(chol, r, lower=True)
        return float(z @ z)

    w = _ball(w_mle, W)
    r = residual(w)
    f = objective(r)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        s = sigmoid(X @ w)
        slope = s * (1.0 - s)
        jac = (X * slope[:, None]).T @ X + lam * np.eye(d)
        ljac = solve_triangular(chol, jac, lower=True)  # L^{-1} J
        c = cho_solve((chol, True), r)  # V^{-1} r
        grad = 2.0 * jac @ c
        # Gauss-Newton term plus the residual curvature sum_n sigma''(x_n w) (c . x_n) x_n x_n^T
        curv = slope * (1.0 - 2.0 * s) * (X @ c)
        hess = 2.0 * ljac.T @ ljac + 2.0 * (X * curv[:, None]).T @ X
        hess = 0.5 * (hess + hess.T)
        target = _ball_quadratic_min(hess, grad - hess @ w, W)
        direction = target - w
        t = 1.0
        while True:
            cand = w + t * direction
            r_new = residual(cand)
            f_new = objective(r_new)
            if f_new <= f or t < 1e-8:
                break
            t *= 0.5
        shift = t * float(np.linalg.norm(direction))
        if f_new <= f:
            w, r, f = cand, r_new, f_new
        if shift <= tol * (1.0 + float(np.linalg.norm(w))) or f_new > f:
            converged = True
            break
    if not converged:
        warnings.warn("weight projection hit its iteration cap", ConvergenceWarning)
    return WeightEstimate(w, is_projected=True, grad_norm=f, iterations=it, converged=converged)


# ---------------------------------------------------------------------------
# data matrices


@dataclass(eq=False)
class DataMatrix:
    """``V = reg * I + sum x x^T`` kept with its lower Cholesky factor.

    Updates return a new matrix; the original is left untouched.
    """

    v: np.ndarray
    chol: np.ndarray = field(repr=False)

    @classmethod
    def identity(cls, dim: int, reg: float) -> "DataMatrix":
        if reg <= 0:
            raise ValueError("regulariser must be positive")
        return cls(reg * np.eye(dim), math.sqrt(reg) * np.eye(dim))

    @classmethod
    def from_matrix(cls, v) -> "DataMatrix":
        v = np.asarray(v, dtype=np.float64)
        return cls(v.copy(), np.linalg.cholesky(v))

    @property
    def dim(self) -> int:
        return self.v.shape[0]

    def update(self, x) -> "DataMatrix":
        """Rank-one update ``V + x x^T`` with an O(d^2) Cholesky update."""
        x0 = np.asarray(x, dtype=np.float64)
        x = x0.copy()
        L = self.chol.copy()
        for k in range(len(x)):
            if x[k] == 0.0:
                continue
            r = math.hypot(L[k, k], x[k])
            c, s = r / L[k, k], x[k] / L[k, k]
            L[k, k] = r
            L[k + 1:, k] = (L[k + 1:, k] + s * x[k + 1:]) / c
            x[k + 1:] = c * x[k + 1:] - s * L[k + 1:, k]
        return DataMatrix(self.v + np.outer(x0, x0), L)

    def logdet(self) -> float:
        return 2.0 * float(np.log(np.diag(self.chol)).sum())

    def whiten(self, x) -> np.ndarray:
        """``L^{-1} x`` row-wise, so that ``|whiten(x)| = |x|_{V^{-1}}``."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            return solve_triangular(self.chol, x, lower=True)
        return solve_triangular(self.chol, x.T, lower=True).T

    def mahalanobis(self, x) -> np.ndarray | float:
        z = self.whiten(x)
        if z.ndim == 1:
            return float(np.sqrt(z @ z))
        return np.sqrt((z * z).sum(axis=1))


def update_data_matrix(v: DataMatrix, delta_phi) -> DataMatrix:
    return v.update(delta_phi)


def mahalanobis(v, x) -> float:
    """``sqrt(x^T V^{-1} x)`` for a ``DataMatrix`` or a plain SPD array."""
    if not isinstance(v, DataMatrix):
        v = DataMatrix.from_matrix(v)
    return v.mahalanobis(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# confidence widths


def beta_t(t: int, d: int, B: float, W: float, lam: float, delta: float, kappa_: float, log_inv_delta: float | None = None) -> float:
    """``sqrt(lam) W + sqrt(log(1/delta) + 2 d log(1 + t B^2 / (kappa lam d)))``."""
    lid = math.log(1.0 / delta) if log_inv_delta is None else log_inv_delta
    return math.sqrt(lam) * W + math.sqrt(lid + 2.0 * d * math.log1p(t * B * B / (kappa_ * lam * d)))


def alpha_dT(d: int, T: int, B: float, W: float, delta: float, log_inv_delta: float | None = None) -> float:
    """``20 B W sqrt(d log(T (1 + 2T) / delta))``."""
    lid = math.log(1.0 / delta) if log_inv_delta is None else log_inv_delta
    return 20.0 * B * W * math.sqrt(d * (math.log(T * (1.0 + 2.0 * T)) + lid))


def gamma_known(t: int, T: int, d: int, B: float, W: float, lam: float, delta: float, kappa_: float) -> float:
    """Width for known dynamics: ``4 kappa beta_t + alpha_{d,T}``."""
    return 4.0 * kappa_ * beta_t(t, d, B, W, lam, delta, kappa_) + alpha_dT(d, T, B, W, delta)


def gamma_theoretical(
    t: int, T: int, d: int, B: float, W: float, lam: float, delta: float, kappa_: float, bonus_history=()
) -> float:
    """Width with estimated dynamics.

    ``sqrt(2) (4 kappa beta_t + alpha_{d,T}) + 2 sqrt(sum of squared past bonuses) + 1/t``.
    The past bonuses are supplied already evaluated at their own rounds.
    """
    if t < 1:
        raise ValueError("t must be at least 1")
    hist = np.asarray(bonus_history, dtype=np.float64)
    return (
        math.sqrt(2.0) * gamma_known(t, T, d, B, W, lam, delta, kappa_)
        + 2.0 * math.sqrt(float(hist @ hist))
        + 1.0 / t
    )


def history_log_inv_delta(t: int, ell: int, d: int, B: float, W: float, lam: float, kappa_: float, delta_online: float, n_states: int, n_actions: int) -> float:
    """``log(1/delta)`` for the bonus history, computed in log space.

    ``delta = delta'' / (8 ell^3 |A|^|S|)`` with ``delta'' = delta_online / (1 + 4W/eps)^d``
    and ``eps = 1 / (t^2 kappa lam + 4 B^2 t^3)``.
    """
    eps = 1.0 / (t * t * kappa_ * lam + 4.0 * B * B * t**3)
    return (
        math.log(1.0 / delta_online)
        + d * math.log1p(4.0 * W / eps)
        + math.log(8.0 * ell**3)
        + n_states * math.log(n_actions)
    )
