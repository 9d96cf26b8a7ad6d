"""Experiment configuration: one flat, JSON-serialisable dataclass."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .mdp import ENVIRONMENTS
from .preference import EMBEDDING_KINDS

ENV_DEFAULT_N = {"star": 2, "gridworld": 10}
SELECTION_MODES = ("alg1", "best_vs_random", "ucb", "pure_uncertainty")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    """Every knob of a run.

    Fields that accept either a mode name or a number (``radius``, ``gamma``,
    ``bonus_eta``, ``gamma_min``) use the string for the theory-derived value.
    JSON uses the key ``"lambda"`` for ``lam``.
    """

    env: str = "star"
    p_succ: float | None = None
    n_offline: int | None = None
    noise_p: float = 0.0
    T: int = 100
    seeds: tuple[int, ...] = tuple(range(20))
    embedding: str = "identity_short"
    dynamics: str = "estimated"
    radius: str | float = 0.3
    gamma: str | float = 1.0
    oracle: str = "deterministic"
    pool: str = "enumerate"
    pool_size: int = 20_000
    algorithm: str = "bridge"
    delta: float = 0.1
    lam: float = 1.0
    W: float = 1.0
    selection: str = "alg1"
    # knobs beyond the core list
    delta_online: float | None = None
    gamma_min: str | float = "expert"
    bonus_eta: str | float = 0.005
    bonus_estimator: str = "mc"
    bonus_rollouts: int = 100
    n_rollouts_per_pair: int = 1
    pbrl_pool_size: int = 1000
    enumerate_cap: int = 10**6
    cache_embeddings: bool = False
    regret_mode: str = "reward"
    frozen_w: tuple[float, ...] | None = None
    master_seed: int = 0
    workers: int = 1
    output_dir: str = "runs/default"

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.frozen_w is not None:
            object.__setattr__(self, "frozen_w", tuple(float(x) for x in self.frozen_w))
        self.validate()

    # -- derived values -----------------------------------------------------

    @property
    def n(self) -> int:
        return ENV_DEFAULT_N.get(self.env, 10) if self.n_offline is None else self.n_offline

    @property
    def online_delta(self) -> float:
        return self.delta if self.delta_online is None else self.delta_online

    # -- validation -----------------------------------------------------------

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.env in ENVIRONMENTS, f"unknown env {self.env!r}; choose from {sorted(ENVIRONMENTS)}")
        need(self.p_succ is None or 0.0 < self.p_succ <= 1.0, "p_succ must lie in (0, 1]")
        need(self.n >= 1, "n_offline must be at least 1")
        need(0.0 <= self.noise_p <= 1.0, "noise_p must lie in [0, 1]")
        need(self.T >= 0, "T must be nonnegative")
        need(len(self.seeds) >= 1, "at least one seed is required")
        need(len(set(self.seeds)) == len(self.seeds), "seeds must be distinct")
        need(self.embedding in EMBEDDING_KINDS, f"unknown embedding {self.embedding!r}")
        need(self.dynamics in ("known", "estimated"), "dynamics must be 'known' or 'estimated'")
        _mode_or_number(self.radius, "radius", "theoretical", lo=0.0)
        _mode_or_number(self.gamma, "gamma", "theoretical", lo=0.0)
        _mode_or_number(self.bonus_eta, "bonus_eta", "theoretical", lo=0.0)
        _mode_or_number(self.gamma_min, "gamma_min", "expert", lo=0.0, strict=True)
        need(self.oracle in ("bt", "deterministic"), "oracle must be 'bt' or 'deterministic'")
        need(self.pool in ("enumerate", "sample"), "pool must be 'enumerate' or 'sample'")
        need(self.pool_size >= 1, "pool_size must be positive")
        need(self.algorithm in ("bridge", "pbrl", "bc_only"), "algorithm must be bridge, pbrl or bc_only")
        need(0.0 < self.delta < 1.0, "delta must lie in (0, 1)")
        need(0.0 < self.online_delta < 1.0, "delta_online must lie in (0, 1)")
        need(self.lam > 0.0, "lambda must be positive")
        need(self.W > 0.0, "W must be positive")
        need(self.selection in SELECTION_MODES, f"selection must be one of {SELECTION_MODES}")
        need(self.bonus_estimator in ("mc", "exact"), "bonus_estimator must be 'mc' or 'exact'")
        need(self.bonus_rollouts >= 1, "bonus_rollouts must be positive")
        need(self.n_rollouts_per_pair >= 1, "n_rollouts_per_pair must be positive")
        need(self.pbrl_pool_size >= 1, "pbrl_pool_size must be positive")
        need(self.regret_mode in ("reward", "pseudo"), "regret_mode must be 'reward' or 'pseudo'")
        need(self.workers >= 1, "workers must be positive")

    # -- (de)serialisation ----------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["lambda"] = out.pop("lam")
        out["seeds"] = list(self.seeds)
        if self.frozen_w is not None:
            out["frozen_w"] = list(self.frozen_w)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ExperimentConfig":
        data = dict(data)
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config fields: {unknown}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(data)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _mode_or_number(value, name: str, mode: str, lo: float, strict: bool = False) -> None:
    if isinstance(value, str):
        if value != mode:
            raise ConfigError(f"{name} must be {mode!r} or a number, got {value!r}")
        return
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{name} must be {mode!r} or a number")
    if value < lo or (strict and value <= lo):
        raise ConfigError(f"{name} out of range: {value}")
