"""Seeding, multi-seed runs, sweeps and aggregation.

Every output file starts with ``# config=<json>`` so a run can be repeated
from the file alone. Aggregates are computed only from the per-seed CSVs,
so ``aggregate_dir`` reproduces ``aggregate.csv`` byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .geometry import squared_hellinger_to_reference
from .mdp import make_env, optimal_policy
from .offline import (
    bc_fit,
    build_candidate_pool,
    build_confidence_set,
    collect_dataset,
    corrupt_dataset,
    expert_gamma_min,
    theoretical_radius,
    transition_mle,
)
from .online import STEP_FIELDS, RunResult, make_problem, run_baseline_pbrl, run_bridge
from .preference import Embedding, fit_true_weights

log = logging.getLogger(__name__)

Z95 = 1.96
STREAM_LABELS = ("dataset", "noise", "pool", "pbrl_pool", "online")
BC_FIELDS = ("seed", "bc_regret")


def _label_key(label: str) -> int:
    return int.from_bytes(hashlib.blake2b(label.encode(), digest_size=8).digest(), "little")


def seed_streams(master_seed: int, seed_index: int, component_label: str) -> np.random.Generator:
    """Independent generator for one ``(seed, component)`` pair.

    The stream is ``PCG64`` seeded by ``SeedSequence(master_seed,
    spawn_key=(seed_index, blake2b(label)))``; the hash makes labels
    order-free and stable across processes and Python versions.
    """
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(seed_index), _label_key(component_label)))
    return np.random.Generator(np.random.PCG64(ss))


def _rngs(config: ExperimentConfig, seed: int) -> dict[str, np.random.Generator]:
    return {label: seed_streams(config.master_seed, seed, label) for label in STREAM_LABELS}


def true_weights(config: ExperimentConfig):
    """Least-squares ``w*`` shared by all seeds (needed by the bt oracle and pseudo regret)."""
    if config.oracle != "bt" and config.regret_mode != "pseudo":
        return None
    env = make_env(config.env, config.p_succ)
    return fit_true_weights(env, Embedding.for_mdp(config.embedding, env), seed_streams(config.master_seed, 0, "w_star"))


# ---------------------------------------------------------------------------
# single runs


def run_seed(config: ExperimentConfig, seed: int, w_star=None) -> RunResult:
    problem = make_problem(config, w_star)
    rngs = _rngs(config, seed)
    env = problem.env
    data = collect_dataset(env, problem.expert, config.n, rngs["dataset"])
    if config.noise_p > 0:
        data = corrupt_dataset(data, config.noise_p, env.n_actions, rngs["noise"])
    if config.algorithm == "pbrl":
        return run_baseline_pbrl(problem, data, config, rngs, seed)
    if config.algorithm == "bc_only":
        return run_bridge(problem, data, config.replace(T=0), rngs, seed)
    return run_bridge(problem, data, config, rngs, seed)


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _header(config: ExperimentConfig, extra: dict | None = None) -> str:
    lines = [f"# config={config.to_json()}"]
    for key, value in (extra or {}).items():
        lines.append(f"# {key}={_fmt(value)}")
    return "\n".join(lines) + "\n"


def seed_csv_text(config: ExperimentConfig, result: RunResult) -> str:
    buf = io.StringIO()
    buf.write(_header(config, {"seed": result.seed, "bc_regret": float(result.bc_regret)}))
    writer = csv.writer(buf, lineterminator="\n")
    if result.algorithm == "bc_only":
        writer.writerow(BC_FIELDS)
        writer.writerow([result.seed, repr(float(result.bc_regret))])
        return buf.getvalue()
    writer.writerow(STEP_FIELDS)
    for rec in result.records:
        writer.writerow([_fmt(getattr(rec, f)) for f in STEP_FIELDS])
    return buf.getvalue()


def preference_log_text(config: ExperimentConfig, result: RunResult) -> str:
    buf = io.StringIO()
    buf.write(_header(config, {"seed": result.seed}))
    writer = csv.writer(buf, lineterminator="\n")
    d = len(result.preference_log[0].delta_phi) if result.preference_log else 0
    writer.writerow(["t", "outcome", "score_diff"] + [f"delta_phi_{k}" for k in range(d)])
    for e in result.preference_log:
        writer.writerow([e.t, e.outcome, repr(e.score_diff)] + [repr(v) for v in e.delta_phi])
    return buf.getvalue()


def result_summary(config: ExperimentConfig, result: RunResult) -> dict:
    return {
        "config": config.to_dict(),
        "seed": result.seed,
        "algorithm": result.algorithm,
        "best_policy": [int(a) for a in result.best_policy],
        "bc_policy": [int(a) for a in result.bc_policy],
        "bc_regret": float(result.bc_regret),
        "final_cum_regret": float(result.final_cum_regret),
        "final_best_regret": float(result.final_best_regret),
        "offline_size": int(result.offline_size),
        "candidate_fraction": float(result.candidate_fraction),
        "radius": float(result.radius),
        "pi_star_in_offline": bool(result.pi_star_in_offline),
        "wall_time": float(result.wall_time),
    }


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _seed_job(args):
    config_json, seed, w_star = args
    config = ExperimentConfig.from_dict(json.loads(config_json))
    try:
        result = run_seed(config, seed, w_star)
    except Exception as exc:  # isolate numeric faults per seed
        log.warning("seed %s failed: %s", seed, exc)
        return seed, None, f"{type(exc).__name__}: {exc}"
    out = Path(config.output_dir)
    _atomic_write(out / f"seed_{seed}.csv", seed_csv_text(config, result))
    _atomic_write(out / f"seed_{seed}_prefs.csv", preference_log_text(config, result))
    _atomic_write(out / f"seed_{seed}.json", json.dumps(result_summary(config, result), indent=2, sort_keys=True) + "\n")
    result.final_state = None
    return seed, result, None


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class AggregateResult:
    """Per-round mean and normal 95% interval across seeds."""

    t: np.ndarray
    mean_cum_regret: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    mean_pi_size: np.ndarray
    pi_size_ci_lo: np.ndarray
    pi_size_ci_hi: np.ndarray
    mean_best_regret: np.ndarray
    n_seeds: int
    final_mean_cum_regret: float
    final_ci: tuple[float, float]
    bc_regret_mean: float
    failed_seeds: tuple[int, ...] = ()

    AGG_FIELDS = ("t", "mean_cum_regret", "ci_lo", "ci_hi", "mean_pi_size", "pi_size_ci_lo", "pi_size_ci_hi", "mean_best_regret")


def _mean_ci(x: np.ndarray):
    mean = x.mean(axis=0)
    if x.shape[0] < 2:
        return mean, np.full_like(mean, np.nan), np.full_like(mean, np.nan)
    half = Z95 * x.std(axis=0, ddof=1) / math.sqrt(x.shape[0])
    return mean, mean - half, mean + half


def read_seed_csv(path) -> tuple[dict, dict[str, np.ndarray]]:
    meta, rows = {}, []
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("# "):
            key, _, value = line[2:].partition("=")
            meta[key] = value
        else:
            body.append(line)
    reader = csv.DictReader(body)
    rows = list(reader)
    cols = {f: np.array([float(r[f]) for r in rows]) for f in (reader.fieldnames or STEP_FIELDS)}
    return meta, cols


def aggregate_seed_files(paths, failed=()) -> AggregateResult:
    seeds = [read_seed_csv(p) for p in paths]
    if not seeds:
        raise ValueError("no completed seeds to aggregate")
    if all("t" not in c for _, c in seeds):  # behavioral cloning only
        bc = np.array([c["bc_regret"][0] for _, c in seeds])
        empty = np.zeros(0)
        return AggregateResult(empty.astype(np.int64), empty, empty, empty, empty, empty, empty, empty,
                               len(seeds), 0.0, (0.0, 0.0), float(bc.mean()), tuple(int(s) for s in failed))
    lengths = {len(c["t"]) for _, c in seeds}
    if len(lengths) != 1:
        raise ValueError(f"seed files disagree on the number of rounds: {sorted(lengths)}")
    cum = np.array([c["cum_regret"] for _, c in seeds])
    size = np.array([c["pi_t_size"] for _, c in seeds])
    best = np.array([c["best_policy_regret"] for _, c in seeds])
    m, lo, hi = _mean_ci(cum)
    ms, slo, shi = _mean_ci(size)
    bc = np.array([float(meta["bc_regret"]) for meta, _ in seeds])
    t = seeds[0][1]["t"].astype(np.int64)
    final = cum[:, -1] if cum.shape[1] else np.zeros(len(seeds))
    fm, flo, fhi = _mean_ci(final[:, None])
    return AggregateResult(
        t=t,
        mean_cum_regret=m,
        ci_lo=lo,
        ci_hi=hi,
        mean_pi_size=ms,
        pi_size_ci_lo=slo,
        pi_size_ci_hi=shi,
        mean_best_regret=best.mean(axis=0) if best.size else best.reshape(0),
        n_seeds=len(seeds),
        final_mean_cum_regret=float(fm[0]),
        final_ci=(float(flo[0]), float(fhi[0])),
        bc_regret_mean=float(bc.mean()),
        failed_seeds=tuple(int(s) for s in failed),
    )


def aggregate_text(config_line: str, agg: AggregateResult) -> str:
    buf = io.StringIO()
    buf.write(config_line.rstrip("\n") + "\n")
    buf.write(f"# ci=normal 95% (mean +- {Z95}*std/sqrt(n_seeds))\n")
    buf.write(f"# n_seeds={agg.n_seeds}\n")
    buf.write(f"# bc_regret_mean={agg.bc_regret_mean!r}\n")
    buf.write(f"# final_mean_cum_regret={agg.final_mean_cum_regret!r}\n")
    if agg.failed_seeds:
        buf.write(f"# warning=failed seeds {list(agg.failed_seeds)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(AggregateResult.AGG_FIELDS)
    for k in range(len(agg.t)):
        writer.writerow([int(agg.t[k])] + [repr(float(getattr(agg, f)[k])) for f in AggregateResult.AGG_FIELDS[1:]])
    return buf.getvalue()


def _seed_files(directory: Path):
    files = []
    for p in directory.glob("seed_*.csv"):
        stem = p.stem[len("seed_"):]
        if stem.lstrip("-").isdigit():
            files.append((int(stem), p))
    return [p for _, p in sorted(files)]


def aggregate_dir(directory) -> AggregateResult:
    """Rebuild ``aggregate.csv`` in ``directory`` from its per-seed CSVs."""
    directory = Path(directory)
    files = _seed_files(directory)
    if not files:
        raise FileNotFoundError(f"no seed_<k>.csv files in {directory}")
    failed = []
    fail_file = directory / "failed_seeds.json"
    if fail_file.exists():
        failed = sorted(json.loads(fail_file.read_text()))
    config_line = next(line for line in files[0].read_text().splitlines() if line.startswith("# config="))
    agg = aggregate_seed_files(files, failed)
    _atomic_write(directory / "aggregate.csv", aggregate_text(config_line, agg))
    return agg


# ---------------------------------------------------------------------------
# experiments


def run_experiment(config: ExperimentConfig, return_results: bool = False):
    """Run every seed, write per-seed files and ``aggregate.csv``.

    Seeds that raise are reported in ``failed_seeds.json`` and skipped in
    the aggregate.

    Returns:
        The ``AggregateResult``, plus the list of ``RunResult`` when
        ``return_results`` is set.
    """
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for stale in _seed_files(out):
        stale.unlink()
    w_star = true_weights(config)
    jobs = [(config.to_json(), seed, w_star) for seed in config.seeds]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            outcomes = list(pool.map(_seed_job, jobs))
    else:
        outcomes = [_seed_job(job) for job in jobs]
    failed = {seed: err for seed, _, err in outcomes if err is not None}
    fail_file = out / "failed_seeds.json"
    if failed:
        _atomic_write(fail_file, json.dumps(failed, indent=2, sort_keys=True) + "\n")
        log.warning("%d of %d seeds failed", len(failed), len(jobs))
    elif fail_file.exists():
        fail_file.unlink()
    agg = aggregate_dir(out)
    if return_results:
        return agg, [r for _, r, err in outcomes if err is None]
    return agg


TABLE1_NS = (10, 20, 40, 80, 1000)
TABLE1_NOISE = (0.0, 0.1, 0.2)


@dataclass(frozen=True)
class Table1Cell:
    n: int
    noise_p: float
    mean: float
    std: float
    expert_coverage: float
    runs: int


def confidence_fraction_run(config: ExperimentConfig, n: int, noise_p: float, run_index: int):
    """One offline-set construction; returns ``(candidate_fraction, expert_in_set)``."""
    env = make_env(config.env, config.p_succ)
    expert = optimal_policy(env)
    label = f"table1/n={n}/noise={noise_p!r}"
    rng = seed_streams(config.master_seed, run_index, label)
    data = collect_dataset(env, expert, n, rng)
    if noise_p > 0:
        data = corrupt_dataset(data, noise_p, env.n_actions, rng)
    S, A, H = env.n_states, env.n_actions, env.horizon
    bc = bc_fit(data, S, A)
    p_hat = transition_mle(data, S, A)
    if config.radius == "theoretical":
        gmin = expert_gamma_min(env, expert) if config.gamma_min == "expert" else float(config.gamma_min)
        radius = theoretical_radius(n, S, A, H, config.delta, gmin)
    else:
        radius = float(config.radius)
    pool = build_candidate_pool(env, config.pool, config.pool_size, rng, cap=config.enumerate_cap)
    conf = build_confidence_set(pool, bc, p_hat, radius, env.initial_dist, H)
    # the expert need not be in a sampled pool, so test it directly
    h2 = squared_hellinger_to_reference(p_hat, expert[None, :], bc, env.initial_dist, H)[0]
    return conf.candidate_fraction, bool(math.sqrt(h2) <= radius)


def _table1_job(args):
    config_json, n, noise, k = args
    return (n, noise, k), confidence_fraction_run(ExperimentConfig.from_dict(json.loads(config_json)), n, noise, k)


def run_table1_sweep(base_config: ExperimentConfig, runs: int = 30, ns=TABLE1_NS, noises=TABLE1_NOISE, write: bool = True):
    """Candidate-fraction mean and std for every ``(n, noise)`` cell."""
    if base_config.env != "gridworld":
        raise ValueError("the confidence-set scaling sweep is defined on the gridworld")
    jobs = [(base_config.to_json(), n, noise, k) for n in ns for noise in noises for k in range(runs)]
    if base_config.workers > 1:
        with ProcessPoolExecutor(max_workers=base_config.workers) as pool:
            outcomes = list(pool.map(_table1_job, jobs, chunksize=4))
    else:
        outcomes = [_table1_job(j) for j in jobs]
    by_cell: dict[tuple, list] = {}
    for (n, noise, _), value in outcomes:
        by_cell.setdefault((n, noise), []).append(value)
    cells = []
    for n in ns:
        for noise in noises:
            vals = np.array([v[0] for v in by_cell[(n, noise)]])
            cover = np.array([v[1] for v in by_cell[(n, noise)]])
            cells.append(Table1Cell(n, noise, float(vals.mean()), float(vals.std(ddof=1)) if runs > 1 else 0.0, float(cover.mean()), runs))
    if write:
        buf = io.StringIO()
        buf.write(_header(base_config, {"runs_per_cell": runs}))
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["n", "noise_p", "fraction_mean", "fraction_std", "expert_coverage", "runs"])
        for c in cells:
            writer.writerow([c.n, repr(c.noise_p), repr(c.mean), repr(c.std), repr(c.expert_coverage), c.runs])
        _atomic_write(Path(base_config.output_dir) / "table1.csv", buf.getvalue())
    return cells


def run_radius_ablation(base_config: ExperimentConfig, radius_values):
    """One experiment per radius; also reports whether the expert survived per seed."""
    radius_values = [float(r) for r in radius_values]
    if len(radius_values) < 2:
        raise ValueError("the ablation needs at least two radius values")
    results = {}
    rows = []
    for r in radius_values:
        cfg = base_config.replace(radius=r, output_dir=str(Path(base_config.output_dir) / f"radius_{r!r}"))
        agg, runs = run_experiment(cfg, return_results=True)
        survived = {res.seed: res.pi_star_in_offline for res in runs}
        results[r] = (agg, survived)
        for seed in sorted(survived):
            rows.append([repr(r), seed, int(survived[seed])])
    buf = io.StringIO()
    buf.write(_header(base_config, {"radius_values": radius_values}))
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["radius", "seed", "expert_survived"])
    writer.writerows(rows)
    _atomic_write(Path(base_config.output_dir) / "radius_survival.csv", buf.getvalue())
    return results
