"""Time the compiled kernels against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from bridge_rl import _kernels
from bridge_rl._kernels import cumulative, load_backend
from bridge_rl.mdp import build_gridworld, policy_transitions


def cases(rng):
    grid = build_gridworld()
    pool = rng.integers(0, 5, (20_000, 16))
    ref = pool[0]
    p_ref = policy_transitions(grid.transitions, ref)
    agree = pool == ref
    z = rng.normal(size=(1024, 9))
    scores = rng.normal(size=1024) * 0.1
    bonus = rng.random(1024) * 0.01
    cum_p = cumulative(grid.transitions)
    cum_d0 = cumulative(grid.initial_dist)
    which = rng.integers(0, 200, 20_000)
    uniforms = rng.random((20_000, 11))
    return {
        "bhattacharyya 20000 policies, H=10": lambda b: _kernels.batch_bhattacharyya(p_ref, agree, grid.initial_dist, 10, backend=b),
        "filter 1024 candidates, d=9": lambda b: _kernels.filter_mask(z, scores, bonus, 1.0, backend=b),
        "best pair 1024 candidates, d=9": lambda b: _kernels.best_pair(z, scores, bonus, 1.0, backend=b),
        "rollouts 20000 x H=10": lambda b: _kernels.sample_paths(cum_p, cum_d0, pool[:200], which, uniforms, backend=b),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    backends = {"python": load_backend("python")}
    try:
        backends["cython"] = load_backend("cython")
    except ImportError:
        print("compiled kernels not built; timing the fallback only")
    rng = np.random.default_rng(0)
    print(f"{'kernel':38s}" + "".join(f"{name:>12s}" for name in backends) + ("     speedup" if len(backends) == 2 else ""))
    for label, fn in cases(rng).items():
        times = {}
        for name, mod in backends.items():
            fn(mod)  # warm up
            times[name] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat))
        row = f"{label:38s}" + "".join(f"{t * 1e3:10.2f}ms" for t in times.values())
        if len(times) == 2:
            row += f"{times['python'] / times['cython']:11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
