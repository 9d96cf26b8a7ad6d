"""Hot-loop kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it imports cleanly; setting the
environment variable ``BRIDGE_RL_PURE_PYTHON=1`` forces the fallback.
Callers go through the thin wrappers below, which normalise dtypes and
memory layout so that both backends see identical inputs.
"""

from __future__ import annotations

import importlib
import os
from types import ModuleType

import numpy as np

from . import _pykernels


def load_backend(name: str) -> ModuleType:
    """Return the kernel module for ``"cython"`` or ``"python"``."""
    if name == "python":
        return _pykernels
    if name == "cython":
        return importlib.import_module(f"{__name__}._ckernels")
    raise ValueError(f"unknown kernel backend {name!r}")


def _select() -> tuple[ModuleType, str]:
    if os.environ.get("BRIDGE_RL_PURE_PYTHON", "").strip() not in ("", "0"):
        return _pykernels, "python"
    try:
        return load_backend("cython"), "cython"
    except ImportError:
        return _pykernels, "python"


_impl, BACKEND = _select()


def _f64(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def _i64(x):
    return np.ascontiguousarray(x, dtype=np.int64)


def batch_bhattacharyya(p_ref, agree, d0, horizon: int, backend: ModuleType | None = None):
    """Bhattacharyya coefficients for a batch of agreement masks.

    Row ``k`` runs ``x <- (x * agree[k]) @ p_ref`` for ``horizon`` steps from
    ``x = d0`` and returns ``sum(x)``.
    """
    impl = backend or _impl
    agree = np.ascontiguousarray(agree, dtype=bool).view(np.uint8)
    if agree.ndim == 1:
        agree = agree[None, :]
    return impl.batch_bhattacharyya(_f64(p_ref), agree, _f64(d0), int(horizon))


def cumulative(probs):
    """Row-wise CDF whose last entry is exactly 1.0 (trailing zeros stay at 1.0)."""
    cum = np.cumsum(np.asarray(probs, dtype=np.float64), axis=-1)
    return np.ascontiguousarray(cum / cum[..., -1:])


def sample_paths(cum_p, cum_d0, policies, which, uniforms, backend: ModuleType | None = None):
    """Inverse-CDF rollouts driven by pre-drawn uniforms in ``[0, 1)``.

    ``uniforms[k, 0]`` picks the initial state of rollout ``k`` and
    ``uniforms[k, h + 1]`` its transition at step ``h``; rollout ``k``
    follows ``policies[which[k]]``.
    """
    impl = backend or _impl
    policies = _i64(policies)
    if policies.ndim == 1:
        policies = policies[None, :]
    return impl.sample_paths(_f64(cum_p), _f64(cum_d0), policies, _i64(which), _f64(uniforms))


def filter_mask(z, scores, bonus, gamma: float, tol: float = 0.0, backend: ModuleType | None = None):
    """Keep ``i`` iff ``scores[i]-scores[j] + gamma*|z_i-z_j| + bonus[i]+bonus[j] >= -tol`` for all ``j``."""
    impl = backend or _impl
    return impl.filter_mask(_f64(z), _f64(scores), _f64(bonus), float(gamma), float(tol))


def best_pair(z, lin, bonus, gamma: float, backend: ModuleType | None = None):
    """Lexicographically first ordered pair maximising ``lin[i]-lin[j] + gamma*|z_i-z_j| + bonus[i]+bonus[j]``."""
    impl = backend or _impl
    return impl.best_pair(_f64(z), _f64(lin), _f64(bonus), float(gamma))


__all__ = [
    "BACKEND",
    "batch_bhattacharyya",
    "best_pair",
    "cumulative",
    "filter_mask",
    "load_backend",
    "sample_paths",
]
