import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bridge_rl.geometry import (
    EnumerationTooLarge,
    StochasticPolicyError,
    agreement_matrix,
    brute_force_squared_hellinger,
    squared_hellinger,
    squared_hellinger_to_reference,
    tv_upper_bound,
)
from bridge_rl.mdp import all_policies

from conftest import random_mdp


def path_law(p, pi, d0, horizon):
    """Dictionary from state sequence to probability, built by plain enumeration."""
    law = {}
    for seq in itertools.product(range(len(d0)), repeat=horizon + 1):
        prob = d0[seq[0]]
        for h in range(horizon):
            prob *= p[seq[h], pi[seq[h]], seq[h + 1]]
        if prob > 0:
            law[seq] = prob
    return law


def oracle_h2(p1, pi1, p2, pi2, d0, horizon):
    # the action sequence is a function of the states, so the laws agree
    # on a path only if every visited state (except the last) picks the same action
    l1, l2 = path_law(p1, pi1, d0, horizon), path_law(p2, pi2, d0, horizon)
    bc = 0.0
    for seq, q1 in l1.items():
        if seq in l2 and all(pi1[s] == pi2[s] for s in seq[:-1]):
            bc += math.sqrt(q1 * l2[seq])
    return 1.0 - bc


class TestAgainstOracle:
    def test_random_instances(self, rng):
        for _ in range(60):
            S, A, H = rng.integers(1, 5), rng.integers(1, 4), rng.integers(1, 5)
            a, b = random_mdp(rng, S, A, H, sparse=True), random_mdp(rng, S, A, H)
            pi1, pi2 = rng.integers(0, A, S), rng.integers(0, A, S)
            want = oracle_h2(a.transitions, pi1, b.transitions, pi2, a.initial_dist, H)
            got = squared_hellinger(a.transitions, pi1, b.transitions, pi2, a.initial_dist, H)
            assert got == pytest.approx(want, abs=1e-12)

    def test_brute_force_matches_oracle(self, rng):
        mdp = random_mdp(rng, 3, 2, 3)
        pi1, pi2 = np.array([0, 1, 1]), np.array([0, 0, 1])
        want = oracle_h2(mdp.transitions, pi1, mdp.transitions, pi2, mdp.initial_dist, 3)
        got = brute_force_squared_hellinger(mdp.transitions, pi1, mdp.transitions, pi2, mdp.initial_dist, 3)
        assert got == pytest.approx(want, abs=1e-12)

    def test_star_batch_against_single(self, star):
        pols = all_policies(5, 4)[::37]
        ref = np.array([0, 2, 1, 2, 0])
        batch = squared_hellinger_to_reference(star.transitions, pols, ref, star.initial_dist, star.horizon)
        single = [squared_hellinger(star.transitions, p, star.transitions, ref, star.initial_dist, 8) for p in pols]
        np.testing.assert_allclose(batch, single, atol=1e-14)


class TestClosedForms:
    def test_identical_is_exactly_zero(self, grid, rng):
        for _ in range(20):
            pi = rng.integers(0, 5, 16)
            assert squared_hellinger(grid.transitions, pi, grid.transitions, pi, grid.initial_dist, 10) == 0.0

    def test_disagree_at_start_is_one(self, star):
        pi1, pi2 = np.array([0, 2, 1, 2, 0]), np.array([3, 2, 1, 2, 0])
        assert squared_hellinger(star.transitions, pi1, star.transitions, pi2, star.initial_dist, 8) == 1.0

    def test_disagreement_only_at_unreachable_state(self, grid):
        pi1 = np.zeros(16, dtype=int)
        pi2 = pi1.copy()
        pi2[9] = 3  # walled-in cell
        assert squared_hellinger(grid.transitions, pi1, grid.transitions, pi2, grid.initial_dist, 10) == 0.0

    def test_one_step_bandit(self):
        # one state pair agreeing at s0 with different next-state laws
        p = np.array([[[0.5, 0.5]], [[0.0, 1.0]]])
        q = np.array([[[0.9, 0.1]], [[0.0, 1.0]]])
        want = 1 - (math.sqrt(0.45) + math.sqrt(0.05))
        got = squared_hellinger(p, [0, 0], q, [0, 0], [1.0, 0.0], 1)
        assert got == pytest.approx(want, abs=1e-15)

    def test_star_disagree_at_hub(self, star):
        # paths leaving s0 reach s1 w.p. 0.7 at step 1; disagreement there kills that mass
        pi1, pi2 = np.array([0, 2, 2, 2, 2]), np.array([0, 3, 2, 2, 2])
        p = star.transitions
        d0 = star.initial_dist
        want = oracle_h2(p, pi1, p, pi2, d0, 3)
        assert squared_hellinger(p, pi1, p, pi2, d0, 3) == pytest.approx(want, abs=1e-14)


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 2**31),
    S=st.integers(1, 4),
    A=st.integers(1, 3),
    H=st.integers(1, 5),
)
def test_range_and_symmetry(seed, S, A, H):
    rng = np.random.default_rng(seed)
    a, b = random_mdp(rng, S, A, H), random_mdp(rng, S, A, H)
    pi1, pi2 = rng.integers(0, A, S), rng.integers(0, A, S)
    d0 = a.initial_dist
    h12 = squared_hellinger(a.transitions, pi1, b.transitions, pi2, d0, H)
    h21 = squared_hellinger(b.transitions, pi2, a.transitions, pi1, d0, H)
    assert 0.0 <= h12 <= 1.0
    assert h12 == pytest.approx(h21, abs=1e-14)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), H=st.integers(1, 6))
def test_nondecreasing_in_horizon(seed, H):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, 3, 2, H + 1)
    pi1, pi2 = rng.integers(0, 2, 3), rng.integers(0, 2, 3)
    short = squared_hellinger(mdp.transitions, pi1, mdp.transitions, pi2, mdp.initial_dist, H)
    long = squared_hellinger(mdp.transitions, pi1, mdp.transitions, pi2, mdp.initial_dist, H + 1)
    assert long >= short - 1e-14


class TestErrors:
    def test_stochastic_policy_rejected(self, star):
        probs = np.full((5, 4), 0.25)
        with pytest.raises(StochasticPolicyError):
            squared_hellinger(star.transitions, probs, star.transitions, [0] * 5, star.initial_dist, 8)

    def test_float_vector_rejected(self, star):
        with pytest.raises(StochasticPolicyError):
            agreement_matrix(star.transitions, np.zeros(5), star.transitions, np.zeros(5, dtype=int))

    def test_enumeration_limit(self, grid):
        pi = np.zeros(16, dtype=int)
        with pytest.raises(EnumerationTooLarge):
            brute_force_squared_hellinger(grid.transitions, pi, grid.transitions, pi, grid.initial_dist, 10)

    @pytest.mark.parametrize("bad", [-0.1, 1.5])
    def test_tv_bound_domain(self, bad):
        with pytest.raises(ValueError):
            tv_upper_bound(bad)

    def test_tv_bound_values(self):
        assert tv_upper_bound(0.0) == 0.0
        assert tv_upper_bound(0.5) == 1.0


def test_agreement_matrix_zeroes_disagreeing_rows(star):
    pi1, pi2 = np.array([0, 1, 2, 3, 0]), np.array([0, 2, 2, 0, 0])
    m = agreement_matrix(star.transitions, pi1, star.transitions, pi2)
    assert not m[[1, 3]].any()
    np.testing.assert_allclose(m[0], star.transitions[0, 0])
