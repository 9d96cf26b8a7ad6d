import itertools

import numpy as np
import pytest

from bridge_rl.mdp import (
    GRID_ENCLOSED,
    TabularMDP,
    InvalidMDPError,
    all_policies,
    expected_return,
    expected_returns,
    make_env,
    monte_carlo_return,
    occupancy,
    optimal_policy,
    sample_paths,
    sample_trajectory,
    state_distributions,
)

from conftest import random_mdp


def deterministic_chain(horizon=1):
    # two states, one action, 0 -> 1 -> 1
    p = np.zeros((2, 1, 2))
    p[0, 0, 1] = 1.0
    p[1, 0, 1] = 1.0
    return TabularMDP(p, [1.0, 0.0], [0.0, 1.0], horizon)


def brute_force_return(mdp, policy):
    """Sum over every state sequence of probability times return."""
    total = 0.0
    for seq in itertools.product(range(mdp.n_states), repeat=mdp.horizon + 1):
        prob = mdp.initial_dist[seq[0]]
        for h in range(mdp.horizon):
            prob *= mdp.transitions[seq[h], policy[seq[h]], seq[h + 1]]
        total += prob * mdp.rewards[list(seq)].sum()
    return total


class TestConstruction:
    def test_rejects_non_stochastic_rows(self):
        p = np.full((2, 1, 2), 0.4)
        with pytest.raises(InvalidMDPError):
            TabularMDP(p, [1.0, 0.0], [0.0, 0.0], 1)

    def test_rejects_bad_initial_distribution(self):
        p = np.full((2, 1, 2), 0.5)
        with pytest.raises(InvalidMDPError):
            TabularMDP(p, [0.7, 0.7], [0.0, 0.0], 1)

    def test_arrays_are_read_only(self, star):
        with pytest.raises(ValueError):
            star.transitions[0, 0, 0] = 1.0

    def test_unknown_env(self):
        with pytest.raises(KeyError):
            make_env("nope")


class TestStar:
    def test_shape_and_rewards(self, star):
        assert (star.n_states, star.n_actions, star.horizon) == (5, 4, 8)
        np.testing.assert_array_equal(star.rewards, [0, 0, 6, -1, 10])
        np.testing.assert_array_equal(star.initial_dist, [1, 0, 0, 0, 0])

    def test_impossible_action_stays(self, star):
        assert star.transitions[4, 1, 4] == 1.0  # left in s4

    def test_up_from_hub(self, star):
        assert star.transitions[1, 2, 4] == pytest.approx(0.7)

    def test_failure_mass_uniform_over_other_states(self, star):
        row = star.transitions[1, 2]
        np.testing.assert_allclose(row[[0, 1, 2, 3]], 0.3 / 4)

    def test_rows_sum_to_one(self, star):
        np.testing.assert_allclose(star.transitions.sum(axis=-1), 1.0, atol=1e-12)

    @pytest.mark.slow
    def test_empirical_transitions(self, star, rng):
        pi = np.array([0, 2, 1, 2, 3])
        states, actions = sample_paths(star, pi, 100_000 // 8, rng)
        s, a, s2 = states[:, :-1].ravel(), actions.ravel(), states[:, 1:].ravel()
        for state in np.unique(s):
            mask = s == state
            if mask.sum() < 2000:
                continue
            freq = np.bincount(s2[mask], minlength=5) / mask.sum()
            np.testing.assert_allclose(freq, star.transitions[state, pi[state]], atol=0.01)


class TestGridworld:
    def test_shape(self, grid):
        assert (grid.n_states, grid.n_actions, grid.horizon) == (16, 5, 10)
        assert grid.initial_dist[0] == 1.0

    def test_stay_is_deterministic(self, grid):
        np.testing.assert_array_equal(grid.transitions[:, 4, :], np.eye(16))

    def test_rows_sum_to_one(self, grid):
        np.testing.assert_allclose(grid.transitions.sum(axis=-1), 1.0, atol=1e-12)

    def test_start_corner_redistributes_blocked_mass(self, grid):
        # "right" from (0,0): up and left are off-grid, so the 0.2 goes to right and down
        row = grid.transitions[0, 3]
        assert row[1] + row[4] == pytest.approx(1.0)
        assert row[1] > row[4] > 0

    def test_rewards(self, grid):
        r = grid.rewards.reshape(4, 4)
        assert r[3, 3] == 10 and r[GRID_ENCLOSED] == 20
        assert sorted(zip(*np.nonzero(r == -1))) == [(0, 2), (0, 3), (1, 2), (1, 3)]

    def test_enclosed_cell_unreachable(self, grid, rng):
        enclosed = GRID_ENCLOSED[0] * 4 + GRID_ENCLOSED[1]
        pols = rng.integers(0, 5, size=(100, 16))
        dist = state_distributions(grid.transitions, pols, grid.initial_dist, grid.horizon)
        assert dist[:, :, enclosed].max() == 0.0

    def test_p_succ_override(self):
        g = make_env("gridworld", p_succ=0.9)
        assert g.transitions[6, 3, 7] == pytest.approx(0.9)  # (1,2) right, nothing blocked


class TestRollouts:
    def test_deterministic_trajectory(self):
        mdp = deterministic_chain(horizon=3)
        tau = sample_trajectory(mdp, [0, 0], np.random.default_rng(0))
        np.testing.assert_array_equal(tau.states, [0, 1, 1, 1])
        np.testing.assert_array_equal(tau.actions, [0, 0, 0])

    def test_lengths(self, star, rng):
        tau = sample_trajectory(star, [0, 0, 0, 0, 0], rng)
        assert len(tau.states) == 9 and len(tau.actions) == 8
        assert tau.states.min() >= 0 and tau.states.max() < 5

    def test_monte_carlo_rejects_zero(self, star, rng):
        with pytest.raises(ValueError):
            monte_carlo_return(star, [0] * 5, 0, rng)

    def test_single_rollout_equals_its_return(self, star):
        pi = [0, 2, 1, 2, 3]
        a = monte_carlo_return(star, pi, 1, np.random.default_rng(5))
        tau = sample_trajectory(star, pi, np.random.default_rng(5))
        assert a == star.rewards[tau.states].sum()

    def test_deterministic_mdp_mc_is_exact(self):
        mdp = deterministic_chain(horizon=4)
        assert monte_carlo_return(mdp, [0, 0], 10, np.random.default_rng(0)) == expected_return(mdp, [0, 0])

    @pytest.mark.slow
    def test_monte_carlo_matches_exact(self, star, rng):
        pi = np.array([0, 2, 1, 2, 0])
        states, _ = sample_paths(star, pi, 100_000, rng)
        returns = star.rewards[states].sum(axis=1)
        se = returns.std() / np.sqrt(len(returns))
        assert abs(returns.mean() - expected_return(star, pi)) < 3 * se


class TestExactEvaluation:
    def test_chain(self):
        assert expected_return(deterministic_chain(), [0, 0]) == 1.0

    def test_zero_rewards(self, star):
        mdp = TabularMDP(star.transitions, star.initial_dist, np.zeros(5), 8)
        assert expected_return(mdp, [1, 2, 3, 0, 1]) == 0.0

    def test_matches_trajectory_enumeration(self, rng):
        for _ in range(20):
            S, A, H = rng.integers(2, 4), rng.integers(1, 4), rng.integers(1, 5)
            mdp = random_mdp(rng, S, A, H)
            pi = rng.integers(0, A, size=S)
            assert expected_return(mdp, pi) == pytest.approx(brute_force_return(mdp, pi), abs=1e-10)

    def test_batch_matches_single(self, star, rng):
        pols = rng.integers(0, 4, size=(10, 5))
        np.testing.assert_allclose(expected_returns(star, pols), [expected_return(star, p) for p in pols], atol=1e-12)


class TestOccupancy:
    def test_first_slice_is_d0(self, star):
        pi = np.array([0, 2, 1, 2, 0])
        occ = occupancy(star, pi)
        expected = np.zeros((5, 4))
        expected[0, 0] = 1.0
        np.testing.assert_array_equal(occ[0], expected)

    def test_slices_sum_to_one(self, grid, rng):
        for _ in range(10):
            occ = occupancy(grid, rng.integers(0, 5, size=16))
            assert occ.shape == (10, 16, 5)
            np.testing.assert_allclose(occ.sum(axis=(1, 2)), 1.0, atol=1e-10)

    def test_deterministic_mdp_point_masses(self):
        occ = occupancy(deterministic_chain(horizon=3), [0, 0])
        assert set(np.unique(occ)) == {0.0, 1.0}

    @pytest.mark.slow
    def test_matches_rollout_frequencies(self, star, rng):
        pi = np.array([0, 3, 1, 2, 1])
        states, actions = sample_paths(star, pi, 100_000, rng)
        emp = np.zeros((5, 4))
        np.add.at(emp, (states[:, 2], actions[:, 2]), 1.0)
        np.testing.assert_allclose(emp / len(states), occupancy(star, pi)[2], atol=0.01)


class TestOptimalPolicy:
    def test_single_state_bandit(self):
        # one decision, successor rewards distinct
        p = np.zeros((3, 2, 3))
        p[0, 0, 1] = p[0, 1, 2] = 1.0
        p[1, :, 1] = p[2, :, 2] = 1.0
        mdp = TabularMDP(p, [1, 0, 0], [0, 1, 5], 1)
        assert optimal_policy(mdp)[0] == 1

    def test_all_equal_rewards_tie_break(self, star):
        mdp = TabularMDP(star.transitions, star.initial_dist, np.ones(5), 8)
        np.testing.assert_array_equal(optimal_policy(mdp), np.zeros(5, dtype=int))

    def test_star_matches_exhaustive_enumeration(self, star):
        best = expected_returns(star, all_policies(5, 4)).max()
        assert expected_return(star, optimal_policy(star)) == best

    @pytest.mark.parametrize("name", ["star", "gridworld"])
    def test_beats_random_policies(self, name, rng):
        env = make_env(name)
        v_star = expected_return(env, optimal_policy(env))
        pols = rng.integers(0, env.n_actions, size=(1000, env.n_states))
        assert expected_returns(env, pols).max() <= v_star + 1e-12

    def test_all_policies_count(self):
        assert all_policies(5, 4).shape == (1024, 5)
        assert all_policies(1, 3).tolist() == [[0], [1], [2]]
