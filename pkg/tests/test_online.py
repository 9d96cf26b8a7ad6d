import math

import numpy as np
import pytest

from bridge_rl.config import ExperimentConfig
from bridge_rl.mdp import expected_return, optimal_policy
from bridge_rl.offline import collect_dataset
from bridge_rl.online import (
    RegretEvaluator,
    VisitCounts,
    bonus,
    evaluate_regret,
    expected_bonus,
    filter_log_inv_delta,
    make_problem,
    online_filter,
    run_baseline_pbrl,
    run_bridge,
    select_pair,
    xi_table,
)
from bridge_rl.preference import Embedding


def rngs_for(seed):
    ss = np.random.SeedSequence(seed).spawn(4)
    g = [np.random.default_rng(s) for s in ss]
    return g[0], {"pool": g[1], "online": g[2], "pbrl_pool": g[3]}


def quick_run(config, seed=0, algo=run_bridge):
    problem = make_problem(config)
    data_rng, rngs = rngs_for(seed)
    ds = collect_dataset(problem.env, problem.expert, config.n, data_rng)
    return algo(problem, ds, config, rngs, seed)


class TestCounts:
    def test_add_paths(self):
        c = VisitCounts.empty(3, 2).add_paths(np.array([[0, 1, 2]]), np.array([[1, 0]]))
        assert c.online[0, 1, 1] == 1 and c.online[1, 0, 2] == 1
        assert c.n_offline.sum() == 0 and c.n_online.sum() == 2

    def test_add_paths_is_pure(self):
        c = VisitCounts.empty(2, 1)
        c.add_paths(np.array([[0, 1]]), np.array([[0]]))
        assert c.online.sum() == 0

    def test_from_dataset(self, star, rng):
        ds = collect_dataset(star, optimal_policy(star), 4, rng)
        c = VisitCounts.from_dataset(ds, 5, 4)
        assert c.combined.sum() == 4 * 8


class TestXi:
    def test_unvisited_gets_cap(self):
        xi = xi_table(np.zeros((2, 2)), 0.3, 1.0, 4, 2, 2)
        np.testing.assert_array_equal(xi, 0.6)

    def test_closed_form(self):
        visits = np.array([[1000.0]])
        u = 5 * math.log(1) + math.log(6 * math.log(1000)) + 2.0
        xi = xi_table(visits, 0.1, 2.0, 5, 1, 1)
        assert xi[0, 0] == pytest.approx(min(0.2, 0.4 * math.sqrt(u / 1000)))

    def test_nonincreasing_in_visits(self):
        visits = np.arange(0, 5000, 7, dtype=float)[None, :]
        xi = xi_table(visits, 0.1, 3.0, 8, 5, 4)[0]
        assert (np.diff(xi) <= 1e-15).all()

    def test_filter_delta_in_log_space(self):
        want = math.log(2 / 0.1 * 5**16)
        assert filter_log_inv_delta(0.1, 16, 5) == pytest.approx(want, rel=1e-14)


class TestBonus:
    def test_constant_xi(self, star, rng):
        xi = np.full((5, 4), 0.25)
        pols = rng.integers(0, 4, (6, 5))
        np.testing.assert_allclose(expected_bonus(pols, xi, star.transitions, star.initial_dist, 8), 2.0)
        np.testing.assert_allclose(bonus(pols, xi, star, 3, rng), 2.0)

    def test_monte_carlo_matches_exact(self, star, rng):
        xi = rng.random((5, 4))
        pols = rng.integers(0, 4, (3, 5))
        exact = expected_bonus(pols, xi, star.transitions, star.initial_dist, 8)
        np.testing.assert_allclose(bonus(pols, xi, star, 20_000, rng), exact, atol=0.03)

    def test_rejects_zero_rollouts(self, star, rng):
        with pytest.raises(ValueError):
            bonus([[0] * 5], np.zeros((5, 4)), star, 0, rng)


class TestFilterAndSelection:
    def test_filter_with_zero_width_keeps_maximisers(self):
        z = np.zeros((4, 2))
        kept = online_filter(z, np.array([1.0, 3.0, 3.0, 2.0]), 1.0, np.zeros(4))
        assert kept.tolist() == [1, 2]

    def test_large_width_keeps_everything(self, rng):
        z = rng.normal(size=(10, 3)) * 10
        assert len(online_filter(z, rng.normal(size=10), 100.0, np.zeros(10))) == 10

    def test_bonus_rescues_candidates(self):
        z = np.zeros((2, 1))
        s = np.array([0.0, 1.0])
        assert online_filter(z, s, 1.0, np.zeros(2)).tolist() == [1]
        assert online_filter(z, s, 1.0, np.full(2, 0.5)).tolist() == [0, 1]

    def test_alg1_picks_most_distant(self):
        z = np.array([[0.0], [1.0], [5.0], [2.0]])
        assert select_pair(np.arange(4), z, np.zeros(4), 1.0, np.zeros(4)) == (0, 2)

    def test_alg1_respects_subset(self):
        z = np.array([[0.0], [1.0], [5.0], [2.0]])
        assert select_pair(np.array([0, 1, 3]), z, np.zeros(4), 1.0, np.zeros(4)) == (0, 3)

    def test_singleton_pairs_with_itself(self):
        assert select_pair(np.array([2]), np.eye(3), np.zeros(3), 1.0, np.zeros(3)) == (2, 2)

    def test_ucb_prefers_high_score_first(self):
        z = np.array([[0.0], [1.0]])
        assert select_pair(np.arange(2), z, np.array([0.0, 5.0]), 1.0, np.zeros(2), mode="ucb") == (1, 0)

    def test_best_vs_random(self, rng):
        i, j = select_pair(np.arange(5), np.zeros((5, 1)), np.arange(5.0), 1.0, np.zeros(5), "best_vs_random", rng)
        assert i == 4 and 0 <= j < 5

    def test_empty_and_unknown(self, rng):
        with pytest.raises(ValueError):
            select_pair(np.array([], dtype=int), np.zeros((0, 1)), [], 1.0, [])
        with pytest.raises(ValueError):
            select_pair(np.arange(2), np.zeros((2, 1)), np.zeros(2), 1.0, np.zeros(2), mode="greedy")


class TestRegret:
    def test_pair_regret_closed_form(self, star):
        expert = optimal_policy(star)
        other = np.array([0, 3, 3, 3, 3])
        v_star, v_other = expected_return(star, expert), expected_return(star, other)
        got = evaluate_regret(star, np.stack([expert, other]), expert)
        assert got == pytest.approx((v_star - v_other) / 2)

    def test_optimal_has_zero_regret(self, star):
        expert = optimal_policy(star)
        assert evaluate_regret(star, expert, expert) == 0.0

    def test_pseudo_needs_weights(self, star):
        with pytest.raises(ValueError):
            RegretEvaluator(star, optimal_policy(star), "pseudo")

    def test_pseudo_mode_is_linear_score(self, star):
        emb = Embedding.for_mdp("state_counts", star)
        ev = RegretEvaluator(star, optimal_policy(star), "pseudo", star.rewards.copy(), emb)
        # state_counts . rewards is the return without the final state
        pi = np.array([0, 3, 3, 3, 3])
        phi = emb.policies_exact(pi, star.transitions, star.initial_dist)[0]
        assert ev.values(pi)[0] == pytest.approx(phi @ star.rewards)


@pytest.fixture(scope="module")
def result():
    return quick_run(ExperimentConfig(T=15, seeds=(0,)))


class TestBridgeRun:
    def test_record_count(self, result):
        assert [r.t for r in result.records] == list(range(1, 16))

    def test_cumulative_is_running_sum(self, result):
        inst = np.array([r.inst_regret for r in result.records])
        np.testing.assert_allclose([r.cum_regret for r in result.records], np.cumsum(inst), rtol=1e-12)

    def test_regrets_nonnegative(self, result):
        assert all(r.inst_regret >= -1e-12 and r.best_policy_regret >= -1e-12 for r in result.records)

    def test_queries_inside_offline_set(self, result):
        n = len(result.candidates)
        assert all(0 <= r.pair_i < n and 0 <= r.pair_j < n for r in result.records)
        assert all(1 <= r.pi_t_size <= n for r in result.records)

    def test_offline_set_contains_bc(self, result):
        assert (result.candidates == result.bc_policy).all(axis=1).any()

    def test_preference_log_size(self, result):
        assert len(result.preference_log) == 15

    def test_data_matrix_tracks_queries(self, result):
        st = result.final_state
        x = st.records_x
        reg = st.v_emp.v - x.T @ x
        np.testing.assert_allclose(reg, reg[0, 0] * np.eye(len(reg)), atol=1e-9)
        assert reg[0, 0] > 0

    def test_weights_feasible(self, result):
        assert np.linalg.norm(result.final_state.w_proj.w) <= ExperimentConfig().W + 1e-12

    def test_zero_rounds_gives_bc(self):
        r = quick_run(ExperimentConfig(T=0))
        assert r.records == [] and r.final_best_regret == r.bc_regret
        np.testing.assert_array_equal(r.best_policy, r.bc_policy)

    def test_known_dynamics_have_no_bonus(self):
        r = quick_run(ExperimentConfig(T=5, dynamics="known", bonus_eta=0.3))
        assert all(rec.bonus_1 == 0 and rec.bonus_2 == 0 for rec in r.records)

    def test_frozen_weights_are_used(self):
        w = tuple(float(v) for v in np.linspace(-0.05, 0.05, 9))
        r = quick_run(ExperimentConfig(T=3, frozen_w=w))
        np.testing.assert_array_equal(r.final_state.w_proj.w, w)

    def test_theoretical_gamma_grows_with_history(self):
        r = quick_run(ExperimentConfig(T=4, gamma="theoretical", bonus_eta="theoretical", bonus_estimator="exact"))
        g = [rec.gamma for rec in r.records]
        assert all(v > 0 for v in g)
        assert len(r.final_state.bonus_history) == 8

    @pytest.mark.parametrize("mode", ["ucb", "pure_uncertainty", "best_vs_random"])
    def test_selection_modes_run(self, mode):
        r = quick_run(ExperimentConfig(T=3, selection=mode))
        assert len(r.records) == 3

    def test_repeatable(self):
        cfg = ExperimentConfig(T=5)
        a, b = quick_run(cfg, seed=4), quick_run(cfg, seed=4)
        assert a.records == b.records


class TestBaseline:
    def test_star_pool_is_every_policy(self):
        r = quick_run(ExperimentConfig(T=2, algorithm="pbrl"), algo=run_baseline_pbrl)
        assert len(r.candidates) == 4**5

    def test_starts_without_counts(self):
        r = quick_run(ExperimentConfig(T=1, algorithm="pbrl"), algo=run_baseline_pbrl)
        assert r.final_state.counts.offline.sum() == 0
        assert r.final_state.counts.online.sum() == 2 * 8

    def test_sampled_pool_size(self):
        cfg = ExperimentConfig(env="gridworld", T=1, pool="sample", pool_size=200, pbrl_pool_size=300, algorithm="pbrl")
        r = quick_run(cfg, algo=run_baseline_pbrl)
        assert len(r.candidates) == max(300, r.offline_size)


class TestSpecProperties:
    def test_zero_counts_saturate_bonus(self, star, rng):
        xi = xi_table(np.zeros((5, 4)), 0.05, 10.0, 8, 5, 4)
        pols = rng.integers(0, 4, (4, 5))
        # every xi equals 2 eta, so only summation rounding separates the result from 2 eta H
        np.testing.assert_allclose(expected_bonus(pols, xi, star.transitions, star.initial_dist, 8), 2 * 0.05 * 8, rtol=1e-14)
        np.testing.assert_allclose(bonus(pols, xi, star, 5, rng), 2 * 0.05 * 8, rtol=1e-14)

    def test_huge_counts_shrink_bonus(self, star, rng):
        xi = xi_table(np.full((5, 4), 1e12), 0.05, 10.0, 8, 5, 4)
        pols = rng.integers(0, 4, (4, 5))
        assert expected_bonus(pols, xi, star.transitions, star.initial_dist, 8).max() <= 1e-4 * 0.05 * 8

    def test_combined_estimate_pools_counts(self):
        from bridge_rl.online import combined_transition_estimate

        off = np.zeros((3, 1, 3), dtype=np.int64)
        on = np.zeros_like(off)
        off[0, 0, 1] = 1
        on[0, 0, 2] = 1
        p = combined_transition_estimate(VisitCounts(off, on))
        np.testing.assert_array_equal(p[0, 0], [0.0, 0.5, 0.5])

    def test_singleton_expert_set_has_no_regret(self):
        cfg = ExperimentConfig(T=10, radius=0.0, dynamics="known", n_offline=300)
        r = quick_run(cfg)
        assert r.pi_star_in_offline
        assert all(rec.inst_regret == pytest.approx(0.0, abs=1e-12) for rec in r.records)

    def test_frozen_weights_never_grow_the_set(self):
        w = tuple(np.random.default_rng(0).normal(size=9) * 0.2)
        cfg = ExperimentConfig(T=30, radius=0.8, dynamics="known", frozen_w=w, gamma=1.0)
        sizes = [rec.pi_t_size for rec in quick_run(cfg).records]
        assert all(b <= a for a, b in zip(sizes, sizes[1:]))

    def test_step_invariants(self):
        cfg = ExperimentConfig(T=20, radius=0.8)
        problem = make_problem(cfg)
        data_rng, rngs = rngs_for(1)
        ds = collect_dataset(problem.env, problem.expert, cfg.n, data_rng)
        from bridge_rl import online as O

        conf = O.offline_stage(problem, ds, cfg, rngs["pool"])
        ctx = O._context(problem, cfg, conf.candidates, conf.bc_policy, 1)
        state = O._initial_state(ctx, VisitCounts.from_dataset(ds, 5, 4))
        bound = 2 * problem.embedding.norm_bound
        for _ in range(cfg.T):
            w = state.w_proj.w
            p_hat = state.p_hat
            scores = problem.embedding.policies_exact(conf.candidates, p_hat, problem.env.initial_dist) @ w
            state, rec, entries = O.bridge_step(ctx, state, rngs["online"])
            assert 1 <= len(state.pi_t) <= len(conf.candidates)
            assert int(np.argmax(scores)) in state.pi_t
            assert all(np.linalg.norm(e.delta_phi) <= bound + 1e-12 for e in entries)
