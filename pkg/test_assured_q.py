import itertools

import numpy as np
import pytest
from scipy import stats

from safe_explore.assured_q import (
    ConstantStepSize,
    QTable,
    VisitCountStepSize,
    epsilon_greedy,
    generative_assured_q,
    policy_eval_decomposed,
    q_update,
    run_episodic,
    simulate_policy_q,
    step_size_for,
    value_iteration,
)
from safe_explore.barrier import BarrierTable, bstar_oracle
from safe_explore.environments import DOWN, LEFT, RIGHT, UP, build_corridor, corridor_sinks, gen_random_mdp
from safe_explore.errors import DeadStateError, ParameterError
from safe_explore.mdp_core import NEG_INF, XReal
from safe_explore.models import LearnerParams, LearningMode, StepSizeRule, TieBreak


class TestQUpdate:
    def test_condemned_pair_is_neg_inf(self):
        Q, B = QTable(2, 2), BarrierTable.from_pairs(2, 2, [(0, 0)])
        q_update(Q, B, 0, 0, 1, 100.0, eta=0.1, gamma=0.9)
        assert Q.get(0, 0) is NEG_INF

    def test_reward_step(self):
        Q, B = QTable(2, 2), BarrierTable(2, 2)
        q_update(Q, B, 0, 1, 1, 100.0, eta=0.1, gamma=0.9)
        assert Q.get(0, 1) == XReal(10.0)

    def test_neg_inf_successor_propagates(self):
        Q, B = QTable(2, 2), BarrierTable(2, 2)
        Q.set(1, 0, NEG_INF)
        Q.set(1, 1, NEG_INF)
        q_update(Q, B, 0, 0, 1, 5.0, eta=0.5, gamma=0.9)
        assert Q.get(0, 0) is NEG_INF

    def test_terminal_bootstrap_is_zero(self):
        Q = QTable(2, 1)
        Q.set(1, 0, XReal(50.0))
        q_update(Q, None, 0, 0, 1, 1.0, eta=1.0, gamma=0.5, terminal=True)
        assert Q.get(0, 0) == XReal(1.0)

    def test_classic_damage_reward(self):
        Q = QTable(2, 1)
        q_update(Q, None, 0, 0, 1, NEG_INF, eta=0.1, gamma=0.9)
        assert Q.get(0, 0) is NEG_INF

    def test_step_sizes(self):
        assert ConstantStepSize(0.1).rate(50) == 0.1
        assert VisitCountStepSize().rate(0) == 1.0
        assert VisitCountStepSize(power=1.0).rate(3) == 0.25
        assert VisitCountStepSize().rate(3) == pytest.approx(4**-0.6)
        assert step_size_for(LearnerParams(step_size=StepSizeRule.VISITS)) == VisitCountStepSize(0.6)
        assert step_size_for(LearnerParams(step_size=StepSizeRule.VISITS, step_power=1.0)).rate(3) == 0.25
        with pytest.raises(ParameterError):
            ConstantStepSize(0.0)
        with pytest.raises(ParameterError):
            VisitCountStepSize(power=0.5)


class TestEpsilonGreedy:
    def test_greedy_unique_max(self, rng):
        Q, B = QTable(1, 3), BarrierTable(1, 3)
        Q.set(0, 2, XReal(1.0))
        assert all(epsilon_greedy(Q, B, 0, 0.0, rng) == 2 for _ in range(50))

    def test_lowest_index_tie_break(self, rng):
        Q, B = QTable(1, 4), BarrierTable(1, 4)
        assert epsilon_greedy(Q, B, 0, 0.0, rng) == 0

    def test_random_tie_break_reaches_every_maximiser(self, rng):
        Q, B = QTable(1, 4), BarrierTable(1, 4)
        Q.set(0, 0, XReal(-1.0))
        picks = {epsilon_greedy(Q, B, 0, 0.0, rng, tie_break=TieBreak.RANDOM) for _ in range(200)}
        assert picks == {1, 2, 3}

    def test_full_exploration_is_uniform(self, rng):
        Q, B = QTable(1, 4), BarrierTable(1, 4)
        Q.set(0, 1, XReal(10.0))
        draws = [epsilon_greedy(Q, B, 0, 1.0, rng) for _ in range(4000)]
        assert stats.chisquare(np.bincount(draws, minlength=4)).pvalue > 0.001

    def test_masked_actions(self, rng):
        Q, B = QTable(1, 4), BarrierTable.from_pairs(1, 4, [(0, 0), (0, 1), (0, 3)])
        for eps in (0.0, 0.5, 1.0):
            assert all(epsilon_greedy(Q, B, 0, eps, rng) == 2 for _ in range(50))

    def test_classic_ignores_barrier(self, rng):
        Q, B = QTable(1, 2), BarrierTable.from_pairs(1, 2, [(0, 0)])
        picks = {epsilon_greedy(Q, B, 0, 1.0, rng, mode=LearningMode.CLASSIC) for _ in range(100)}
        assert picks == {0, 1}

    def test_dead_state(self, rng):
        Q, B = QTable(1, 2), BarrierTable.from_pairs(1, 2, [(0, 0), (0, 1)])
        with pytest.raises(DeadStateError) as excinfo:
            epsilon_greedy(Q, B, 0, 0.1, rng)
        assert excinfo.value.state == 0


class TestGenerative:
    def test_geometric_fixed_point(self, safe_loop, rng):
        params = LearnerParams(gamma=0.5)
        Q, B, _ = generative_assured_q(safe_loop, params, rng, 5000)
        assert float(Q.get(0, 0)) == pytest.approx(2.0, abs=1e-6)
        assert B.n_condemned == 0

    def test_zero_rewards_stay_zero(self, forced_chain, rng):
        Q, B, _ = generative_assured_q(forced_chain, LearnerParams(), rng, 2000)
        for s, a in forced_chain.pairs():
            assert Q.get(s, a).is_neg_inf or Q.get(s, a) == XReal(0.0)

    def test_coupling_along_trace(self, rng):
        mdp = build_corridor(5)
        result = generative_assured_q(mdp, LearnerParams(), rng, 3000, keep_trace=True)
        for row in result.trace:
            if row["q"] == "-inf":
                assert result.b.is_condemned(row["s"], row["a"])
        assert np.array_equal(result.q.neg_inf, result.b.condemned)
        assert result.b == bstar_oracle(mdp)
        finite = result.q.to_array()[~result.q.neg_inf]
        assert (finite <= 100.0 / (1 - 0.9) + 1e-9).all()

    def test_converges_to_value_iteration(self):
        mdp = build_corridor(5)
        result = generative_assured_q(mdp, LearnerParams(gamma=0.9), np.random.default_rng(3), 300_000)
        expected = value_iteration(mdp, 0.9)
        learned = result.q.to_array()
        assert np.array_equal(np.isneginf(learned), np.isneginf(expected))
        finite = np.isfinite(expected)
        assert np.allclose(learned[finite], expected[finite], atol=1e-2)

    def test_all_condemned_terminates(self, rng):
        from safe_explore.mdp_core import Branch, TabularMDP

        mdp = TabularMDP(1, 2, [[[Branch(0, 1.0, 0.0, 1)], [Branch(0, 1.0, 0.0, 1)]]])
        result = generative_assured_q(mdp, LearnerParams(), rng, 1000)
        assert result.steps == 2
        assert result.b.n_condemned == 2


class TestEpisodic:
    def test_shortest_corridor_lowest_ties(self, rng):
        env = build_corridor(2)
        params = LearnerParams(eps_explore=0.0, tie_break=TieBreak.LOWEST)
        for mode in LearningMode:
            log = run_episodic(env, mode, params, rng)
            # up, down and left at s_1 are each tried once before right
            assert log.transitions_to_goal == 4
            assert log.bumps_to_goal == 3
            assert log.episodes_to_goal == 4
            assert not log.incomplete

    def test_assured_never_repeats_a_condemned_action(self, corridor15):
        params = LearnerParams(tie_break=TieBreak.RANDOM)
        for seed in range(5):
            log = run_episodic(corridor15, LearningMode.ASSURED, params, np.random.default_rng(seed))
            assert not log.incomplete
            assert log.condemned_selections == 0
            assert log.bumps_to_goal <= 31

    def test_classic_keeps_bumping(self, corridor15):
        params = LearnerParams(tie_break=TieBreak.RANDOM)
        log = run_episodic(corridor15, LearningMode.CLASSIC, params, np.random.default_rng(0))
        assert not log.incomplete
        assert log.condemned_selections > 0

    def test_log_bookkeeping(self, corridor15, rng):
        log = run_episodic(corridor15, LearningMode.ASSURED, LearnerParams(tie_break=TieBreak.RANDOM), rng)
        rows = log.to_rows()
        assert rows[-1]["reached_goal"]
        assert sum(r["steps"] for r in rows) == log.transitions_to_goal == log.total_steps
        assert sum(r["bumps"] for r in rows) == log.bumps_to_goal == log.total_bumps
        assert all(r["steps"] <= 1000 for r in rows)

    def test_gives_up(self, corridor15, rng):
        params = LearnerParams(eps_explore=0.0, episode_cap=1, max_episodes=3)
        log = run_episodic(corridor15, LearningMode.ASSURED, params, rng)
        assert log.incomplete
        assert log.transitions_to_goal is None
        assert len(log.episodes) == 3

    def test_needs_goal(self, forced_chain, rng):
        with pytest.raises(ParameterError):
            run_episodic(forced_chain, LearningMode.ASSURED, LearnerParams(), rng)


class TestDecomposition:
    def test_always_right_corridor(self, corridor15):
        policy = [RIGHT] * corridor15.n_states
        finite, barrier = policy_eval_decomposed(corridor15, policy, 0.9)
        for i in range(14):
            assert barrier.get(i, RIGHT) == XReal(0.0)
            assert finite[i, RIGHT] == pytest.approx(0.9 ** (13 - i) * 100)
            assert barrier.get(i, UP) is NEG_INF
        assert barrier.get(0, LEFT) is NEG_INF
        assert finite[3, LEFT] == pytest.approx(0.9 * 0.9 ** 11 * 100)
        assert np.isnan(finite[0, DOWN])

    def test_damage_free_is_standard_evaluation(self, safe_loop):
        evaluation = policy_eval_decomposed(safe_loop, [0], 0.5)
        assert evaluation.barrier_part.n_condemned == 0
        assert evaluation.finite_part[0, 0] == pytest.approx(2.0)
        assert evaluation.q(0, 0) == XReal(2.0)

    def test_value_iteration_masks_unsafe_pairs(self, corridor15):
        Q = value_iteration(corridor15, 0.9)
        goal, _ = corridor_sinks(15)
        assert Q[13, RIGHT] == pytest.approx(100.0)
        assert Q[0, RIGHT] == pytest.approx(0.9 ** 13 * 100)
        assert np.isneginf(Q[5, UP])
        assert Q[goal].max() == 0.0

    @pytest.mark.parametrize("seed", [0, 1])
    def test_matches_simulation(self, seed):
        mdp = gen_random_mdp(3, 2, 2, 0.15, seed=seed)
        rng = np.random.default_rng(100 + seed)
        for policy in itertools.product(range(2), repeat=3):
            exact = policy_eval_decomposed(mdp, policy, 0.5).to_array()
            sim = simulate_policy_q(mdp, policy, 0.5, rng, n_rollouts=200, horizon=20)
            assert np.array_equal(np.isneginf(exact), np.isneginf(sim.mean))
            finite = np.isfinite(exact)
            assert (np.abs(sim.mean[finite] - exact[finite]) <= 5 * sim.stderr[finite] + 1e-3).all()

    def test_bad_policy(self, corridor15):
        with pytest.raises(ParameterError):
            policy_eval_decomposed(corridor15, [RIGHT] * 3, 0.9)


@pytest.mark.slow
def test_decomposition_on_four_state_corpus():
    for seed in range(10):
        mdp = gen_random_mdp(4, 2, 2, 0.1, seed=seed)
        rng = np.random.default_rng(seed)
        for policy in itertools.product(range(2), repeat=4):
            exact = policy_eval_decomposed(mdp, policy, 0.5).to_array()
            sim = simulate_policy_q(mdp, policy, 0.5, rng, n_rollouts=500, horizon=25)
            assert np.array_equal(np.isneginf(exact), np.isneginf(sim.mean))
            finite = np.isfinite(exact)
            assert (np.abs(sim.mean[finite] - exact[finite]) <= 5 * sim.stderr[finite] + 1e-3).all()


@pytest.mark.slow
def test_default_schedule_converges_on_corridor():
    mdp = build_corridor(5)
    result = generative_assured_q(mdp, LearnerParams(gamma=0.9), np.random.default_rng(3), 1_000_000)
    expected = value_iteration(mdp, 0.9)
    learned = result.q.to_array()
    assert np.array_equal(np.isneginf(learned), np.isneginf(expected))
    finite = np.isfinite(expected)
    assert np.allclose(learned[finite], expected[finite], atol=1e-2)
