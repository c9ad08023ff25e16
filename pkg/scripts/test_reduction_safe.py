#!/usr/bin/env python3
"""
測試求助包裝器與完整堆疊
"""

import math

import numpy as np
import pytest

from environments import MDPAdversary, cliff_line, cliff_survival_mu, heaven_hell
from experts import PolicyClass, halving_learner
from metrics import collect_mdp_trials, diameter, ood_query_bound, regret_mdp_sample
from protocol import (
    Adversary,
    ContractError,
    FiniteAdversary,
    History,
    MentorCopyingAgent,
    ProtocolViolation,
    RandomStreams,
    State,
    Step,
    UniformRandomAgent,
    run_protocol,
)
from reduction_safe import (
    FAMILIAR,
    OOD,
    MentorCache,
    default_params,
    full_stack,
    nn_distance,
    safe_wrapper,
)


class TestMentorCache:

    def test_empty_cache_is_infinitely_far(self):
        cache = MentorCache()
        assert nn_distance(cache, State.of(0.3), 0) == math.inf
        assert cache.witness(State.of(0.3), 0) is None

    def test_distance_is_per_action(self):
        cache = MentorCache()
        cache.add(State.of(0.0), 1)
        cache.add(State.of(0.9), 0)
        assert cache.nn_distance(State.of(0.2), 1) == pytest.approx(0.2)
        assert cache.nn_distance(State.of(0.2), 0) == pytest.approx(0.7)
        assert cache.actions == [0, 1]

    def test_witness_ties_go_to_earliest_entry(self):
        cache = MentorCache()
        cache.add(State.of(0.0), 1)
        cache.add(State.of(0.2), 1)
        assert cache.witness(State.of(0.1), 1) == State.of(0.0)

    def test_packing_check(self):
        cache = MentorCache()
        for x in (0.0, 0.3, 0.6):
            cache.add(State.of(x), 0)
        cache.add(State.of(0.05), 1)
        assert cache.min_separation() == pytest.approx(0.3)
        assert cache.is_packing(0.25)
        assert not cache.is_packing(0.3)
        assert len(cache) == 4


class TestSafeWrapperContract:

    def test_rejects_base_that_reads_feedback(self):
        with pytest.raises(ContractError):
            safe_wrapper(MentorCopyingAgent(2), 0.1, 10)

    @pytest.mark.parametrize("eps", [0.0, -1.0])
    def test_rejects_non_positive_epsilon(self, eps):
        with pytest.raises(ValueError):
            safe_wrapper(UniformRandomAgent(2), eps, 10)

    def test_must_start_from_empty_history(self):
        alg = safe_wrapper(UniformRandomAgent(2), 0.1, 10)
        history = History([Step(State.of(0.5), 0, None, 0)])
        with pytest.raises(ProtocolViolation):
            alg.query(history, State.of(0.5), RandomStreams.from_seed(0))

    def test_first_step_asks_for_help(self):
        adv = FiniteAdversary([State.of(0.5)], [1.0], lambda s: 1)
        trace = run_protocol(safe_wrapper(UniformRandomAgent(2), 0.1, 5), adv, 5, 3)
        assert trace.extra["branches"][0] == OOD
        assert trace.history[0].queried == 1
        assert trace.history[0].action == 1


class TestSafeWrapperOnCliffLine:

    T = 512

    def trials(self, runs=20):
        mdp = cliff_line(1, 2.0, 0.5, self.T)
        alg = full_stack(PolicyClass.thresholds(), self.T, 1)
        return mdp, collect_mdp_trials(alg, mdp, self.T, runs, 11)

    def test_structural_invariants(self):
        mdp, trials = self.trials()
        mu = cliff_survival_mu(mdp, self.T)
        for trial in trials:
            trace, extra = trial.agent, trial.agent.extra
            assert all(a == mdp.mentor(s) for s, a in extra["cache"])
            assert trace.query_count <= extra["simulated_queries"] + extra["cache_size"]
            assert extra["matched_separation"] > extra["epsilon"]
            for t, step in enumerate(trace.history, start=1):
                branch = extra["branches"][t - 1]
                proposed = extra["proposed"][t - 1]
                assert step.action in (proposed, mdp.mentor(step.state))
                if branch == OOD:
                    assert step.queried == 1
                    assert step.action == mdp.mentor(step.state)
                else:
                    assert branch == FAMILIAR
                    assert step.action == proposed
                    assert extra["distances"][t - 1] <= extra["epsilon"]
                assert mu(t, step.state, step.action) >= mu.mentor_value(t, step.state) - mu.L * extra["epsilon"] - 1e-9

    def test_simulated_history_records_proposals(self):
        mdp = cliff_line(1, 2.0, 0.5, self.T)
        alg = full_stack(PolicyClass.thresholds(), self.T, 1)
        trace = run_protocol(alg, MDPAdversary(mdp, State.of(0.8)), self.T, 2)
        simulated = alg.simulated_history
        assert len(simulated) == self.T
        for step, record, real in zip(simulated, alg.records, trace.history):
            assert step.state == real.state
            assert step.action == record.proposed
            assert step.queried == record.simulated_query
            if step.queried:
                assert step.mentor_feedback == mdp.mentor(real.state)

    def test_matched_cache_within_packing_bound(self):
        mdp = cliff_line(1, 2.0, 0.5, 2048)
        alg = full_stack(PolicyClass.thresholds(), 2048, 1)
        trace = run_protocol(alg, MDPAdversary(mdp, State.of(0.8)), 2048, 6)
        bound = ood_query_bound(2, diameter(trace.states), alg.epsilon, 1)
        assert len(alg.matched_cache()) <= bound


class ScriptedAdversary(Adversary):

    def __init__(self, states, mentor):
        self.states = states
        self.mentor = mentor

    def next(self, history, rng):
        state = self.states[len(history) % len(self.states)]
        return state, self.mentor(state)


class TestPackingBound:

    def test_bound_covers_packing_when_diameter_is_near_epsilon(self):
        states = [State.of(0.0), State.of(1.1), State.of(0.05), State.of(1.08)]
        mentor_actions = [0, 0, 1, 1]
        mentor = dict(zip(states, mentor_actions)).__getitem__
        base = halving_learner(PolicyClass.from_tables(states, [mentor_actions]))
        alg = safe_wrapper(base, 1.0, 4)
        trace = run_protocol(alg, ScriptedAdversary(states, mentor), 4, 0)

        matched = alg.matched_cache()
        assert len(matched) == 4
        assert matched.is_packing(1.0)
        assert len(matched) <= ood_query_bound(2, diameter(trace.states), 1.0, 1)

    def test_radius_never_drops_below_epsilon(self):
        assert ood_query_bound(1, 0.0, 0.5, 1) == pytest.approx(3.0)
        assert ood_query_bound(2, 0.1, 1.0, 2) == ood_query_bound(2, 0.0, 1.0, 2)


class TestHeavenOrHell:

    @pytest.mark.parametrize("T", [10, 100, 1000])
    def test_full_stack_never_falls(self, T):
        mdp = heaven_hell(T)
        alg = full_stack(PolicyClass.thresholds([0.5, 1.5]), T, 1)
        for trial in collect_mdp_trials(alg, mdp, T, 10, 1):
            assert regret_mdp_sample(trial, mdp) <= 1
            assert trial.agent.history[0].queried == 1

    @pytest.mark.parametrize("T", [10, 100, pytest.param(1000, marks=pytest.mark.slow)])
    def test_mentor_free_ablation_loses_half(self, T):
        mdp = heaven_hell(T)
        alg = safe_wrapper(UniformRandomAgent(2), math.inf, T)
        trials = collect_mdp_trials(alg, mdp, T, 2000, 2)
        regrets = [regret_mdp_sample(tr, mdp) for tr in trials]
        assert all(tr.agent.query_count == 0 for tr in trials)
        assert np.mean(regrets) == pytest.approx((T - 1) / 2, rel=0.1)


class TestFullStack:

    def test_default_params(self):
        k, eps = default_params(4096, 1)
        assert k == pytest.approx(512.0)
        assert eps == pytest.approx(1 / 64)
        with pytest.raises(ValueError):
            default_params(0, 1)

    def test_multiclass_stack_runs(self):
        states = [State.of(0.0), State.of(1.0), State.of(2.0)]
        cls = PolicyClass.from_tables(states, [[0, 1, 2], [2, 1, 0], [1, 1, 1]], action_count=3)
        mentor = cls.members[0]
        adv = FiniteAdversary(states, [1 / 3] * 3, mentor, action_count=3)
        alg = full_stack(cls, 60, 1)
        trace = run_protocol(alg, adv, 60, 0)
        assert all(0 <= a < 3 for a in trace.actions)
        assert all(a == mentor(s) for s, a in alg.cache.entries)

    def test_explicit_parameters_override_defaults(self):
        alg = full_stack(PolicyClass.thresholds(), 100, 1, k=10, epsilon=0.2)
        assert alg.epsilon == 0.2
        assert alg.base.k == 10
