#!/usr/bin/env python3
"""
測試學習協定核心：型別、歷史限制、逐步迴圈與決定性
"""

from fractions import Fraction

import numpy as np
import pytest

from protocol import (
    Algorithm,
    FiniteAdversary,
    FixedActionAgent,
    History,
    MentorCopyingAgent,
    ProtocolViolation,
    RandomStreams,
    State,
    Step,
    UniformRandomAgent,
    bernoulli,
    binary_loss,
    check_query_agnostic,
    restrict_history,
    run_protocol,
    sample_action,
)


def two_point_adversary():
    states = [State.of(0.2), State.of(0.8)]
    return FiniteAdversary(states, [0.5, 0.5], lambda s: int(s.coords[0] >= 0.5))


class OutOfRangeAgent(Algorithm):
    def query(self, history, state, streams):
        return 0

    def act(self, history, state, feedback, streams):
        return 5 if len(history) == 2 else 0

    def fresh(self):
        return OutOfRangeAgent(self.action_count)


class PeekingAgent(Algorithm):
    """偷看回饋的代理人，不是 query-agnostic"""

    def query(self, history, state, streams):
        return 1

    def act(self, history, state, feedback, streams):
        return 0 if feedback is None else feedback

    def fresh(self):
        return PeekingAgent(self.action_count)


class TestDomainTypes:

    def test_state_rejects_empty_and_non_finite(self):
        with pytest.raises(ValueError):
            State(())
        with pytest.raises(ValueError):
            State.of(float("nan"))

    def test_state_distance_is_euclidean(self):
        assert State.of(0.0, 0.0).distance(State.of(3.0, 4.0)) == pytest.approx(5.0)
        assert State.of(1, 2) == State.from_array(np.array([1.0, 2.0]))

    def test_step_requires_feedback_iff_queried(self):
        Step(State.of(0.1), 0, 1, 1)
        Step(State.of(0.1), 0, None, 0)
        with pytest.raises(ValueError):
            Step(State.of(0.1), 0, None, 1)
        with pytest.raises(ValueError):
            Step(State.of(0.1), 0, 1, 0)

    def test_restrict_keeps_queried_steps_in_order(self):
        steps = [Step(State.of(i / 10), i % 2, (i % 2) if q else None, q)
                 for i, q in enumerate([1, 0, 1, 1, 0])]
        history = History(steps)
        restricted = restrict_history(history, [1, 0, 1, 1, 0])
        assert restricted.steps == (steps[0], steps[2], steps[3])
        assert history.restrict([0, 0, 0, 0, 0]) == History()

    def test_restrict_rejects_short_mask(self):
        history = History([Step(State.of(0.0), 0, None, 0)] * 3)
        with pytest.raises(ValueError):
            restrict_history(history, [1, 1])


class TestRandomness:

    def test_bernoulli_with_exact_fraction(self):
        rng = np.random.default_rng(0)
        assert all(bernoulli(rng, Fraction(1)) == 1 for _ in range(20))
        assert all(bernoulli(rng, Fraction(0)) == 0 for _ in range(20))
        draws = [bernoulli(rng, Fraction(1, 4)) for _ in range(20000)]
        assert abs(np.mean(draws) - 0.25) < 0.02

    def test_degenerate_distribution_consumes_no_randomness(self):
        rng = np.random.default_rng(3)
        before = rng.bit_generator.state
        assert sample_action(np.array([0.0, 1.0, 0.0]), rng) == 1
        assert rng.bit_generator.state == before

    def test_streams_are_independent_of_each_other(self):
        a = RandomStreams.from_seed(11)
        b = RandomStreams.from_seed(11)
        b.query.random(100)
        assert a.action.random() == b.action.random()


class TestRunProtocol:

    def test_mentor_copier_has_zero_loss_and_queries_every_step(self):
        trace = run_protocol(MentorCopyingAgent(2), two_point_adversary(), 40, 1)
        assert sum(trace.losses) == 0
        assert trace.query_count == 40
        assert trace.actions == trace.mentor_actions

    def test_never_querying_agent_has_no_feedback(self):
        trace = run_protocol(FixedActionAgent(2, 1), two_point_adversary(), 30, 2)
        assert trace.query_count == 0
        assert all(step.mentor_feedback is None for step in trace.history)
        assert list(trace.losses) == [binary_loss(1, m) for m in trace.mentor_actions]

    def test_out_of_range_action_names_the_step(self):
        with pytest.raises(ProtocolViolation) as excinfo:
            run_protocol(OutOfRangeAgent(2), two_point_adversary(), 10, 0)
        assert excinfo.value.step == 3
        assert "第 3 步" in str(excinfo.value)

    def test_same_seed_gives_identical_fingerprint(self):
        first = run_protocol(UniformRandomAgent(2), two_point_adversary(), 50, 123)
        second = run_protocol(UniformRandomAgent(2), two_point_adversary(), 50, 123)
        other = run_protocol(UniformRandomAgent(2), two_point_adversary(), 50, 124)
        assert first.fingerprint() == second.fingerprint()
        assert first.fingerprint() != other.fingerprint()

    def test_rejects_non_positive_horizon(self):
        with pytest.raises(ValueError):
            run_protocol(UniformRandomAgent(2), two_point_adversary(), 0, 0)


class TestQueryAgnostic:

    def samples(self):
        history = History([Step(State.of(0.3), 0, 0, 1)])
        return [(history, State.of(0.9)), (History(), State.of(0.1))]

    def test_uniform_random_agent_ignores_feedback(self):
        assert check_query_agnostic(UniformRandomAgent(3), self.samples())

    def test_peeking_agent_is_detected(self):
        assert not check_query_agnostic(PeekingAgent(2), self.samples())


class TestFiniteAdversary:

    def test_rejects_bad_probabilities(self):
        with pytest.raises(ValueError):
            FiniteAdversary([State.of(0.0)], [0.5], lambda s: 0)
        with pytest.raises(ValueError):
            FiniteAdversary([State.of(0.0), State.of(1.0)], [1.0], lambda s: 0)

    def test_outcomes_skip_zero_probability_states(self):
        adv = FiniteAdversary([State.of(0.0), State.of(1.0)], [1.0, 0.0], lambda s: 1)
        assert adv.outcomes(History()) == [(State.of(0.0), 1, 1.0)]
