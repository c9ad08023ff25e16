#!/usr/bin/env python3
"""
測試環境：Heaven-or-Hell、cliff-line、μ 序列與 σ-smooth 對手
"""

import numpy as np
import pytest

from environments import (
    HEAVEN,
    HELL,
    START,
    Box,
    FiniteMDP,
    MDPInstance,
    MuSequence,
    check_local_generalization,
    cliff_line,
    cliff_survival_mu,
    heaven_hell,
    mentor_rollout,
    mu_from_mdp,
    random_finite_mdp,
    random_tabular_mu,
    smooth_sequence_adversary,
    smoothness_histogram_check,
    threshold_margin_mu,
    threshold_stress_plan,
)
from protocol import CapabilityError, History, SmoothnessViolation, State, Step


class TestBox:

    def test_cube_and_dead_atom(self):
        cube = Box.cube(2)
        assert cube.volume == 1.0
        assert cube.contains(State.of(0.5, 1.0))
        assert not cube.contains(State.of(0.5, 1.1))
        assert Box.dead_atom().volume == 0.0
        assert not Box.dead_atom().contains(State.of(0.0))

    def test_rejects_inverted_box(self):
        with pytest.raises(ValueError):
            Box((0.5,), (0.2,))

    def test_samples_stay_inside(self):
        box = Box((0.2, 0.1), (0.4, 0.9))
        rng = np.random.default_rng(0)
        assert all(box.contains(box.sample(rng)) for _ in range(200))


class TestHeavenOrHell:

    def test_structure(self):
        mdp = heaven_hell(10)
        assert [mdp.mentor(s) for s in (START, HEAVEN, HELL)] == [0, 0, 0]
        assert mdp.kernel_prob(START, 0, [HEAVEN]) == 1.0
        assert mdp.kernel_prob(START, 1, [HELL]) == 1.0
        assert mdp.is_absorbing(HEAVEN) and mdp.is_absorbing(HELL)
        assert mdp.reward(HEAVEN, 1) == 1.0
        assert mdp.reward(HELL, 0) == 0.0

    def test_rejects_short_horizon(self):
        with pytest.raises(ValueError):
            heaven_hell(1)

    def test_mentor_rollout_reaches_heaven(self):
        states = mentor_rollout(heaven_hell(5), 5, 0)
        assert states == [START] + [HEAVEN] * 4

    def test_survival_mu(self):
        mdp = heaven_hell(4)
        mu = mu_from_mdp(mdp, [[START, HEAVEN]] * 4)
        assert mu(1, START, 0) == 1.0
        assert mu(1, START, 1) == 0.0
        assert mu(5, START, 1) == 1.0
        assert mu.mu_min == 0.0


class TestFiniteMDP:

    def test_rejects_non_stochastic_kernel(self):
        states = [State.of(0.0), State.of(1.0)]
        P = np.full((2, 2, 2), 0.4)
        with pytest.raises(ValueError):
            FiniteMDP(states, P, [1.0, 0.0], [0, 0], np.zeros((2, 2)))

    def test_random_instance_limits(self):
        with pytest.raises(CapabilityError):
            random_finite_mdp(np.random.default_rng(0), n_states=5)

    def test_random_instance_certifies_its_own_constant(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            mdp = random_finite_mdp(rng, n_states=4, action_count=3)
            report = check_local_generalization(mdp, mdp.L, num_pairs=200, seed=1)
            assert report.passed

    def test_complement(self):
        mdp = heaven_hell(3)
        assert mdp.complement([HELL]) == [START, HEAVEN]


class TestCliffLine:

    def test_infeasible_parameters(self):
        with pytest.raises(ValueError):
            cliff_line(1, 1.0, 0.5)

    @pytest.mark.parametrize("n,L,sigma", [(1, 2.0, 0.5), (1, 4.0, 0.5), (2, 4.0, 0.25), (1, 12.0, 0.1)])
    def test_mentor_never_falls(self, n, L, sigma):
        mdp = cliff_line(n, L, sigma)
        rng = np.random.default_rng(1)
        for _ in range(500):
            s = mdp.sample_state(rng)
            assert mdp.dead_mass(s, mdp.mentor(s)) <= 1e-12

    @pytest.mark.parametrize("n,L,sigma", [(1, 2.0, 0.5), (1, 4.0, 0.5), (2, 4.0, 0.25)])
    def test_local_generalization_constant(self, n, L, sigma):
        mdp = cliff_line(n, L, sigma)
        assert check_local_generalization(mdp, L, num_pairs=3000, seed=2).passed

    def test_kernel_is_a_distribution(self):
        mdp = cliff_line(1, 2.0, 0.5)
        rng = np.random.default_rng(3)
        for _ in range(100):
            s = mdp.sample_state(rng)
            for a in (0, 1):
                total = mdp.kernel_prob(s, a, [mdp.live, Box.dead_atom()])
                assert total == pytest.approx(1.0)
                assert 0.0 <= mdp.tv(s, a, s, 1 - a) <= 1.0

    def test_dead_state_is_absorbing(self):
        mdp = cliff_line(1, 2.0, 0.5)
        rng = np.random.default_rng(0)
        assert mdp.step(mdp.dead_state, 1, rng) == mdp.dead_state
        assert mdp.reward(mdp.dead_state, 0) == 0.0
        assert mdp.kernel_prob(mdp.dead_state, 0, Box.dead_atom()) == 1.0

    def test_backing_off_near_the_edge_survives(self):
        mdp = cliff_line(1, 2.0, 0.5)
        s = State.of(0.05)
        assert mdp.mentor(s) == 0
        assert mdp.dead_mass(s, 1) > 0
        survival = cliff_survival_mu(mdp, 10)
        assert survival(1, s, 0) == pytest.approx(1.0)
        assert survival(1, s, 1) == pytest.approx(1.0 - mdp.dead_mass(s, 1))

    @pytest.mark.parametrize("L", [2.0, 4.0])
    def test_threshold_sits_on_the_cliff_edge(self, L):
        mdp = cliff_line(1, L, 0.5)
        assert mdp.theta == pytest.approx(mdp.width / 2)
        for gap in (1e-3, 0.01, 0.1):
            below = State.of(mdp.theta - gap)
            assert mdp.mentor(below) == 0
            assert mdp.dead_mass(below, 1) > 0
            assert mdp.dead_mass(below, 1) <= L * gap + 1e-12
            assert mdp.dead_mass(below, 0) <= 1e-12
            above = State.of(mdp.theta + gap)
            assert mdp.mentor(above) == 1
            assert mdp.dead_mass(above, 1) <= 1e-12

    def test_action_gap_is_lipschitz_in_distance_to_threshold(self):
        mdp = cliff_line(1, 4.0, 0.5)
        for x in np.linspace(0.0, 1.0, 41):
            s = State.of(float(x))
            assert mdp.tv(s, 0, s, 1) <= mdp.L * abs(x - mdp.theta) + 1e-12

    def test_steps_land_in_next_box(self):
        mdp = cliff_line(2, 4.0, 0.25)
        rng = np.random.default_rng(5)
        for _ in range(200):
            s = mdp.sample_state(rng)
            a = int(rng.integers(2))
            nxt = mdp.step(s, a, rng)
            if nxt != mdp.dead_state:
                lo, hi = mdp.next_box(s, a)
                assert np.all(nxt.array >= lo - 1e-12) and np.all(nxt.array <= hi + 1e-12)


class TestMuSequences:

    def test_rejects_values_outside_unit_interval(self):
        mu = MuSequence(lambda t, s, a: 1.5, lambda s: 0)
        with pytest.raises(ValueError):
            mu(1, State.of(0.0), 0)

    def test_margin_mu_is_locally_generalizing(self):
        mu = threshold_margin_mu(0.4, 3.0, floor=0.2)
        assert mu.gap(1, State.of(0.9), 1) == 0.0
        assert check_local_generalization(mu, 3.0, num_pairs=3000, seed=0).passed

    def test_tabular_mu_is_mentor_dominant(self):
        rng = np.random.default_rng(6)
        states = [State.of(0.0), State.of(1.0)]
        mu = random_tabular_mu(rng, states, lambda s: int(s.coords[0]), 3, 4)
        for t in range(1, 5):
            for s in states:
                assert all(mu.gap(t, s, a) >= 0 for a in range(3))
        assert mu.mu_min >= 0.2

    def test_requires_exact_kernel(self):
        class Opaque(MDPInstance):
            name = "opaque"

        with pytest.raises(CapabilityError):
            mu_from_mdp(Opaque(), [])


class TestSmoothAdversary:

    def test_rejects_thin_region(self):
        with pytest.raises(SmoothnessViolation):
            smooth_sequence_adversary(0.5, [Box((0.0,), (0.3,))], lambda s: 0)

    def test_uniform_plan_passes_histogram_check(self):
        adv = smooth_sequence_adversary(1.0, [Box.cube(1)], lambda s: 0)
        rng = np.random.default_rng(7)
        xs = [adv.next(History(), rng)[0].coords[0] for _ in range(20000)]
        assert smoothness_histogram_check(xs, 1.0)["passed"]

    def test_stress_plan_hugs_threshold(self):
        theta, sigma = 0.5, 0.25
        mentor = lambda s: int(s.coords[0] >= theta)
        adv = smooth_sequence_adversary(sigma, threshold_stress_plan(theta, sigma), mentor)
        rng = np.random.default_rng(8)
        history = History()
        xs = []
        for _ in range(5000):
            state, m = adv.next(history, rng)
            xs.append(state.coords[0])
            history.append(Step(state, int(rng.integers(2)), None, 0))
            region = adv.region_at(history)
            assert region.volume == pytest.approx(sigma)
            assert region.lo[0] <= theta <= region.hi[0]
        assert smoothness_histogram_check(xs, sigma)["passed"]
