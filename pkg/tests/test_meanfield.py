"""
Tests for the finite-population agent simulation
"""

import numpy as np
import pytest

from hetroute.config import IntegratorOptions
from hetroute.dynamics import integrate
from hetroute.exceptions import ValidationError
from hetroute.game import DelayFunction
from hetroute.meanfield import compare_to_ode, initial_counts, simulate_agents
from hetroute.routes import enumerate_routes

ODE_OPTIONS = IntegratorOptions(stop_on_stationary=False)


class TestInitialCounts:
    """Largest-remainder rounding of z0"""

    def test_uniform_konishi(self, konishi_routes):
        counts = initial_counts(konishi_routes, konishi_routes.uniform(), np.array([10, 10, 10]))
        assert counts.tolist() == [3, 3, 2, 2] * 3

    def test_vertex(self, konishi_routes, eq1):
        counts = initial_counts(konishi_routes, eq1, np.array([5, 7, 9]))
        assert counts.tolist() == [5, 0, 0, 0, 0, 0, 7, 0, 0, 0, 0, 9]

    def test_counts_sum_to_population(self, konishi_routes):
        z = np.random.default_rng(4).dirichlet(np.ones(4), size=3) * konishi_routes.throughputs[:, None]
        counts = initial_counts(konishi_routes, z.ravel(), np.array([11, 13, 17]))
        assert [int(c.sum()) for c in konishi_routes.split(counts)] == [11, 13, 17]


class TestSimulateAgents:
    """Gillespie simulation of the agent chain"""

    def test_same_seed_same_trajectory(self, konishi, konishi_routes):
        a = simulate_agents(konishi, konishi_routes, 0.5, 50, konishi_routes.uniform(), 2.0, seed=3)
        b = simulate_agents(konishi, konishi_routes, 0.5, 50, konishi_routes.uniform(), 2.0, seed=3)
        np.testing.assert_array_equal(a.states, b.states)
        assert a.metadata == b.metadata

    def test_different_seeds_differ(self, konishi, konishi_routes):
        a = simulate_agents(konishi, konishi_routes, 0.5, 50, konishi_routes.uniform(), 2.0, seed=1)
        b = simulate_agents(konishi, konishi_routes, 0.5, 50, konishi_routes.uniform(), 2.0, seed=2)
        assert not np.array_equal(a.states, b.states)

    def test_states_stay_admissible(self, konishi, konishi_routes):
        trajectory = simulate_agents(konishi, konishi_routes, 1.0, [20, 30, 40], konishi_routes.uniform(), 3.0, seed=0)
        sums = np.stack([konishi_routes.split(z) for z in trajectory.states], axis=0).sum(axis=2)
        np.testing.assert_allclose(sums, np.tile(konishi_routes.throughputs, (len(trajectory.states), 1)), atol=1e-12)
        assert np.all(trajectory.states >= 0)
        assert trajectory.method == "agents"
        assert trajectory.metadata["N"] == [20, 30, 40]
        assert trajectory.metadata["events"] > 0

    def test_states_are_multiples_of_agent_mass(self, affine_game):
        routes = enumerate_routes(affine_game)
        trajectory = simulate_agents(affine_game, routes, 0.5, 8, routes.uniform(), 1.0, seed=5)
        ticks = trajectory.states / (2.0 / 8)
        np.testing.assert_allclose(ticks, np.round(ticks), atol=1e-9)

    def test_single_agent_occupancy_matches_logit_choice(self, make_parallel_game):
        game = make_parallel_game([[DelayFunction.constant(0.0), DelayFunction.constant(1.0)]], [1.0])
        routes = enumerate_routes(game)
        trajectory = simulate_agents(game, routes, 1.0, 1, routes.vertex((1,)), 5000.0, seed=9, sample_step=0.1)
        occupancy = trajectory.states.mean(axis=0)
        expected = 1.0 / (1.0 + np.exp(-1.0))
        assert occupancy[0] == pytest.approx(expected, abs=0.05)
        assert occupancy.sum() == pytest.approx(1.0)

    def test_default_grid(self, konishi, konishi_routes):
        trajectory = simulate_agents(konishi, konishi_routes, 1.0, 5, konishi_routes.uniform(), 0.5)
        assert trajectory.times.size == 51
        assert trajectory.times[-1] == pytest.approx(0.5)
        counts = initial_counts(konishi_routes, konishi_routes.uniform(), np.array([5, 5, 5]))
        unit = konishi_routes.throughputs / 5
        np.testing.assert_allclose(trajectory.states[0], counts * unit[konishi_routes.pop_of])

    @pytest.mark.parametrize("n_agents", [0, -3, [5, 0, 5]])
    def test_needs_agents(self, konishi, konishi_routes, n_agents):
        with pytest.raises(ValidationError):
            simulate_agents(konishi, konishi_routes, 1.0, n_agents, konishi_routes.uniform(), 1.0)

    def test_bad_time_grid(self, konishi, konishi_routes):
        with pytest.raises(ValidationError):
            simulate_agents(konishi, konishi_routes, 1.0, 5, konishi_routes.uniform(), 1.0, times=np.array([0.0, 0.5, 0.5]))

    def test_bad_eta(self, konishi, konishi_routes):
        with pytest.raises(ValidationError):
            simulate_agents(konishi, konishi_routes, 0.0, 5, konishi_routes.uniform(), 1.0)


class TestCompareToOde:
    """Sup-distance between the agent chain and logit(eta)"""

    def test_grid_mismatch(self, konishi, konishi_routes):
        ode = integrate(konishi, konishi_routes, konishi_routes.uniform(), 1.0, 1.0, ODE_OPTIONS)
        empirical = simulate_agents(konishi, konishi_routes, 1.0, 10, konishi_routes.uniform(), 0.5)
        with pytest.raises(ValidationError):
            compare_to_ode(empirical, ode)

    def test_identical_trajectories(self, konishi, konishi_routes):
        ode = integrate(konishi, konishi_routes, konishi_routes.uniform(), 1.0, 1.0, ODE_OPTIONS)
        report = compare_to_ode(ode, ode)
        assert report.sup_distance == 0.0
        assert report.to_dict()["points"] == ode.times.size

    @pytest.mark.slow
    def test_large_population_tracks_ode(self, konishi, konishi_routes):
        ode = integrate(konishi, konishi_routes, konishi_routes.uniform(), 0.5, 10.0, ODE_OPTIONS)
        empirical = simulate_agents(konishi, konishi_routes, 0.5, 10_000, konishi_routes.uniform(), 10.0, seed=0, times=ode.times)
        assert compare_to_ode(empirical, ode).sup_distance <= 0.15

    @pytest.mark.slow
    def test_distance_shrinks_like_inverse_root_n(self, konishi, konishi_routes):
        ode = integrate(konishi, konishi_routes, konishi_routes.uniform(), 0.5, 5.0, ODE_OPTIONS)
        sizes = [100, 400, 1600]
        medians = []
        for n in sizes:
            sups = [
                compare_to_ode(
                    simulate_agents(konishi, konishi_routes, 0.5, n, konishi_routes.uniform(), 5.0, seed=s, times=ode.times),
                    ode,
                ).sup_distance
                for s in range(20)
            ]
            medians.append(np.median(sups))
        slope = np.polyfit(np.log(sizes), np.log(medians), 1)[0]
        assert -0.7 <= slope <= -0.3
