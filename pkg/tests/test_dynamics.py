"""
Tests for the logit map and trajectory integration
"""

import numpy as np
import pytest

from hetroute.config import IntegratorOptions
from hetroute.dynamics import integrate, logit_map, logit_rhs, rk4_step, softmax_blocks
from hetroute.exceptions import NumericalError, ValidationError
from hetroute.game import DelayFunction, route_cost_vector
from hetroute.routes import enumerate_routes
from hetroute.utils import dirichlet_flows


class TestSoftmax:
    """Test the per-population logit choice"""

    def test_masses_at_equilibrium_one(self, konishi, konishi_routes, eq1):
        G = logit_map(konishi, konishi_routes, eq1, 0.5)
        share = np.exp(-1.2) / (1 + np.exp(-1.2))
        assert G[0] == pytest.approx(1.2 * (1 - share), rel=1e-9)
        assert G[3] == pytest.approx(1.2 * share, rel=1e-9)
        assert G[1] < 1e-60
        assert G[2] < 1e-60

    def test_shift_invariance(self, konishi_routes):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            costs = rng.uniform(0.0, 50.0, size=konishi_routes.dimension)
            shift = np.repeat(rng.uniform(-100.0, 100.0, size=3), konishi_routes.sizes)
            eta = float(rng.uniform(0.01, 10.0))
            a = softmax_blocks(costs, eta, konishi_routes.throughputs, konishi_routes.offsets)
            b = softmax_blocks(costs + shift, eta, konishi_routes.throughputs, konishi_routes.offsets)
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)

    def test_no_overflow_for_tiny_eta(self, konishi_routes):
        costs = np.array([1e4, 2e4, 3e4, 4e4] * 3)
        out = softmax_blocks(costs, 1e-6, konishi_routes.throughputs, konishi_routes.offsets)
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out[konishi_routes.offsets], konishi_routes.throughputs)

    def test_simplex_invariance(self, konishi, konishi_routes):
        rng = np.random.default_rng(5)
        states = dirichlet_flows(rng, konishi_routes.sizes, konishi_routes.throughputs, 1000)
        etas = 10.0 ** rng.uniform(-2, 3, size=1000)
        for z, eta in zip(states, etas):
            G = logit_map(konishi, konishi_routes, z, float(eta))
            assert np.all(G >= 0)
            np.testing.assert_allclose(np.add.reduceat(G, konishi_routes.offsets), konishi_routes.throughputs, atol=1e-9)
            rhs = logit_rhs(konishi, konishi_routes, z, float(eta))
            np.testing.assert_allclose(np.add.reduceat(rhs, konishi_routes.offsets), 0.0, atol=1e-9)

    def test_uniform_costs_give_uniform_choice(self, make_parallel_game):
        game = make_parallel_game([[DelayFunction.constant(3.0)] * 3], [1.5])
        routes = enumerate_routes(game)
        np.testing.assert_allclose(logit_map(game, routes, routes.vertex((0,)), 0.3), [0.5, 0.5, 0.5])

    @pytest.mark.parametrize("eta", [0.0, -1.0, float("inf"), float("nan")])
    def test_invalid_eta(self, konishi, konishi_routes, eta):
        with pytest.raises(ValidationError):
            logit_map(konishi, konishi_routes, konishi_routes.uniform(), eta)

    def test_inadmissible_state(self, konishi, konishi_routes):
        with pytest.raises(ValidationError):
            logit_map(konishi, konishi_routes, np.ones(12), 1.0)

    def test_non_finite_cost(self, konishi, konishi_routes, mocker):
        mocker.patch("hetroute.dynamics.route_cost_vector", return_value=np.full(12, np.inf))
        with pytest.raises(NumericalError):
            logit_map(konishi, konishi_routes, konishi_routes.uniform(), 1.0)


class TestRungeKutta:
    """Test the integrator"""

    def test_rk4_exponential_decay(self):
        y = np.array([1.0])
        for k in range(100):
            y = rk4_step(lambda t, x: -x, k * 0.01, y, 0.01)
        assert y[0] == pytest.approx(np.exp(-1.0), rel=1e-9)

    def test_fourth_order_on_logit_flow(self, konishi, konishi_routes):
        z0 = dirichlet_flows(np.random.default_rng(3), konishi_routes.sizes, konishi_routes.throughputs, 1)[0]

        def final(h):
            options = IntegratorOptions(step=h, stop_on_stationary=False)
            return integrate(konishi, konishi_routes, z0, 0.5, 1.0, options).final

        reference = final(1 / 512)
        errors = [np.abs(final(h) - reference).sum() for h in (1 / 8, 1 / 16, 1 / 32)]
        orders = np.log2(np.array(errors[:-1]) / np.array(errors[1:]))
        assert np.all(orders >= 3.9)

    def test_large_noise_converges_to_uniform(self, konishi, konishi_routes):
        traj = integrate(konishi, konishi_routes, konishi_routes.vertex_at(0), 1e6, 50.0)
        assert traj.converged
        assert np.abs(traj.final - konishi_routes.uniform()).sum() < 1e-3

    def test_trajectory_stays_admissible(self, konishi, konishi_routes):
        options = IntegratorOptions(stop_on_stationary=False)
        traj = integrate(konishi, konishi_routes, konishi_routes.vertex_at(5), 0.2, 5.0, options)
        assert len(traj) == 501
        assert traj.times[-1] == pytest.approx(5.0)
        for z in traj.states:
            konishi_routes.check_admissible(z)

    def test_record_every(self, konishi, konishi_routes):
        options = IntegratorOptions(stop_on_stationary=False, record_every=10)
        traj = integrate(konishi, konishi_routes, konishi_routes.uniform(), 1.0, 1.0, options)
        assert len(traj) == 11

    def test_adaptive_matches_fixed_step(self, konishi, konishi_routes):
        z0 = konishi_routes.vertex_at(20)
        fixed = integrate(konishi, konishi_routes, z0, 0.5, 3.0, IntegratorOptions(stop_on_stationary=False))
        adaptive = integrate(
            konishi,
            konishi_routes,
            z0,
            0.5,
            3.0,
            IntegratorOptions(method="rk4-adaptive", tol=1e-10, stop_on_stationary=False),
        )
        assert adaptive.times[-1] == pytest.approx(3.0)
        assert np.abs(fixed.final - adaptive.final).sum() < 1e-6

    def test_two_basins_at_small_noise(self, konishi, konishi_routes, eq1, eq2):
        a = integrate(konishi, konishi_routes, eq1, 0.1, 200.0)
        b = integrate(konishi, konishi_routes, eq2, 0.1, 200.0)
        assert np.abs(a.final - b.final).sum() > 1.0
        assert np.abs(a.final - eq1).sum() < np.abs(a.final - eq2).sum()

    def test_aggregate_and_rows(self, konishi, konishi_routes):
        options = IntegratorOptions(stop_on_stationary=False)
        traj = integrate(konishi, konishi_routes, konishi_routes.uniform(), 1.0, 0.05, options)
        w = traj.aggregate()
        assert w.shape == (len(traj), 4)
        np.testing.assert_allclose(w.sum(axis=1), 3.2)
        rows = list(traj.rows())
        assert len(rows) == len(traj) * 12
        assert rows[0][:3] == (0.0, "p1", 0)

    def test_invalid_horizon(self, konishi, konishi_routes):
        with pytest.raises(ValidationError):
            integrate(konishi, konishi_routes, konishi_routes.uniform(), 1.0, 0.0)

    def test_nan_state_raises(self, konishi, konishi_routes, mocker):
        mocker.patch("hetroute.dynamics.rk4_step", return_value=np.full(12, np.nan))
        with pytest.raises(NumericalError):
            integrate(konishi, konishi_routes, konishi_routes.vertex_at(3), 1.0, 1.0)

    def test_costs_shared_with_game_model(self, konishi, konishi_routes, eq1):
        costs = route_cost_vector(konishi, konishi_routes, eq1)
        G = softmax_blocks(costs, 0.5, konishi_routes.throughputs, konishi_routes.offsets)
        np.testing.assert_allclose(G, logit_map(konishi, konishi_routes, eq1, 0.5))
