"""
Tests for Jacobians, stability classification and contraction certificates
"""

import numpy as np
import pytest

from hetroute.config import IntegratorOptions
from hetroute.dynamics import integrate, softmax_blocks
from hetroute.equilibria import find_fixed_point, handoff_seed
from hetroute.exceptions import PreconditionError
from hetroute.game import RouteSet, route_cost_vector
from hetroute.routes import enumerate_routes
from hetroute.stability import (
    MARGINAL,
    STABLE,
    UNSTABLE,
    classify,
    classify_spectrum,
    column_measures,
    contraction_margin,
    critical_direction,
    estimate_eta_threshold,
    jacobian_eta,
    jacobian_z,
    verify_contraction_inequality,
)
from hetroute.utils import dirichlet_flows


def _G(game, routes, z, eta):
    return softmax_blocks(route_cost_vector(game, routes, z), eta, routes.throughputs, routes.offsets)


def _fd_jacobian(game, routes, z, eta, h=1e-6):
    J = np.zeros((routes.dimension, routes.dimension))
    for j in range(routes.dimension):
        step = np.zeros(routes.dimension)
        step[j] = h
        J[:, j] = (_G(game, routes, z + step, eta) - _G(game, routes, z - step, eta)) / (2 * h)
    return J


@pytest.fixture(scope="module")
def unstable_point(konishi, konishi_routes):
    z = handoff_seed(konishi, konishi_routes, 0.1)
    assert z is not None
    return z


class TestJacobians:
    """Analytic Jacobians against central finite differences"""

    def test_jacobian_z_konishi(self, konishi, konishi_routes):
        rng = np.random.default_rng(21)
        states = dirichlet_flows(rng, konishi_routes.sizes, konishi_routes.throughputs, 25)
        for z in states:
            eta = float(10.0 ** rng.uniform(-0.7, 0.7))
            J = jacobian_z(konishi, konishi_routes, z, eta)
            np.testing.assert_allclose(J, _fd_jacobian(konishi, konishi_routes, z, eta), rtol=1e-5, atol=1e-8)

    def test_jacobian_z_random_games(self, make_random_game):
        rng = np.random.default_rng(8)
        for _ in range(5):
            game = make_random_game(rng)
            routes = enumerate_routes(game)
            for z in dirichlet_flows(rng, routes.sizes, routes.throughputs, 5):
                eta = float(10.0 ** rng.uniform(-0.5, 0.5))
                J = jacobian_z(game, routes, z, eta)
                np.testing.assert_allclose(J, _fd_jacobian(game, routes, z, eta), rtol=1e-5, atol=1e-8)

    def test_jacobian_eta(self, konishi, konishi_routes):
        rng = np.random.default_rng(4)
        for z in dirichlet_flows(rng, konishi_routes.sizes, konishi_routes.throughputs, 10):
            eta = float(10.0 ** rng.uniform(-0.5, 0.5))
            h = 1e-6 * eta
            fd = (_G(konishi, konishi_routes, z, eta + h) - _G(konishi, konishi_routes, z, eta - h)) / (2 * h)
            np.testing.assert_allclose(jacobian_eta(konishi, konishi_routes, z, eta), fd, rtol=1e-5, atol=1e-8)

    def test_columns_sum_to_zero_per_population(self, konishi, konishi_routes):
        z = konishi_routes.uniform()
        J = jacobian_z(konishi, konishi_routes, z, 0.4)
        np.testing.assert_allclose(np.add.reduceat(J, konishi_routes.offsets, axis=0), 0.0, atol=1e-12)

    def test_constant_delays_have_zero_jacobian(self, constant_game):
        routes = enumerate_routes(constant_game)
        J = jacobian_z(constant_game, routes, routes.uniform(), 0.3)
        np.testing.assert_array_equal(J, 0.0)

    def test_jacobian_shrinks_with_noise(self, konishi, konishi_routes):
        rng = np.random.default_rng(13)
        states = [konishi_routes.uniform(), *dirichlet_flows(rng, konishi_routes.sizes, konishi_routes.throughputs, 5)]
        for z in states:
            norms = [np.abs(jacobian_z(konishi, konishi_routes, z, eta)).max() for eta in (1.0, 10.0, 100.0, 1000.0)]
            assert all(b <= a for a, b in zip(norms, norms[1:]))
            assert np.abs(jacobian_z(konishi, konishi_routes, z, 1e6)).max() <= 1e-4


class TestClassify:
    """Linear stability at fixed points"""

    def test_spectrum_classes(self):
        assert classify_spectrum(np.array([-1.0, -0.5])) == STABLE
        assert classify_spectrum(np.array([-1.0, 0.2])) == UNSTABLE
        assert classify_spectrum(np.array([-1.0, 1e-10])) == MARGINAL
        assert classify_spectrum(np.zeros(0)) == STABLE

    def test_unique_fixed_point_is_stable(self, konishi, konishi_routes):
        rec = find_fixed_point(konishi, konishi_routes, 0.5, konishi_routes.uniform())
        report = classify(konishi, konishi_routes, rec.z, 0.5)
        assert report.classification == STABLE
        assert report.eigenvalues.size == 9
        assert report.full_spectrum.size == 12
        assert np.sum(np.isclose(report.full_spectrum, -1.0)) >= 3

    def test_near_strict_equilibrium_spectrum_is_minus_identity(self, konishi, konishi_routes, eq1):
        rec = find_fixed_point(konishi, konishi_routes, 0.02, eq1)
        report = classify(konishi, konishi_routes, rec.z, 0.02)
        assert report.classification == STABLE
        assert np.all(np.abs(report.eigenvalues - (-1.0)) < 0.1)

    def test_symmetric_branch_unstable_below_bifurcation(self, konishi, konishi_routes, unstable_point):
        report = classify(konishi, konishi_routes, unstable_point, 0.1)
        assert report.classification == UNSTABLE
        assert report.max_real > 0

    def test_non_fixed_point_rejected(self, konishi, konishi_routes):
        with pytest.raises(PreconditionError):
            classify(konishi, konishi_routes, konishi_routes.vertex_at(0), 0.5)

    @pytest.mark.parametrize("eta,start", [(0.1, "eq1"), (0.1, "unstable"), (0.5, "uniform")])
    def test_route_order_does_not_change_class(self, konishi, konishi_routes, eq1, unstable_point, eta, start):
        if start == "unstable":
            z = unstable_point
        else:
            z = find_fixed_point(konishi, konishi_routes, eta, eq1 if start == "eq1" else konishi_routes.uniform()).z
        reversed_routes = RouteSet.from_routes(konishi, [pop_routes[::-1] for pop_routes in konishi_routes.routes])
        order = np.concatenate([np.arange(konishi_routes.offsets[p], konishi_routes.offsets[p] + konishi_routes.sizes[p])[::-1] for p in range(3)])
        np.testing.assert_array_equal(reversed_routes.incidence, konishi_routes.incidence[:, order])
        a = classify(konishi, konishi_routes, z, eta)
        b = classify(konishi, reversed_routes, z[order], eta)
        assert a.classification == b.classification
        np.testing.assert_allclose(np.sort(a.eigenvalues.real), np.sort(b.eigenvalues.real), atol=1e-8)
        np.testing.assert_allclose(np.sort(np.abs(a.eigenvalues.imag)), np.sort(np.abs(b.eigenvalues.imag)), atol=1e-8)

    @pytest.mark.parametrize("eta,start", [(0.1, "eq1"), (0.5, "uniform")])
    def test_stable_fixed_point_attracts_nearby_states(self, konishi, konishi_routes, eq1, eta, start):
        z0 = {"eq1": eq1, "uniform": konishi_routes.uniform()}[start]
        rec = find_fixed_point(konishi, konishi_routes, eta, z0)
        assert rec.stability == STABLE
        rng = np.random.default_rng(2)
        for _ in range(3):
            kick = konishi_routes.tangent_basis @ rng.normal(scale=0.02, size=konishi_routes.tangent_basis.shape[1])
            start_state = konishi_routes.project(rec.z + kick)
            assert np.abs(start_state - rec.z).sum() > 1e-3
            traj = integrate(konishi, konishi_routes, start_state, eta, 200.0)
            assert np.abs(traj.final - rec.z).sum() < 1e-6

    def test_critical_direction_is_tangent(self, konishi, konishi_routes, unstable_point):
        d = critical_direction(konishi, konishi_routes, unstable_point, 0.1)
        assert np.abs(d).sum() == pytest.approx(1.0)
        np.testing.assert_allclose(np.add.reduceat(d, konishi_routes.offsets), 0.0, atol=1e-12)


class TestContraction:
    """Sampled l1 contraction certificates"""

    def test_large_noise_certificate(self, konishi, konishi_routes):
        cert = contraction_margin(konishi, konishi_routes, 1e6)
        assert cert.valid
        assert cert.margin_c >= 0.99
        assert cert.sample_size == 512 + 64
        assert cert.to_dict(konishi_routes)["sample"] == "dirichlet:512+vertices"

    def test_certificate_fails_at_unstable_fixed_point(self, konishi, konishi_routes, unstable_point):
        cert = contraction_margin(konishi, konishi_routes, 0.1, z_sample=unstable_point[None, :])
        assert not cert.valid
        assert cert.margin_c <= 0
        assert cert.seed is None

    def test_column_measures(self, konishi, konishi_routes):
        mu = column_measures(konishi, konishi_routes, konishi_routes.uniform(), 1e6)
        np.testing.assert_allclose(mu, -1.0, atol=1e-3)

    def test_certificate_is_deterministic(self, konishi, konishi_routes):
        a = contraction_margin(konishi, konishi_routes, 2.0, seed=3, sample_size=64)
        b = contraction_margin(konishi, konishi_routes, 2.0, seed=3, sample_size=64)
        assert a.margin_c == b.margin_c
        np.testing.assert_array_equal(a.worst_point, b.worst_point)

    def test_contraction_inequality_large_noise(self, konishi, konishi_routes):
        cert = contraction_margin(konishi, konishi_routes, 1e6)
        rng = np.random.default_rng(1)
        starts = dirichlet_flows(rng, konishi_routes.sizes, konishi_routes.throughputs, 40)
        pairs = list(zip(starts[:20], starts[20:]))
        check = verify_contraction_inequality(
            konishi,
            konishi_routes,
            1e6,
            pairs,
            horizon=10.0,
            margin_c=cert.margin_c,
            options=IntegratorOptions(record_every=10),
        )
        assert check.holds
        assert check.pairs_checked == 20
        assert check.violation is None

    def test_contraction_inequality_needs_positive_margin(self, konishi, konishi_routes):
        z = konishi_routes.uniform()
        with pytest.raises(PreconditionError):
            verify_contraction_inequality(konishi, konishi_routes, 0.1, [(z, z)], horizon=1.0, margin_c=-0.5)

    @pytest.mark.slow
    def test_threshold_estimate(self, konishi, konishi_routes):
        estimate = estimate_eta_threshold(konishi, konishi_routes, sample_size=128)
        assert estimate.sampled
        assert estimate.eta_hat is not None
        assert estimate.eta_hat >= 0.2
        assert estimate.valid_at_upper
        assert contraction_margin(konishi, konishi_routes, estimate.eta_hat, sample_size=128).valid
