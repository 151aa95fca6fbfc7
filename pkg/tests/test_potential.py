"""
Tests for potential games: symmetry, the toll potential and Lyapunov monitoring
"""

import numpy as np
import pytest

from hetroute.config import IntegratorOptions
from hetroute.dynamics import integrate
from hetroute.equilibria import find_fixed_point
from hetroute.exceptions import PreconditionError, ValidationError
from hetroute.game import route_cost_vector
from hetroute.routes import enumerate_routes
from hetroute.potential import (
    check_symmetry,
    entropy_term,
    lyapunov_monitor,
    minimize_perturbed_potential,
    perturbed_potential,
    potential_structure,
    toll_potential,
)
from hetroute.schema import load_game, load_toll_spec
from hetroute.utils import dirichlet_flows


class TestSymmetry:
    """Test the cross-population symmetry check"""

    def test_toll_game_is_symmetric(self, toll_game, toll_routes):
        report = check_symmetry(toll_game, toll_routes)
        assert report.symmetric
        assert report.worst is None
        assert report.samples == 64

    def test_konishi_is_not_symmetric(self, konishi, konishi_routes):
        report = check_symmetry(konishi, konishi_routes)
        assert not report.symmetric
        assert report.samples == 1
        p, q, i, j = report.worst
        assert p in konishi.population_ids and q in konishi.population_ids
        assert 0 <= i < 4 and 0 <= j < 4
        assert report.violation > 1.0
        assert report.to_dict()["worst"] == [p, q, i, j]

    def test_no_potential_structure_for_konishi(self, konishi, konishi_routes):
        with pytest.raises(PreconditionError):
            potential_structure(konishi, konishi_routes)


class TestPotential:
    """Test V and V_eta"""

    def test_zero_toll_reduces_to_beckmann(self, games_dir):
        spec = load_toll_spec(games_dir / "toll_zero.json")
        routes = enumerate_routes(spec.to_game())
        z = routes.uniform()
        value = toll_potential(spec, routes, z)
        # f = (0.75, 0.75): int (1 + s) + int (2 + 0.5 s)
        assert value.V == pytest.approx(0.75 + 0.75**2 / 2 + 1.5 + 0.25 * 0.75**2)
        np.testing.assert_array_equal(potential_structure(spec, routes).offsets, 0.0)

    def test_spec_and_expanded_game_agree(self, toll_spec, toll_game, toll_routes):
        rng = np.random.default_rng(2)
        for z in dirichlet_flows(rng, toll_routes.sizes, toll_routes.throughputs, 10):
            assert toll_potential(toll_spec, toll_routes, z).V == pytest.approx(toll_potential(toll_game, toll_routes, z).V)

    def test_entropy_term(self, toll_routes):
        assert entropy_term(toll_routes, toll_routes.vertex((0, 2))) == 0.0
        assert entropy_term(toll_routes, toll_routes.uniform()) < 0.0

    def test_perturbed_potential(self, toll_spec, toll_routes):
        z = toll_routes.uniform()
        value = perturbed_potential(toll_spec, toll_routes, z, 0.5)
        assert value.V_eta == pytest.approx(value.V + 0.5 * value.entropy)
        assert perturbed_potential(toll_spec, toll_routes, z, 0.0).V_eta == value.V

    def test_negative_eta_rejected(self, toll_spec, toll_routes):
        with pytest.raises(ValidationError):
            perturbed_potential(toll_spec, toll_routes, toll_routes.uniform(), -0.1)

    @pytest.mark.parametrize("eta", [0.0, 0.3, 2.0])
    def test_gradient_is_route_cost_plus_entropy_slope(self, toll_spec, toll_game, toll_routes, eta):
        rng = np.random.default_rng(17)
        h = 1e-6
        for z in dirichlet_flows(rng, toll_routes.sizes, toll_routes.throughputs, 8):
            scale = toll_routes.throughputs[toll_routes.pop_of]
            gradient = route_cost_vector(toll_game, toll_routes, z) + eta * (np.log(z / scale) + 1.0)
            for p in range(toll_routes.n_populations):
                blk = toll_routes.block(p)
                for i in range(blk.start, blk.stop - 1):
                    step = np.zeros(toll_routes.dimension)
                    step[i], step[blk.stop - 1] = h, -h
                    up = perturbed_potential(toll_spec, toll_routes, z + step, eta).V_eta
                    down = perturbed_potential(toll_spec, toll_routes, z - step, eta).V_eta
                    expected = gradient[i] - gradient[blk.stop - 1]
                    assert (up - down) / (2 * h) == pytest.approx(expected, rel=1e-5, abs=1e-6)

    @pytest.mark.parametrize("eta", [0.2, 1.0, 5.0])
    def test_minimiser_is_logit_fixed_point(self, toll_spec, toll_game, toll_routes, eta):
        z_min, value = minimize_perturbed_potential(toll_spec, toll_routes, eta)
        rec = find_fixed_point(toll_game, toll_routes, eta, toll_routes.uniform())
        assert np.abs(z_min - rec.z).sum() < 1e-6
        assert value.V_eta <= perturbed_potential(toll_spec, toll_routes, toll_routes.uniform(), eta).V_eta


class TestLyapunov:
    """V_eta along logit trajectories"""

    @pytest.mark.parametrize("eta", [0.2, 1.0, 5.0])
    def test_non_increasing_along_trajectories(self, toll_spec, toll_game, toll_routes, eta):
        rng = np.random.default_rng(int(eta * 10))
        options = IntegratorOptions(stop_on_stationary=False)
        for z0 in dirichlet_flows(rng, toll_routes.sizes, toll_routes.throughputs, 10):
            trajectory = integrate(toll_game, toll_routes, z0, eta, 10.0, options)
            report = lyapunov_monitor(toll_spec, toll_routes, trajectory, eta)
            assert report.non_increasing
            assert report.values[-1] <= report.values[0]

    def test_konishi_refused(self, konishi, konishi_routes):
        trajectory = integrate(konishi, konishi_routes, konishi_routes.uniform(), 1.0, 0.1)
        with pytest.raises(PreconditionError):
            lyapunov_monitor(konishi, konishi_routes, trajectory, 1.0)

    def test_game_source_works_like_spec(self, games_dir, toll_routes):
        game = load_game(games_dir / "toll_two_population.json")
        trajectory = integrate(game, toll_routes, toll_routes.vertex((0, 0)), 1.0, 5.0, IntegratorOptions(stop_on_stationary=False))
        assert lyapunov_monitor(game, toll_routes, trajectory, 1.0).non_increasing
