"""
Potential-game structure: symmetry check, toll potentials, Lyapunov monitoring
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
from scipy.optimize import minimize
from scipy.special import xlogy

from hetroute.exceptions import PreconditionError, ValidationError
from hetroute.game import DelayFunction, Game, Network, Population, RouteSet, route_cost_vector
from hetroute.utils import dirichlet_flows, segment_sum

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-9
LYAPUNOV_SLACK = 1e-7


@dataclass(frozen=True)
class PopulationDemand:
    """Population of a toll game: OD pair and throughput, delays come from the toll game"""

    id: str
    origin: str
    destination: str
    throughput: float


@dataclass(frozen=True, eq=False)
class TollGameSpec:
    """
    Shared link delays plus population-specific toll costs

    tau^p_e(f) = tau_e(f) + alpha_p * omega_e
    """

    network: Network
    populations: Tuple[PopulationDemand, ...]
    base_delays: Mapping[str, DelayFunction]
    tolls: Mapping[str, float]
    sensitivities: Mapping[str, float]

    def __post_init__(self):
        links = set(self.network.link_ids)
        for name, mapping, keys in (
            ("base_delays", self.base_delays, links),
            ("tolls", self.tolls, links),
            ("sensitivities", self.sensitivities, {p.id for p in self.populations}),
        ):
            if set(mapping) != keys:
                raise ValidationError(
                    f"{name} must list exactly {sorted(keys)}",
                    invariant="toll-spec-keys",
                    field=name,
                    value=sorted(mapping),
                )
        for name, mapping in (("tolls", self.tolls), ("sensitivities", self.sensitivities)):
            for key, value in mapping.items():
                if not math.isfinite(value) or value < 0:
                    raise ValidationError(
                        f"{name}[{key!r}] must be finite and non-negative",
                        invariant="non-negative-tolls",
                        field=f"{name}.{key}",
                        value=value,
                    )

    def to_game(self) -> Game:
        """Expand into a standard Game"""
        populations = tuple(
            Population(
                id=p.id,
                origin=p.origin,
                destination=p.destination,
                throughput=p.throughput,
                delays={
                    e: self.base_delays[e].shifted(self.sensitivities[p.id] * self.tolls[e])
                    for e in self.network.link_ids
                },
            )
            for p in self.populations
        )
        return Game(network=self.network, populations=populations)


@dataclass(frozen=True)
class PotentialStructure:
    """
    Shared congestion delays plus per-population constant link offsets

    A toll game has offsets alpha_p * omega_e on top of its base delays.
    """

    shared: Tuple[DelayFunction, ...]
    offsets: np.ndarray


def potential_structure(source: Union[TollGameSpec, Game], routes: RouteSet) -> PotentialStructure:
    """
    Split delays into a shared part and constant per-population offsets

    Only links that a population can route over must agree in their
    non-constant coefficients.

    Raises:
        PreconditionError: the game does not split this way
    """
    if isinstance(source, TollGameSpec):
        alphas = np.array([source.sensitivities[p.id] for p in source.populations])
        omegas = np.array([source.tolls[e] for e in source.network.link_ids])
        return PotentialStructure(
            shared=tuple(source.base_delays[e] for e in source.network.link_ids),
            offsets=np.outer(alphas, omegas),
        )
    coeffs = source.coefficients
    uses = np.stack([routes.incidence_matrix(p).sum(axis=1) > 0 for p in range(routes.n_populations)])
    shared = []
    offsets = np.zeros(coeffs.shape[:2])
    for e in range(coeffs.shape[1]):
        users = np.flatnonzero(uses[:, e])
        if users.size == 0:
            shared.append(DelayFunction.constant(0.0))
            continue
        slopes = coeffs[users, e, 1:]
        if not np.allclose(slopes, slopes[0], rtol=0.0, atol=1e-12):
            raise PreconditionError(
                f"Populations disagree on the flow-dependent delay of link {routes.link_ids[e]!r}",
                operation="potential",
                reason="no-shared-delay",
            )
        shared.append(DelayFunction.poly([0.0] + list(slopes[0])))
        offsets[:, e] = coeffs[:, e, 0]
    return PotentialStructure(shared=tuple(shared), offsets=offsets)


@dataclass(frozen=True)
class PotentialValue:
    """V_eta = V + eta * entropy, entropy <= 0"""

    V: float
    V_eta: float
    entropy: float
    eta: float = 0.0


def _potential(structure: PotentialStructure, routes: RouteSet, z: np.ndarray) -> float:
    f = routes.incidence @ z
    congestion = sum(float(d.integral(fe)) for d, fe in zip(structure.shared, f))
    # offsets[p] . A^p z^p for every population at once
    toll = float(np.einsum("ek,ke->", routes.incidence * z, structure.offsets[routes.pop_of]))
    return congestion + toll


def entropy_term(routes: RouteSet, z: np.ndarray) -> float:
    """sum_p sum_i z^p_i log(z^p_i / v_p), with 0 log 0 = 0"""
    scale = routes.throughputs[routes.pop_of]
    ratio = np.divide(z, scale, out=np.ones_like(z), where=scale > 0)
    return float(xlogy(z, ratio).sum())


def toll_potential(source: Union[TollGameSpec, Game], routes: RouteSet, z: np.ndarray) -> PotentialValue:
    """
    V(z) = sum_e int_0^{f_e} tau_e + sum_p sum_e alpha_p omega_e (A^p z^p)_e in closed form
    """
    z = routes.check_admissible(z)
    V = _potential(potential_structure(source, routes), routes, z)
    return PotentialValue(V=V, V_eta=V, entropy=0.0, eta=0.0)


def perturbed_potential(source: Union[TollGameSpec, Game], routes: RouteSet, z: np.ndarray, eta: float) -> PotentialValue:
    """V_eta(z) = V(z) + eta * sum_p sum_i z^p_i log(z^p_i / v_p)"""
    if not math.isfinite(eta) or eta < 0:
        raise ValidationError("eta must be finite and >= 0", invariant="eta-non-negative", field="eta", value=eta)
    z = routes.check_admissible(z)
    V = _potential(potential_structure(source, routes), routes, z)
    H = entropy_term(routes, z)
    return PotentialValue(V=V, V_eta=V + eta * H, entropy=H, eta=float(eta))


@dataclass
class SymmetryReport:
    """
    Cross-population symmetry of route-cost derivatives

    worst is (population p, population q, route i of p, route j of q).
    """

    symmetric: bool
    violation: float
    worst: Optional[Tuple[str, str, int, int]]
    samples: int
    tol: float = SYMMETRY_TOL

    def __bool__(self) -> bool:
        return self.symmetric

    def to_dict(self) -> dict:
        return {
            "symmetric": self.symmetric,
            "violation": self.violation,
            "worst": list(self.worst) if self.worst else None,
            "samples": self.samples,
            "tol": self.tol,
        }


def check_symmetry(
    game: Game,
    routes: RouteSet,
    z_samples: Optional[np.ndarray] = None,
    seed: int = 0,
    sample_size: int = 64,
    tol: float = SYMMETRY_TOL,
) -> SymmetryReport:
    """
    Compare sum over shared links of tau^p' and tau^q' for every route pair across populations

    Games whose delays are at most affine have constant derivatives, so one
    sample decides. Routes without shared links compare 0 with 0.
    """
    if z_samples is None:
        z_samples = dirichlet_flows(np.random.default_rng(seed), routes.sizes, routes.throughputs, sample_size)
    samples = np.atleast_2d(np.asarray(z_samples, dtype=float))
    if max(d.degree for p in game.populations for d in p.delays.values()) <= 1:
        samples = samples[:1]

    worst_value = 0.0
    worst: Optional[Tuple[str, str, int, int]] = None
    P = routes.n_populations
    for z in samples:
        slopes = game.delay_derivative_matrix(routes.incidence @ z)
        for p in range(P):
            Ap = routes.incidence_matrix(p)
            for q in range(p + 1, P):
                Aq = routes.incidence_matrix(q)
                diff = np.abs(Ap.T @ ((slopes[p] - slopes[q])[:, None] * Aq))
                if diff.size and diff.max() > worst_value:
                    i, j = np.unravel_index(int(np.argmax(diff)), diff.shape)
                    worst_value = float(diff[i, j])
                    worst = (routes.population_ids[p], routes.population_ids[q], int(i), int(j))
    symmetric = worst_value <= tol
    logger.info(f"Symmetry check: symmetric={symmetric}, worst violation {worst_value:.3g}")
    return SymmetryReport(symmetric=symmetric, violation=worst_value, worst=worst if not symmetric else None, samples=len(samples), tol=tol)


@dataclass
class LyapunovReport:
    """V_eta along a trajectory"""

    non_increasing: bool
    max_increase: float
    values: List[float] = field(default_factory=list)
    slack: float = LYAPUNOV_SLACK

    def __bool__(self) -> bool:
        return self.non_increasing

    def to_dict(self) -> dict:
        return {
            "non_increasing": self.non_increasing,
            "max_increase": self.max_increase,
            "slack": self.slack,
            "initial": self.values[0] if self.values else None,
            "final": self.values[-1] if self.values else None,
        }


def _as_game(source: Union[TollGameSpec, Game]) -> Game:
    return source.to_game() if isinstance(source, TollGameSpec) else source


def lyapunov_monitor(
    source: Union[TollGameSpec, Game],
    routes: RouteSet,
    trajectory,
    eta: float,
    slack: float = LYAPUNOV_SLACK,
) -> LyapunovReport:
    """
    Evaluate V_eta at every recorded state and check it never rises by more than slack

    Raises:
        PreconditionError: the game fails the symmetry check
    """
    game = _as_game(source)
    symmetry = check_symmetry(game, routes)
    if not symmetry.symmetric:
        raise PreconditionError(
            f"Game has no potential: symmetry violated by {symmetry.violation:.3g} at {symmetry.worst}",
            operation="lyapunov_monitor",
            reason="symmetry",
        )
    structure = potential_structure(source, routes)
    values = [_potential(structure, routes, z) + eta * entropy_term(routes, z) for z in trajectory.states]
    increases = np.diff(values) if len(values) > 1 else np.zeros(0)
    max_increase = float(increases.max()) if increases.size else 0.0
    return LyapunovReport(non_increasing=max_increase <= slack, max_increase=max_increase, values=values, slack=slack)


def minimize_perturbed_potential(
    source: Union[TollGameSpec, Game],
    routes: RouteSet,
    eta: float,
    z0: Optional[np.ndarray] = None,
    gtol: float = 1e-12,
) -> Tuple[np.ndarray, PotentialValue]:
    """
    Minimise V_eta over Z with BFGS in softmax coordinates

    Each population's last route logit is pinned at 0. The gradient of V in z
    is the route-cost vector, so the objective gradient is analytic.

    Returns:
        (minimiser, its PotentialValue)
    """
    if not math.isfinite(eta) or eta <= 0:
        raise ValidationError("eta must be positive and finite", invariant="eta-positive", field="eta", value=eta)
    game = _as_game(source)
    structure = potential_structure(source, routes)
    free = routes.tangent_coords
    sizes = routes.sizes
    v = routes.throughputs

    def flows(theta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        logits = free.T @ theta
        shifted = logits - np.repeat(np.maximum.reduceat(logits, routes.offsets), sizes)
        w = np.exp(shifted)
        pi = w / np.repeat(segment_sum(w, routes.offsets), sizes)
        return v[routes.pop_of] * pi, pi

    def objective(theta: np.ndarray):
        z, pi = flows(theta)
        value = _potential(structure, routes, z) + eta * entropy_term(routes, z)
        g = route_cost_vector(game, routes, z) + eta * np.log(np.maximum(pi, 1e-300))
        mean = np.repeat(segment_sum(pi * g, routes.offsets), sizes)
        grad_z = v[routes.pop_of] * pi * (g - mean)
        return value, free @ grad_z

    if z0 is None:
        theta0 = np.zeros(free.shape[0])
    else:
        z0 = routes.check_admissible(z0)
        shares = np.divide(z0, v[routes.pop_of], out=np.full_like(z0, 1.0), where=v[routes.pop_of] > 0)
        logs = np.log(np.maximum(shares, 1e-300))
        last = np.repeat(logs[routes.offsets + sizes - 1], sizes)
        theta0 = free @ (logs - last)

    if theta0.size == 0:
        z, _ = flows(theta0)
    else:
        result = minimize(objective, theta0, jac=True, method="BFGS", options={"gtol": gtol, "maxiter": 10_000})
        if not result.success:
            logger.debug(f"BFGS stopped: {result.message}")
        z, _ = flows(result.x)
    return z, perturbed_potential(source, routes, routes.project(z), eta)
