"""
Jacobians of the logit map, linear stability and l1 contraction certificates

Matrices are indexed by flat route coordinates; RouteSet.labels() maps each
row/column to its (population id, route index) pair.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from hetroute.config import IntegratorOptions
from hetroute.dynamics import check_eta, integrate, softmax_blocks
from hetroute.exceptions import ErrorCodes, NumericalError, PreconditionError
from hetroute.game import Game, RouteSet, route_cost_vector
from hetroute.utils import DEFAULT_SAMPLE_SIZE, DEFAULT_SEED, VERTEX_CAP, dirichlet_flows, l1, parallel_map

logger = logging.getLogger(__name__)

MARGINAL_BAND = 1e-8

STABLE = "stable"
UNSTABLE = "unstable"
MARGINAL = "marginal"


def cost_derivatives(game: Game, routes: RouteSet, z: np.ndarray) -> np.ndarray:
    """
    D[i, j] = dc_i / dz_j = sum_e A_ei * tau'^{pop(i)}_e(f_e) * A_ej
    """
    f = routes.incidence @ z
    slopes = game.delay_derivative_matrix(f)[routes.pop_of]
    return (routes.incidence.T * slopes) @ routes.incidence


def _choice_probabilities(costs: np.ndarray, eta: float, routes: RouteSet) -> np.ndarray:
    return softmax_blocks(costs, eta, np.ones(routes.n_populations), routes.offsets)


def _finite(matrix: np.ndarray, operation: str) -> np.ndarray:
    if not np.all(np.isfinite(matrix)):
        raise NumericalError(f"Non-finite entry in {operation}", operation=operation, error_code=ErrorCodes.NON_FINITE)
    return matrix


def jacobian_z(game: Game, routes: RouteSet, z: np.ndarray, eta: float) -> np.ndarray:
    """
    J_{G,z}: partial derivatives dG^p_i / dz^q_j

    With pi the per-population choice probabilities,
    J[i, j] = -(v_p / eta) * pi_i * (D[i, j] - sum_{s in p} pi_s D[s, j]).
    The probabilities are computed from min-shifted costs, like logit_map.

    Raises:
        NumericalError: non-finite entry
    """
    eta = check_eta(eta)
    z = np.asarray(z, dtype=float)
    pi = _choice_probabilities(route_cost_vector(game, routes, z), eta, routes)
    D = cost_derivatives(game, routes, z)
    mean_rows = np.add.reduceat(pi[:, None] * D, routes.offsets, axis=0)
    scale = routes.throughputs[routes.pop_of] / eta * pi
    return _finite(-scale[:, None] * (D - mean_rows[routes.pop_of]), "jacobian_z")


def jacobian_eta(game: Game, routes: RouteSet, z: np.ndarray, eta: float) -> np.ndarray:
    """
    dG/deta: v_p * pi_i * (c_i - mean_p c) / eta**2
    """
    eta = check_eta(eta)
    z = np.asarray(z, dtype=float)
    costs = route_cost_vector(game, routes, z)
    pi = _choice_probabilities(costs, eta, routes)
    shifted = costs - np.repeat(np.minimum.reduceat(costs, routes.offsets), routes.sizes)
    mean_cost = np.add.reduceat(pi * shifted, routes.offsets)
    out = routes.throughputs[routes.pop_of] * pi * (shifted - mean_cost[routes.pop_of]) / eta**2
    return _finite(out, "jacobian_eta")


def tangent_matrix(routes: RouteSet, matrix: np.ndarray) -> np.ndarray:
    """Restriction L M B of a flat-coordinate matrix to the tangent space of Z"""
    return routes.tangent_coords @ matrix @ routes.tangent_basis


def _sorted_eigenvalues(values: np.ndarray) -> np.ndarray:
    order = np.lexsort((values.imag, -values.real))
    return values[order]


@dataclass
class StabilityReport:
    """Tangent-space spectrum of J_g = J_{G,z} - I at a fixed point"""

    classification: str
    eigenvalues: np.ndarray
    full_spectrum: np.ndarray
    eta: float

    @property
    def max_real(self) -> float:
        return float(self.eigenvalues.real.max()) if self.eigenvalues.size else -1.0


def classify_spectrum(eigenvalues: np.ndarray, band: float = MARGINAL_BAND) -> str:
    if eigenvalues.size == 0 or np.all(eigenvalues.real < -band):
        return STABLE
    if np.any(eigenvalues.real > band):
        return UNSTABLE
    return MARGINAL


def classify(
    game: Game,
    routes: RouteSet,
    z: np.ndarray,
    eta: float,
    residual_tol: Optional[float] = 1e-10,
) -> StabilityReport:
    """
    Classify a fixed point by the spectrum of J_g restricted to the tangent space

    The full spectrum adds one eigenvalue -1 per population for the
    simplex-normal directions, so it has sum_p |R_p| entries.

    Raises:
        PreconditionError: z is not a fixed point within residual_tol
        NumericalError: eigen-solver failure
    """
    eta = check_eta(eta)
    z = routes.check_admissible(z)
    if residual_tol is not None:
        residual = l1(softmax_blocks(route_cost_vector(game, routes, z), eta, routes.throughputs, routes.offsets) - z)
        if residual > residual_tol:
            raise PreconditionError(
                f"Not a fixed point: residual {residual:.3e} > {residual_tol:g}",
                operation="classify",
                reason="residual",
            )
    J = jacobian_z(game, routes, z, eta) - np.eye(routes.dimension)
    M = tangent_matrix(routes, J)
    try:
        tangent = np.linalg.eigvals(M) if M.size else np.zeros(0, dtype=complex)
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"Eigenvalue computation failed: {e}", operation="classify")
    tangent = _sorted_eigenvalues(np.asarray(tangent, dtype=complex))
    full = _sorted_eigenvalues(np.concatenate([tangent, -np.ones(routes.n_populations, dtype=complex)]))
    return StabilityReport(classification=classify_spectrum(tangent), eigenvalues=tangent, full_spectrum=full, eta=eta)


def critical_direction(game: Game, routes: RouteSet, z: np.ndarray, eta: float) -> np.ndarray:
    """
    Tangent direction of the eigenvalue with the largest real part

    Returned in flat coordinates with unit l1 norm.
    """
    J = jacobian_z(game, routes, z, eta) - np.eye(routes.dimension)
    M = tangent_matrix(routes, J)
    if M.size == 0:
        return np.zeros(routes.dimension)
    values, vectors = np.linalg.eig(M)
    k = int(np.argmax(values.real))
    direction = routes.tangent_basis @ np.real(vectors[:, k])
    norm = l1(direction)
    return direction / norm if norm > 0 else direction


@dataclass
class ContractionCertificate:
    """
    Sampled l1 contraction margin c of logit(eta)

    c = -max over sample and columns j of (J_jj + sum_{i != j} |J_ij|) for
    J = J_{G,z} - I. A positive c is evidence, not proof: only the sample is
    checked.
    """

    eta: float
    margin_c: float
    sample_size: int
    seed: Optional[int]
    worst_point: np.ndarray
    worst_column: int
    sample_description: str = "custom"

    @property
    def valid(self) -> bool:
        return self.margin_c > 0

    def to_dict(self, routes: Optional[RouteSet] = None) -> dict:
        worst = [float(x) for x in self.worst_point]
        if routes is not None:
            worst = {pid: [float(x) for x in block] for pid, block in zip(routes.population_ids, routes.split(self.worst_point))}
        return {
            "eta": self.eta,
            "margin_c": self.margin_c,
            "valid": self.valid,
            "sample_size": self.sample_size,
            "sample": self.sample_description,
            "seed": self.seed,
            "worst_point": worst,
            "worst_column": self.worst_column,
        }


def column_measures(game: Game, routes: RouteSet, z: np.ndarray, eta: float) -> np.ndarray:
    """mu_j = J_jj + sum_{i != j} |J_ij| for J = J_{G,z} - I"""
    JG = jacobian_z(game, routes, z, eta)
    diag = np.diag(JG)
    return (diag - 1.0) + (np.abs(JG).sum(axis=0) - np.abs(diag))


def default_sample(routes: RouteSet, size: int = DEFAULT_SAMPLE_SIZE, seed: int = DEFAULT_SEED) -> np.ndarray:
    """Dirichlet interior points followed by the vertices of Z (capped)"""
    rng = np.random.default_rng(seed)
    interior = dirichlet_flows(rng, routes.sizes, routes.throughputs, size)
    vertices = list(routes.iter_vertices(cap=VERTEX_CAP))
    return np.vstack([interior] + ([np.array(vertices)] if vertices else []))


def _measure_worker(task: Tuple[Game, RouteSet, np.ndarray, float]) -> np.ndarray:
    game, routes, chunk, eta = task
    return np.array([column_measures(game, routes, z, eta) for z in chunk])


def contraction_margin(
    game: Game,
    routes: RouteSet,
    eta: float,
    z_sample: Optional[np.ndarray] = None,
    seed: int = DEFAULT_SEED,
    sample_size: int = DEFAULT_SAMPLE_SIZE,
    jobs: int = 1,
) -> ContractionCertificate:
    """
    Sampled contraction margin of logit(eta)

    Args:
        z_sample: Admissible flows, shape (k, n); default is sample_size
            Dirichlet points plus the vertices, drawn with `seed`
        jobs: Worker processes for the sample sweep

    Returns:
        ContractionCertificate, valid iff margin_c > 0
    """
    eta = check_eta(eta)
    if z_sample is None:
        sample = default_sample(routes, sample_size, seed)
        description = f"dirichlet:{sample_size}+vertices"
        used_seed: Optional[int] = seed
    else:
        sample = np.atleast_2d(np.asarray(z_sample, dtype=float))
        description = "custom"
        used_seed = None
    chunks = np.array_split(sample, max(1, min(jobs, len(sample))))
    measures = np.vstack(parallel_map(_measure_worker, [(game, routes, c, eta) for c in chunks if len(c)], jobs))
    flat = int(np.argmax(measures))
    k, j = divmod(flat, measures.shape[1])
    cert = ContractionCertificate(
        eta=eta,
        margin_c=float(-measures[k, j]),
        sample_size=len(sample),
        seed=used_seed,
        worst_point=sample[k].copy(),
        worst_column=j,
        sample_description=description,
    )
    logger.debug(f"Contraction margin at eta={eta:g}: c={cert.margin_c:.6g} over {len(sample)} samples")
    return cert


@dataclass
class ThresholdEstimate:
    """
    Sampled estimate of the noise level above which logit(eta) contracts

    crossings lists every bracket [lo, hi] where validity flips; one_sided is
    set when no flip was found in the scanned range.
    """

    eta_hat: Optional[float]
    crossings: List[Tuple[float, float]]
    valid_at_lower: bool
    valid_at_upper: bool
    bracket: Tuple[float, float]
    sample_size: int
    seed: int
    sampled: bool = True
    one_sided: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "eta_hat": self.eta_hat,
            "crossings": [list(c) for c in self.crossings],
            "valid_at_lower": self.valid_at_lower,
            "valid_at_upper": self.valid_at_upper,
            "bracket": list(self.bracket),
            "sample_size": self.sample_size,
            "seed": self.seed,
            "sampled": self.sampled,
            "one_sided": self.one_sided,
        }


def estimate_eta_threshold(
    game: Game,
    routes: RouteSet,
    tol: float = 1e-3,
    eta_lo: float = 1e-3,
    eta_hi: float = 1e9,
    points_per_decade: int = 4,
    z_sample: Optional[np.ndarray] = None,
    seed: int = DEFAULT_SEED,
    sample_size: int = DEFAULT_SAMPLE_SIZE,
    jobs: int = 1,
) -> ThresholdEstimate:
    """
    Locate where the sampled contraction certificate switches validity

    Scans a log grid over [eta_lo, eta_hi], then bisects every sign change
    (in log eta) to relative width tol. eta_hat is the upper end of the
    highest bracket whose upper side is valid, so every tested eta above it
    contracts.
    """
    sample = default_sample(routes, sample_size, seed) if z_sample is None else np.atleast_2d(z_sample)

    def valid(eta: float) -> bool:
        return contraction_margin(game, routes, eta, z_sample=sample, jobs=jobs).valid

    decades = math.log10(eta_hi / eta_lo)
    grid = np.geomspace(eta_lo, eta_hi, int(round(decades * points_per_decade)) + 1)
    flags = [valid(float(eta)) for eta in grid]

    crossings: List[Tuple[float, float]] = []
    upper_valid: List[bool] = []
    for k in range(len(grid) - 1):
        if flags[k] == flags[k + 1]:
            continue
        lo, hi = float(grid[k]), float(grid[k + 1])
        lo_flag = flags[k]
        while hi / lo - 1.0 > tol:
            mid = math.sqrt(lo * hi)
            if valid(mid) == lo_flag:
                lo = mid
            else:
                hi = mid
        crossings.append((lo, hi))
        upper_valid.append(flags[k + 1])

    one_sided = None
    if not crossings:
        one_sided = "valid-everywhere" if flags[0] else "invalid-everywhere"
        eta_hat = float(grid[0]) if flags[0] else None
    else:
        eta_hat = None
        if flags[-1]:
            for (lo, hi), up in zip(reversed(crossings), reversed(upper_valid)):
                if up:
                    eta_hat = hi
                    break
    logger.info(f"Contraction threshold estimate: eta_hat={eta_hat}, {len(crossings)} crossing(s), one_sided={one_sided}")
    return ThresholdEstimate(
        eta_hat=eta_hat,
        crossings=crossings,
        valid_at_lower=flags[0],
        valid_at_upper=flags[-1],
        bracket=(float(eta_lo), float(eta_hi)),
        sample_size=len(sample),
        seed=seed,
        one_sided=one_sided,
    )


@dataclass
class ContractionCheck:
    """Outcome of checking ||x(t) - y(t)||_1 <= e^{-ct} ||x0 - y0||_1 on trajectory pairs"""

    holds: bool
    margin_c: float
    worst_ratio: float
    violation: Optional[Tuple[int, float]] = None
    pairs_checked: int = 0
    slack: float = 1.01
    decay_rates: List[float] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.holds


def verify_contraction_inequality(
    game: Game,
    routes: RouteSet,
    eta: float,
    pairs: Sequence[Tuple[np.ndarray, np.ndarray]],
    horizon: float,
    margin_c: Optional[float] = None,
    options: Optional[IntegratorOptions] = None,
    slack: float = 1.01,
) -> ContractionCheck:
    """
    Integrate each start pair and test the exponential l1 bound at every recorded time

    Args:
        margin_c: Contraction margin; computed from the default sample when omitted
        slack: Multiplicative allowance for discretization error

    Raises:
        PreconditionError: the margin is not positive
    """
    eta = check_eta(eta)
    if margin_c is None:
        margin_c = contraction_margin(game, routes, eta).margin_c
    if margin_c <= 0:
        raise PreconditionError(
            f"No contraction certificate at eta={eta:g} (c={margin_c:.3g})",
            operation="verify_contraction_inequality",
            reason="margin",
        )
    base = options or IntegratorOptions()
    opts = base.model_copy(update={"stop_on_stationary": False, "method": "rk4"})

    worst_ratio = 0.0
    violation = None
    rates: List[float] = []
    for index, (x0, y0) in enumerate(pairs):
        tx = integrate(game, routes, x0, eta, horizon, opts)
        ty = integrate(game, routes, y0, eta, horizon, opts)
        dist = np.abs(tx.states - ty.states).sum(axis=1)
        bound = np.exp(-margin_c * tx.times) * dist[0]
        if np.any(dist > slack * bound + 1e-12) and violation is None:
            k = int(np.argmax(dist - slack * bound))
            violation = (index, float(tx.times[k]))
            logger.warning(f"Contraction inequality violated for pair {index} at t={tx.times[k]:.4g}")
        if dist[0] > 0:
            worst_ratio = max(worst_ratio, float(np.max(dist / bound)))
            if dist[-1] > 0:
                rates.append(float(-math.log(dist[-1] / dist[0]) / tx.times[-1]))
    return ContractionCheck(
        holds=violation is None,
        margin_c=float(margin_c),
        worst_ratio=worst_ratio,
        violation=violation,
        pairs_checked=len(pairs),
        slack=slack,
        decay_rates=rates,
    )
