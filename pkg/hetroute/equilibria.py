"""
Wardrop and strict equilibria, fixed points of logit(eta)
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from hetroute.config import SolverOptions
from hetroute.dynamics import _logit, check_eta
from hetroute.exceptions import (
    CapExceededError,
    HetrouteError,
    NoConvergenceError,
    SingularSystemError,
    ValidationError,
    format_error_message,
)
from hetroute.game import Game, RouteSet, route_costs
from hetroute.monitoring import record_solve
from hetroute.stability import classify, jacobian_z, tangent_matrix
from hetroute.utils import SUPPORT_FRACTION, VERTEX_CAP, dirichlet_flows, l1, parallel_map

logger = logging.getLogger(__name__)

MERGE_RADIUS = 1e-6
HANDOFF_ETA = 1e3
HANDOFF_STEPS_PER_DECADE = 20
MAX_CONDITION = 1e14
# Picard iterations improving the best residual by less than 0.1% count as stalled
PROGRESS = 0.999


@dataclass
class PopulationGap:
    """Definition-2 check for one population"""

    population: str
    min_cost: float
    gap: float
    weighted_gap: float
    worst_route: Optional[int]


@dataclass
class WardropReport:
    """
    Wardrop check of a route flow

    gap is the worst cost excess of a used route (z^p_r > 1e-10 v_p) over the
    cheapest route of its population. weighted_gap weighs each excess by its
    route share, which decays smoothly along logit branches.
    """

    is_equilibrium: bool
    tol: float
    populations: List[PopulationGap]

    @property
    def gap(self) -> float:
        return max((p.gap for p in self.populations), default=0.0)

    @property
    def weighted_gap(self) -> float:
        return max((p.weighted_gap for p in self.populations), default=0.0)

    def violation(self) -> Optional[Tuple[str, int, float]]:
        """(population, route index, gap) of the worst used suboptimal route"""
        worst = max(self.populations, key=lambda p: p.gap, default=None)
        if worst is None or worst.gap <= self.tol or worst.worst_route is None:
            return None
        return worst.population, worst.worst_route, worst.gap

    def to_dict(self) -> dict:
        return {
            "is_equilibrium": self.is_equilibrium,
            "tol": self.tol,
            "gap": self.gap,
            "weighted_gap": self.weighted_gap,
            "populations": [
                {
                    "population": p.population,
                    "min_cost": p.min_cost,
                    "gap": p.gap,
                    "weighted_gap": p.weighted_gap,
                    "worst_route": p.worst_route,
                }
                for p in self.populations
            ],
        }


def check_wardrop(game: Game, routes: RouteSet, z: np.ndarray, tol: float = 1e-8) -> WardropReport:
    """
    Check that no used route is costlier than the cheapest route of its population

    Strictness is not judged here.
    """
    z = routes.check_admissible(z)
    costs = route_costs(game, routes, z)
    entries = []
    for p, (block, c) in enumerate(zip(routes.split(z), costs)):
        v = float(routes.throughputs[p])
        cmin = float(c.min())
        excess = c - cmin
        used = block > SUPPORT_FRACTION * v
        if v > 0 and np.any(used):
            k = int(np.argmax(np.where(used, excess, -np.inf)))
            gap = float(excess[k])
            weighted = float(np.dot(block / v, excess))
            worst = k if gap > 0 else None
        else:
            gap, weighted, worst = 0.0, 0.0, None
        entries.append(PopulationGap(routes.population_ids[p], cmin, gap, weighted, worst))
    return WardropReport(is_equilibrium=all(e.gap <= tol for e in entries), tol=tol, populations=entries)


@dataclass
class StrictReport:
    """Strict-equilibrium check: one route per population, strictly cheapest"""

    is_strict: bool
    margins: List[float]
    chosen: List[Optional[int]]
    tol: float

    def __bool__(self) -> bool:
        return self.is_strict

    @property
    def min_margin(self) -> float:
        return min(self.margins, default=math.inf)

    def to_dict(self) -> dict:
        return {
            "is_strict": self.is_strict,
            "tol": self.tol,
            "margins": [m if math.isfinite(m) else "inf" for m in self.margins],
            "chosen_routes": self.chosen,
        }


def check_strict(game: Game, routes: RouteSet, z: np.ndarray, tol: float = 1e-8) -> StrictReport:
    """
    Check z^p = v_p delta^(r) with c^p_r < c^p_s for all s != r, margin > tol

    A single-route population has margin +inf. A population with zero
    throughput is judged on its cheapest route.
    """
    z = routes.check_admissible(z)
    costs = route_costs(game, routes, z)
    margins: List[float] = []
    chosen: List[Optional[int]] = []
    on_vertex = True
    for p, (block, c) in enumerate(zip(routes.split(z), costs)):
        v = float(routes.throughputs[p])
        r = int(np.argmin(c)) if v == 0 else int(np.argmax(block))
        if v > 0:
            others = np.delete(block, r)
            if np.any(others > SUPPORT_FRACTION * v):
                on_vertex = False
                chosen.append(None)
            else:
                chosen.append(r)
        else:
            chosen.append(r)
        rivals = np.delete(c, r)
        margins.append(float((rivals - c[r]).min()) if rivals.size else math.inf)
    is_strict = on_vertex and all(m > tol for m in margins)
    return StrictReport(is_strict=is_strict, margins=margins, chosen=chosen, tol=tol)


@dataclass
class StrictEquilibrium:
    z: np.ndarray
    chosen: Tuple[int, ...]
    margins: List[float]


def enumerate_strict_candidates(game: Game, routes: RouteSet, tol: float = 1e-8) -> List[StrictEquilibrium]:
    """
    Test every vertex profile of Z for strictness

    Raises:
        CapExceededError: more than 1024 vertex profiles
    """
    if routes.vertex_count > VERTEX_CAP:
        raise CapExceededError(
            f"{routes.vertex_count} vertex profiles exceed the cap of {VERTEX_CAP}",
            what="vertices",
            cap=VERTEX_CAP,
        )
    found = []
    for z in routes.iter_vertices():
        report = check_strict(game, routes, z, tol)
        if report.is_strict:
            found.append(StrictEquilibrium(z=z, chosen=tuple(report.chosen), margins=report.margins))
    logger.info(f"Found {len(found)} strict equilibria among {routes.vertex_count} vertex profiles")
    return found


def trapping_radius(
    game: Game,
    routes: RouteSet,
    z_strict: np.ndarray,
    eps_grid: Optional[Sequence[float]] = None,
    samples: int = 256,
    seed: int = 0,
) -> float:
    """
    Largest sampled eps such that on O_eps = {z : z^p_r >= v_p (1 - eps)} the
    strict route stays at least alpha/2 cheaper than every rival

    alpha is the strict margin at z_strict. Returns 0.0 when no grid value passes.
    """
    report = check_strict(game, routes, z_strict)
    if not report.is_strict:
        return 0.0
    alpha = report.min_margin
    if not math.isfinite(alpha):
        return 1.0
    grid = sorted(eps_grid or [2.0**-k for k in range(1, 15)], reverse=True)
    rng = np.random.default_rng(seed)
    for eps in grid:
        if _trapping_holds(game, routes, report.chosen, eps, alpha, rng, samples):
            return float(eps)
    return 0.0


def _trapping_holds(game, routes, chosen, eps, alpha, rng, samples) -> bool:
    points = []
    others = dirichlet_flows(rng, routes.sizes, np.ones(routes.n_populations), samples)
    depth = rng.uniform(0.0, 1.0, size=(samples, routes.n_populations))
    for k in range(samples):
        z = np.zeros(routes.dimension)
        for p, r in enumerate(chosen):
            blk = routes.block(p)
            v = float(routes.throughputs[p])
            spill = v * eps * depth[k, p]
            share = others[k, blk].copy()
            share[r] = 0.0
            total = share.sum()
            share = share / total if total > 0 else np.zeros_like(share)
            z[blk] = spill * share
            z[blk.start + r] = v - z[blk].sum()
        points.append(z)
    # corners: each population spills eps onto a single rival
    for vertex in routes.iter_vertices(cap=VERTEX_CAP):
        z = np.zeros(routes.dimension)
        for p, r in enumerate(chosen):
            blk = routes.block(p)
            v = float(routes.throughputs[p])
            rival = int(np.argmax(vertex[blk]))
            z[blk.start + r] = v
            if rival != r:
                z[blk.start + r] -= v * eps
                z[blk.start + rival] += v * eps
        points.append(z)
    for z in points:
        for p, (r, c) in enumerate(zip(chosen, route_costs(game, routes, z))):
            rivals = np.delete(c, r)
            if rivals.size and (rivals - c[r]).min() < alpha / 2:
                return False
    return True


@dataclass
class FixedPointRecord:
    """
    Fixed point of logit(eta) with its spectrum

    eigenvalues is the full spectrum of J_g (sum_p |R_p| values);
    tangent_eigenvalues the part used for the stability class.
    """

    z: np.ndarray
    eta: float
    residual: float
    stability: str
    eigenvalues: np.ndarray
    tangent_eigenvalues: np.ndarray
    wardrop_gap: float
    weighted_gap: float
    iterations: int = 0

    def to_dict(self, routes: RouteSet) -> dict:
        return {
            "eta": self.eta,
            "z": {pid: [float(x) for x in block] for pid, block in zip(routes.population_ids, routes.split(self.z))},
            "residual": self.residual,
            "eigenvalues": [{"re": float(e.real), "im": float(e.imag)} for e in self.eigenvalues],
            "stability": self.stability,
            "wardrop_gap": self.wardrop_gap,
            "weighted_wardrop_gap": self.weighted_gap,
        }


def _residual(game, routes, z, eta) -> float:
    return l1(_logit(game, routes, z, eta) - z)


def newton_polish(
    game: Game,
    routes: RouteSet,
    eta: float,
    z: np.ndarray,
    tol: float = 1e-12,
    max_iter: int = 60,
) -> Tuple[np.ndarray, float, int]:
    """
    Newton on g(z) = G(z, eta) - z in per-population tangent coordinates

    Steps are clipped back into Z and halved until the residual drops.

    Returns:
        (z, residual, iterations)

    Raises:
        SingularSystemError: tangent Jacobian singular or ill-conditioned
    """
    eye = np.eye(routes.dimension)
    residual = _residual(game, routes, z, eta)
    k = 0
    for k in range(1, max_iter + 1):
        if residual <= tol:
            return z, residual, k - 1
        g = _logit(game, routes, z, eta) - z
        M = tangent_matrix(routes, jacobian_z(game, routes, z, eta) - eye)
        if M.size == 0:
            return routes.project(z + g), _residual(game, routes, routes.project(z + g), eta), k
        cond = np.linalg.cond(M)
        if not np.isfinite(cond) or cond > MAX_CONDITION:
            raise SingularSystemError(f"Newton system ill-conditioned (cond={cond:.3g})", operation="newton_polish", condition=float(cond))
        try:
            step = routes.tangent_basis @ np.linalg.solve(M, -(routes.tangent_coords @ g))
        except np.linalg.LinAlgError as e:
            raise SingularSystemError(f"Newton system singular: {e}", operation="newton_polish")
        t = 1.0
        improved = False
        while t >= 1.0 / 1024:
            candidate = routes.project(z + t * step)
            r = _residual(game, routes, candidate, eta)
            if r < residual:
                z, residual, improved = candidate, r, True
                break
            t *= 0.5
        if not improved:
            break
    return z, residual, k


def _picard(game, routes, eta, z, options: SolverOptions, switch: float, budget: int):
    """Damped Picard until residual < switch or `patience` iterations without a new best"""
    alpha = options.damping
    best, best_res = z, math.inf
    stall = 0
    it = 0
    for it in range(1, budget + 1):
        Gz = _logit(game, routes, z, eta)
        res = l1(Gz - z)
        if res < PROGRESS * best_res:
            best, best_res, stall = z, res, 0
        elif res < best_res:
            best, best_res = z, res
            stall += 1
        else:
            stall += 1
        if res < switch or stall >= options.patience:
            break
        z = routes.project((1.0 - alpha) * z + alpha * Gz)
    return best, best_res, it


def solve_fixed_point(
    game: Game,
    routes: RouteSet,
    eta: float,
    z0: np.ndarray,
    options: Optional[SolverOptions] = None,
) -> Tuple[np.ndarray, float, int]:
    """
    Solve G(z, eta) = z without classifying the result

    Returns:
        (z, residual, iterations)

    Raises:
        NoConvergenceError: residual above accept_tol when the budget runs out
    """
    options = options or SolverOptions()
    eta = check_eta(eta)
    z = routes.check_admissible(z0, name="z0")
    used = 0
    residual = _residual(game, routes, z, eta)

    if options.strategy in ("newton-first", "newton"):
        try:
            zn, rn, it = newton_polish(game, routes, eta, z, options.tol, options.newton_max_iter)
            used += it
            if rn <= options.accept_tol:
                return _accept(zn, rn, used, options, eta)
        except SingularSystemError as e:
            logger.debug(format_error_message(e))
        if options.strategy == "newton":
            record_solve("failed")
            raise NoConvergenceError(f"Newton did not converge at eta={eta:g}", residual=residual, iterations=used, eta=eta)

    z, residual, it = _picard(game, routes, eta, z, options, options.newton_switch, options.max_iter)
    used += it
    try:
        zn, rn, it = newton_polish(game, routes, eta, z, options.tol, options.newton_max_iter)
        used += it
        if rn < residual:
            z, residual = zn, rn
    except SingularSystemError as e:
        logger.debug(f"{format_error_message(e)}; continuing with Picard")
    if residual > options.tol and used < options.max_iter:
        zp, rp, it = _picard(game, routes, eta, z, options, options.tol, options.max_iter - used)
        used += it
        if rp < residual:
            z, residual = zp, rp
    if residual <= options.accept_tol:
        return _accept(z, residual, used, options, eta)
    record_solve("failed")
    raise NoConvergenceError(
        f"Fixed-point solve stopped at residual {residual:.3e} after {used} iterations (eta={eta:g})",
        residual=residual,
        iterations=used,
        eta=eta,
    )


def _accept(z, residual, iterations, options: SolverOptions, eta):
    if residual <= options.tol:
        record_solve("converged")
    else:
        record_solve("accepted")
        logger.debug(f"Accepted fixed point at eta={eta:g} with residual {residual:.3e} > {options.tol:g}")
    return z, residual, iterations


def make_record(game: Game, routes: RouteSet, eta: float, z: np.ndarray, residual: float, iterations: int = 0) -> FixedPointRecord:
    """Classify a solved fixed point and attach its Wardrop gap"""
    report = classify(game, routes, z, eta, residual_tol=None)
    wardrop = check_wardrop(game, routes, z)
    return FixedPointRecord(
        z=z,
        eta=float(eta),
        residual=float(residual),
        stability=report.classification,
        eigenvalues=report.full_spectrum,
        tangent_eigenvalues=report.eigenvalues,
        wardrop_gap=wardrop.gap,
        weighted_gap=wardrop.weighted_gap,
        iterations=iterations,
    )


def find_fixed_point(
    game: Game,
    routes: RouteSet,
    eta: float,
    z0: np.ndarray,
    options: Optional[SolverOptions] = None,
) -> FixedPointRecord:
    """
    Damped Picard iteration followed by tangent-space Newton polish

    Picard hands over to Newton once its residual drops below newton_switch
    or stops improving for `patience` iterations. A singular Newton system
    falls back to the Picard iterate.

    Raises:
        NoConvergenceError: residual above accept_tol at the iteration cap
    """
    z, residual, iterations = solve_fixed_point(game, routes, eta, z0, options)
    return make_record(game, routes, eta, z, residual, iterations)


def handoff_seed(
    game: Game,
    routes: RouteSet,
    eta: float,
    options: Optional[SolverOptions] = None,
    eta_start: float = HANDOFF_ETA,
) -> Optional[np.ndarray]:
    """
    Follow the large-noise fixed point down to eta with Newton steps

    Starts from the unique fixed point at eta_start and walks a geometric
    ladder, so it stays on the symmetric branch even after it loses stability.
    Returns None when a rung fails.
    """
    options = options or SolverOptions()
    if eta >= eta_start:
        return None
    newton = options.model_copy(update={"strategy": "newton"})
    try:
        z, _, _ = solve_fixed_point(game, routes, eta_start, routes.uniform(), options)
        rungs = int(math.ceil(math.log10(eta_start / eta) * HANDOFF_STEPS_PER_DECADE))
        for level in np.geomspace(eta_start, eta, rungs + 1)[1:]:
            z, _, _ = solve_fixed_point(game, routes, float(level), z, newton)
    except HetrouteError as e:
        logger.debug(f"Hand-off seed abandoned: {format_error_message(e)}")
        return None
    return z


@dataclass
class FixedPointSearch:
    """Merged multi-start result plus the starts that failed"""

    eta: float
    records: List[FixedPointRecord]
    starts: int
    failures: int = 0
    failure_messages: List[str] = field(default_factory=list)


def _solve_task(task) -> Tuple[Optional[Tuple[np.ndarray, float, int]], Optional[str]]:
    """(solution, None) or (None, formatted error) for one start"""
    game, routes, eta, z0, options = task
    try:
        return solve_fixed_point(game, routes, eta, z0, options), None
    except HetrouteError as e:
        message = format_error_message(e)
        logger.debug(f"Start failed: {message}")
        return None, message


def merge_fixed_points(points: List[Tuple[np.ndarray, float, int]], radius: float = MERGE_RADIUS) -> List[Tuple[np.ndarray, float, int]]:
    """Merge solutions within l1 `radius`, keeping the smaller residual, sorted lexicographically"""
    merged: List[Tuple[np.ndarray, float, int]] = []
    for z, res, it in points:
        for k, (zm, rm, _) in enumerate(merged):
            if l1(z - zm) <= radius:
                if res < rm:
                    merged[k] = (z, res, it)
                break
        else:
            merged.append((z, res, it))
    merged.sort(key=lambda item: tuple(np.round(item[0], 9)))
    return merged


def search_fixed_points(
    game: Game,
    routes: RouteSet,
    eta: float,
    n_starts: int = 64,
    seed: int = 0,
    options: Optional[SolverOptions] = None,
    jobs: int = 1,
    include_vertices: bool = True,
    handoff: bool = True,
) -> FixedPointSearch:
    """
    Multi-start exploration of the fixed-point set at eta

    Starts are the vertex profiles (capped at 1024), the barycenter, n_starts
    Dirichlet points and the Newton hand-off seed. Picard-Newton runs from
    every start; pure Newton also runs from the interior starts, which is what
    lands on saddles.
    """
    eta = check_eta(eta)
    if n_starts < 1:
        raise ValidationError("n_starts must be >= 1", invariant="starts-positive", field="n_starts", value=n_starts)
    options = options or SolverOptions()
    picard = options.model_copy(update={"strategy": "picard-newton"})
    newton = options.model_copy(update={"strategy": "newton"})

    starts: List[np.ndarray] = []
    if include_vertices:
        if routes.vertex_count > VERTEX_CAP:
            logger.warning(f"Vertex starts truncated to {VERTEX_CAP} of {routes.vertex_count}")
        starts.extend(routes.iter_vertices(cap=VERTEX_CAP))
    interior = [routes.uniform()]
    interior.extend(dirichlet_flows(np.random.default_rng(seed), routes.sizes, routes.throughputs, n_starts))

    tasks = [(game, routes, eta, z0, picard) for z0 in starts + interior]
    tasks += [(game, routes, eta, z0, newton) for z0 in interior]
    if handoff:
        z = handoff_seed(game, routes, eta, options)
        if z is not None:
            tasks.append((game, routes, eta, z, newton))

    results = parallel_map(_solve_task, tasks, jobs)
    solved = [r for r, _ in results if r is not None]
    messages = [m for _, m in results if m is not None]
    merged = merge_fixed_points(solved)
    records = [make_record(game, routes, eta, z, res, it) for z, res, it in merged]
    failures = len(results) - len(solved)
    if failures:
        logger.warning(f"{failures} of {len(results)} starts did not converge at eta={eta:g}")
    logger.info(f"eta={eta:g}: {len(records)} fixed point(s) from {len(results)} solves")
    return FixedPointSearch(eta=eta, records=records, starts=len(results), failures=failures, failure_messages=messages)


def find_all_fixed_points(
    game: Game,
    routes: RouteSet,
    eta: float,
    n_starts: int = 64,
    seed: int = 0,
    options: Optional[SolverOptions] = None,
    jobs: int = 1,
) -> List[FixedPointRecord]:
    """Deduplicated fixed points of logit(eta) from multi-start solves, sorted"""
    return search_fixed_points(game, routes, eta, n_starts, seed, options, jobs).records
