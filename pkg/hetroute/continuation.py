"""
Fixed-point branches of logit(eta) over a decreasing noise grid

Branches are followed by a first-order predictor along dz/deta and a Newton
corrector. Newborn branches come from per-grid-point multi-start detection
and from symmetric kicks along the critical eigenvector where a branch turns
unstable.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from hetroute.config import ContinuationOptions, SolverOptions
from hetroute.equilibria import (
    FixedPointRecord,
    WardropReport,
    check_wardrop,
    find_all_fixed_points,
    make_record,
    search_fixed_points,
    solve_fixed_point,
)
from hetroute.exceptions import HetrouteError, ValidationError, format_error_message
from hetroute.game import Game, RouteSet
from hetroute.stability import STABLE, UNSTABLE, critical_direction, jacobian_eta, jacobian_z, tangent_matrix
from hetroute.utils import l1

logger = logging.getLogger(__name__)

PREDICTOR_MAX_CONDITION = 1e10

BRANCH_BIRTH = "branch-birth"
STABILITY_CHANGE = "stability-change"
FOLD_SUSPECT = "fold-suspect"


@dataclass
class Branch:
    """Fixed points along a strictly decreasing eta sequence"""

    id: int
    origin: str
    points: List[FixedPointRecord] = field(default_factory=list)
    parent: Optional[int] = None
    terminated: Optional[str] = None

    @property
    def alive(self) -> bool:
        return self.terminated is None

    @property
    def last(self) -> FixedPointRecord:
        return self.points[-1]

    @property
    def etas(self) -> List[float]:
        return [p.eta for p in self.points]

    def at(self, eta: float) -> Optional[FixedPointRecord]:
        for p in self.points:
            if p.eta == eta:
                return p
        return None

    def to_dict(self, routes: RouteSet) -> dict:
        return {
            "id": self.id,
            "origin": self.origin,
            "parent": self.parent,
            "terminated": self.terminated,
            "eta_start": self.points[0].eta,
            "eta_end": self.points[-1].eta,
            "points": len(self.points),
            "stability": [p.stability for p in self.points],
            "terminal": self.last.to_dict(routes),
        }


@dataclass
class BifurcationEvent:
    """Bracket [eta_lo, eta_hi] where branch count or stability changes"""

    eta_lo: float
    eta_hi: float
    type: str
    branches: List[int]
    label: Optional[str] = None
    refined: bool = False

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.eta_lo + self.eta_hi)

    def contains(self, eta: float) -> bool:
        return self.eta_lo <= eta <= self.eta_hi

    def to_dict(self) -> dict:
        return {
            "eta_lo": self.eta_lo,
            "eta_hi": self.eta_hi,
            "type": self.type,
            "label": self.label,
            "branches": self.branches,
            "refined": self.refined,
        }


def check_grid(eta_grid: Sequence[float], floor: Optional[float] = None) -> List[float]:
    """Validate a strictly decreasing positive grid"""
    grid = [float(x) for x in eta_grid]
    if len(grid) < 1:
        raise ValidationError("Empty eta grid", invariant="grid-non-empty", field="eta_grid")
    if any(not math.isfinite(x) or x <= 0 for x in grid):
        raise ValidationError("Grid values must be positive and finite", invariant="eta-positive", field="eta_grid")
    if any(b >= a for a, b in zip(grid, grid[1:])):
        raise ValidationError("Grid must be strictly decreasing", invariant="grid-decreasing", field="eta_grid")
    if floor is not None and grid[-1] < floor:
        logger.warning(f"Grid reaches eta={grid[-1]:g}, below the reliable floor {floor:g}")
    return grid


def predict(game: Game, routes: RouteSet, z: np.ndarray, eta: float, eta_next: float) -> Tuple[np.ndarray, bool]:
    """
    First-order predictor z - (eta_next - eta) * J_g^{-1} dG/deta

    Falls back to z itself when the tangent system is singular or its
    condition number exceeds 1e10.

    Returns:
        (prediction, used first-order step)
    """
    M = tangent_matrix(routes, jacobian_z(game, routes, z, eta) - np.eye(routes.dimension))
    if M.size == 0:
        return z.copy(), False
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > PREDICTOR_MAX_CONDITION:
        logger.warning(f"Predictor fallback at eta={eta:g}: condition number {cond:.3g}")
        return z.copy(), False
    try:
        u = np.linalg.solve(M, routes.tangent_coords @ jacobian_eta(game, routes, z, eta))
    except np.linalg.LinAlgError:
        logger.warning(f"Predictor fallback at eta={eta:g}: singular system")
        return z.copy(), False
    return routes.project(z - (eta_next - eta) * (routes.tangent_basis @ u)), True


def _correct(game, routes, eta, z0, solver: SolverOptions) -> FixedPointRecord:
    z, res, it = solve_fixed_point(game, routes, eta, z0, solver.model_copy(update={"strategy": "newton-first"}))
    return make_record(game, routes, eta, z, res, it)


def _matches(z: np.ndarray, branches: List[Branch], eta: float, radius: float) -> Optional[int]:
    for b in branches:
        rec = b.at(eta)
        if rec is not None and l1(rec.z - z) <= radius:
            return b.id
    return None


def sweep(
    game: Game,
    routes: RouteSet,
    eta_grid: Sequence[float],
    seeds: Optional[Sequence[np.ndarray]] = None,
    options: Optional[ContinuationOptions] = None,
    solver: Optional[SolverOptions] = None,
    jobs: int = 1,
) -> List[Branch]:
    """
    Follow every fixed-point branch from eta_grid[0] down to eta_grid[-1]

    Args:
        eta_grid: Strictly decreasing noise levels
        seeds: Start flows at eta_grid[0]; default is every fixed point found
            there by multi-start
        options: Continuation options
        solver: Fixed-point solver options

    Returns:
        Branches ordered by id; terminated ones carry the reason
    """
    options = options or ContinuationOptions()
    solver = solver or SolverOptions()
    grid = check_grid(eta_grid, options.eta_floor)
    cap = options.jump_cap_fraction * float(routes.throughputs.sum())
    radius = options.match_radius

    branches: List[Branch] = []
    eta0 = grid[0]
    if seeds is None:
        seed_records = find_all_fixed_points(game, routes, eta0, max(1, options.n_starts), options.seed, solver, jobs)
    else:
        seed_records = []
        for z0 in seeds:
            z, res, it = solve_fixed_point(game, routes, eta0, z0, solver)
            if _matches(z, [Branch(-1, "", [r]) for r in seed_records], eta0, radius) is None:
                seed_records.append(make_record(game, routes, eta0, z, res, it))
    for k, rec in enumerate(seed_records):
        branches.append(Branch(id=len(branches), origin=f"seed:{k}", points=[rec]))
    logger.info(f"Sweep starts at eta={eta0:g} with {len(branches)} branch(es)")

    for eta_prev, eta in zip(grid, grid[1:]):
        for b in branches:
            if not b.alive:
                continue
            prev = b.last
            try:
                z_pred, _ = predict(game, routes, prev.z, eta_prev, eta)
                rec = _correct(game, routes, eta, z_pred, solver)
            except HetrouteError as e:
                b.terminated = f"corrector failed at eta={eta:.6g}: {e.message}"
                logger.info(f"Branch {b.id} terminated: {b.terminated}")
                continue
            jump = l1(rec.z - prev.z)
            if jump > cap:
                b.terminated = f"jump {jump:.3g} > cap {cap:.3g} at eta={eta:.6g}"
                logger.info(f"Branch {b.id} terminated: {b.terminated}")
                continue
            owner = _matches(rec.z, [o for o in branches if o.alive and o.id != b.id], eta, radius)
            if owner is not None:
                b.terminated = f"merged into branch {owner} at eta={eta:.6g}"
                logger.info(f"Branch {b.id} terminated: {b.terminated}")
                continue
            b.points.append(rec)

        for b in list(branches):
            if not b.alive or len(b.points) < 2 or b.last.eta != eta:
                continue
            if b.points[-2].stability == STABLE and b.last.stability == UNSTABLE:
                _spawn_pitchfork(game, routes, b, branches, eta, options, solver)

        if options.detect_newborn:
            found = search_fixed_points(
                game, routes, eta, max(1, options.n_starts), options.seed, solver, jobs, handoff=False
            ).records
            for rec in found:
                if _matches(rec.z, [o for o in branches if o.alive], eta, radius) is None:
                    branches.append(Branch(id=len(branches), origin=f"newborn:{eta:.6g}", points=[rec]))
                    logger.info(f"New branch {len(branches) - 1} ({rec.stability}) detected at eta={eta:g}")

    alive = sum(1 for b in branches if b.alive)
    logger.info(f"Sweep finished at eta={grid[-1]:g}: {len(branches)} branch(es), {alive} alive")
    return branches


def _spawn_pitchfork(game, routes, parent: Branch, branches: List[Branch], eta, options, solver) -> None:
    z = parent.last.z
    try:
        direction = critical_direction(game, routes, z, eta)
    except HetrouteError as e:
        logger.debug(format_error_message(e))
        return
    kick = options.pitchfork_delta * float(routes.throughputs.sum())
    picard = solver.model_copy(update={"strategy": "picard-newton"})
    for sign in (1.0, -1.0):
        start = routes.project(z + sign * kick * direction)
        try:
            zc, res, it = solve_fixed_point(game, routes, eta, start, picard)
        except HetrouteError as e:
            logger.debug(f"Pitchfork kick failed: {format_error_message(e)}")
            continue
        if _matches(zc, [o for o in branches if o.alive], eta, options.match_radius) is None:
            rec = make_record(game, routes, eta, zc, res, it)
            branches.append(Branch(id=len(branches), origin=f"pitchfork:{parent.id}", points=[rec], parent=parent.id))
            logger.info(f"Branch {len(branches) - 1} spawned from branch {parent.id} at eta={eta:g}")


def _common_grid(branches: Sequence[Branch]) -> List[float]:
    return sorted({p.eta for b in branches for p in b.points}, reverse=True)


def _raw_events(branches: Sequence[Branch]) -> List[BifurcationEvent]:
    grid = _common_grid(branches)
    events: List[BifurcationEvent] = []
    for hi, lo in zip(grid, grid[1:]):
        born = [b.id for b in branches if b.points[0].eta == lo]
        ended = [b.id for b in branches if b.last.eta == hi and b.terminated is not None]
        if born:
            events.append(BifurcationEvent(lo, hi, BRANCH_BIRTH, born))
        if ended:
            events.append(BifurcationEvent(lo, hi, FOLD_SUSPECT, ended))
        for b in branches:
            a, c = b.at(hi), b.at(lo)
            if a is None or c is None:
                continue
            crossing = (a.tangent_eigenvalues.real.max(initial=-1.0) > 0) != (c.tangent_eigenvalues.real.max(initial=-1.0) > 0)
            if a.stability != c.stability or crossing:
                events.append(BifurcationEvent(lo, hi, STABILITY_CHANGE, [b.id]))
    return events


def _merge(events: List[BifurcationEvent]) -> List[BifurcationEvent]:
    merged: List[BifurcationEvent] = []
    births: List[int] = []
    for ev in sorted(events, key=lambda e: -e.eta_hi):
        if merged and ev.eta_hi >= merged[-1].eta_lo:
            last = merged[-1]
            last.eta_lo = min(last.eta_lo, ev.eta_lo)
            last.branches = sorted(set(last.branches) | set(ev.branches))
            if ev.type == STABILITY_CHANGE or last.type == STABILITY_CHANGE:
                last.type = STABILITY_CHANGE
            elif ev.type == BRANCH_BIRTH:
                last.type = BRANCH_BIRTH
            births[-1] += len(ev.branches) if ev.type == BRANCH_BIRTH else 0
        else:
            merged.append(BifurcationEvent(ev.eta_lo, ev.eta_hi, ev.type, list(ev.branches)))
            births.append(len(ev.branches) if ev.type == BRANCH_BIRTH else 0)
    for ev, n_born in zip(merged, births):
        if ev.type == STABILITY_CHANGE and n_born >= 2:
            ev.label = "pitchfork"
    return merged


def detect_bifurcations(
    branches: Sequence[Branch],
    game: Optional[Game] = None,
    routes: Optional[RouteSet] = None,
    width: float = 1e-3,
    solver: Optional[SolverOptions] = None,
    n_starts: int = 16,
    seed: int = 0,
) -> List[BifurcationEvent]:
    """
    Bracket changes in live-branch count, stability class or eigenvalue sign

    Overlapping brackets are merged into one event. With game and routes the
    brackets are bisected down to `width`: stability changes by re-solving the
    changing branch, pure births by multi-start counts.
    """
    if not branches:
        return []
    events = _merge(_raw_events(branches))
    if game is not None and routes is not None:
        solver = solver or SolverOptions()
        by_id = {b.id: b for b in branches}
        for ev in events:
            _refine(game, routes, ev, by_id, width, solver, n_starts, seed)
    logger.info(f"Detected {len(events)} bifurcation event(s)")
    return events


def _refine(game, routes, ev: BifurcationEvent, by_id, width, solver, n_starts, seed) -> None:
    newton = solver.model_copy(update={"strategy": "newton-first"})
    if ev.type == STABILITY_CHANGE:
        tracked = None
        for bid in ev.branches:
            above = [p for p in by_id[bid].points if p.eta >= ev.eta_hi]
            below = [p for p in by_id[bid].points if p.eta <= ev.eta_lo]
            if above and below and above[-1].stability != below[0].stability:
                tracked = above[-1]
                break
        if tracked is None:
            return
        lo, hi = ev.eta_lo, ev.eta_hi
        z_ref = tracked.z
        side = tracked.stability
        try:
            while hi - lo > width:
                mid = math.sqrt(lo * hi)
                z, res, _ = solve_fixed_point(game, routes, mid, z_ref, newton)
                rec = make_record(game, routes, mid, z, res)
                if rec.stability == side:
                    hi, z_ref = mid, z
                else:
                    lo = mid
        except HetrouteError as e:
            logger.debug(f"Bracket refinement stopped: {format_error_message(e)}")
        ev.eta_lo, ev.eta_hi, ev.refined = lo, hi, True
    elif ev.type == BRANCH_BIRTH:
        lo, hi = ev.eta_lo, ev.eta_hi

        def count(eta: float) -> int:
            return len(search_fixed_points(game, routes, eta, max(1, n_starts), seed, solver, handoff=False).records)

        hi_count = count(hi)
        while hi - lo > width:
            mid = math.sqrt(lo * hi)
            if count(mid) == hi_count:
                hi = mid
            else:
                lo = mid
        ev.eta_lo, ev.eta_hi, ev.refined = lo, hi, True


@dataclass
class LimitEquilibrium:
    """Terminal point of a surviving branch, the numerical stand-in for a limit equilibrium"""

    z: np.ndarray
    eta: float
    branch: int
    stability: str
    wardrop_gap: float
    weighted_gap: float
    resolved: bool
    report: Optional[WardropReport] = None

    def to_dict(self, routes: RouteSet) -> dict:
        return {
            "branch": self.branch,
            "eta": self.eta,
            "stability": self.stability,
            "wardrop_gap": self.wardrop_gap,
            "weighted_wardrop_gap": self.weighted_gap,
            "resolved": self.resolved,
            "z": {pid: [float(x) for x in block] for pid, block in zip(routes.population_ids, routes.split(self.z))},
        }


def limit_equilibria(
    branches: Sequence[Branch],
    eta_min: float = 0.005,
    tol: float = 0.05,
    game: Optional[Game] = None,
    routes: Optional[RouteSet] = None,
) -> List[LimitEquilibrium]:
    """
    Terminal flows of the branches that survived to the end of the sweep

    A branch is unresolved, not dropped, when its share-weighted Wardrop gap
    exceeds tol. Sweeps that stop above eta_min are reported with a warning.
    """
    alive = [b for b in branches if b.alive]
    if not alive:
        return []
    final_eta = min(b.last.eta for b in alive)
    if final_eta > eta_min * (1 + 1e-9):
        logger.warning(f"Branches end at eta={final_eta:g}, above eta_min={eta_min:g}")
    out = []
    for b in alive:
        rec = b.last
        if rec.eta != final_eta:
            continue
        report = check_wardrop(game, routes, rec.z) if game is not None and routes is not None else None
        gap = report.gap if report else rec.wardrop_gap
        weighted = report.weighted_gap if report else rec.weighted_gap
        out.append(
            LimitEquilibrium(
                z=rec.z,
                eta=rec.eta,
                branch=b.id,
                stability=rec.stability,
                wardrop_gap=gap,
                weighted_gap=weighted,
                resolved=weighted <= tol,
                report=report,
            )
        )
    unresolved = sum(1 for e in out if not e.resolved)
    logger.info(f"{len(out)} limit equilibria, {unresolved} unresolved")
    return out


@dataclass
class DiagramRow:
    eta: float
    branch: int
    stability: str
    coord_name: str
    value: float


def coordinate_function(routes: RouteSet, coordinate: str):
    """
    Parse a selector: 'f:<link id>' for link flow, 'z:<population id>:<route index>' for route flow

    Raises:
        ValidationError: unknown link, population or route
    """
    parts = coordinate.split(":")
    if len(parts) == 2 and parts[0] == "f":
        if parts[1] not in routes.link_ids:
            raise ValidationError(f"Unknown link {parts[1]!r}", invariant="coordinate", field="coordinate", value=coordinate)
        e = routes.link_ids.index(parts[1])
        row = routes.incidence[e]
        return lambda z: float(row @ z)
    if len(parts) == 3 and parts[0] == "z":
        if parts[1] not in routes.population_ids:
            raise ValidationError(f"Unknown population {parts[1]!r}", invariant="coordinate", field="coordinate", value=coordinate)
        p = routes.population_ids.index(parts[1])
        try:
            r = int(parts[2])
        except ValueError:
            r = -1
        if not 0 <= r < int(routes.sizes[p]):
            raise ValidationError(f"Unknown route {parts[2]!r}", invariant="coordinate", field="coordinate", value=coordinate)
        index = int(routes.offsets[p]) + r
        return lambda z: float(z[index])
    raise ValidationError(
        f"Unknown coordinate {coordinate!r}; use f:<link> or z:<population>:<route>",
        invariant="coordinate",
        field="coordinate",
        value=coordinate,
    )


def bifurcation_diagram(branches: Sequence[Branch], routes: RouteSet, coordinate: str) -> List[DiagramRow]:
    """Long table (eta, branch, stability, coordinate, value), eta descending then branch id"""
    value_of = coordinate_function(routes, coordinate)
    rows = [
        DiagramRow(eta=p.eta, branch=b.id, stability=p.stability, coord_name=coordinate, value=value_of(p.z))
        for b in branches
        for p in b.points
    ]
    rows.sort(key=lambda r: (-r.eta, r.branch))
    return rows
