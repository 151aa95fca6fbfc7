"""
Finite-population noisy best response, simulated exactly

Every agent carries a unit-rate Poisson clock. When it rings the agent redraws
its route from the logit distribution at the current empirical flow. The
mean-field limit of this chain is logit(eta).
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from hetroute.dynamics import Trajectory, check_eta
from hetroute.exceptions import ValidationError
from hetroute.game import Game, RouteSet
from hetroute.monitoring import record_agent_events
from hetroute.utils import largest_remainder

logger = logging.getLogger(__name__)

DEFAULT_SAMPLE_STEP = 0.01


def initial_counts(routes: RouteSet, z0: np.ndarray, n_agents: np.ndarray) -> np.ndarray:
    """Largest-remainder rounding of z0 into integer route counts per population"""
    counts = np.zeros(routes.dimension, dtype=np.int64)
    for p, block in enumerate(routes.split(z0)):
        counts[routes.block(p)] = largest_remainder(block, int(n_agents[p]))
    return counts


def simulate_agents(
    game: Game,
    routes: RouteSet,
    eta: float,
    n_agents: Union[int, Sequence[int]],
    z0: np.ndarray,
    horizon: float,
    seed: int = 0,
    times: Optional[np.ndarray] = None,
    sample_step: float = DEFAULT_SAMPLE_STEP,
) -> Trajectory:
    """
    Gillespie simulation of the agent chain, sampled on a time grid

    Args:
        n_agents: Agents per population, one value for all or one per population
        z0: Admissible start, rounded to counts
        horizon: Final time
        seed: Seed for numpy's default generator; same seed, same trajectory
        times: Output grid in [0, horizon]; default step sample_step

    Returns:
        Trajectory with method "agents" and seed, N and event count in metadata
    """
    eta = check_eta(eta)
    z0 = routes.check_admissible(z0, name="z0")
    N = np.broadcast_to(np.asarray(n_agents, dtype=np.int64), (routes.n_populations,)).copy()
    if np.any(N < 1):
        raise ValidationError("Need at least one agent per population", invariant="agents-positive", field="n_agents", value=N.tolist())
    if times is None:
        steps = int(round(horizon / sample_step))
        times = np.array([k * sample_step for k in range(steps + 1)])
    times = np.asarray(times, dtype=float)
    if times.size == 0 or np.any(np.diff(times) <= 0) or times[0] < 0:
        raise ValidationError("Sample times must be non-empty and strictly increasing", invariant="time-grid", field="times")

    rng = np.random.default_rng(seed)
    counts = initial_counts(routes, z0, N)
    unit = routes.throughputs / N
    z = counts * unit[routes.pop_of]
    f = routes.incidence @ z
    cumulative_agents = np.cumsum(N)
    total_agents = int(N.sum())
    total_rate = float(total_agents)

    states = np.empty((times.size, routes.dimension))
    t = 0.0
    idx = 0
    events = 0
    while True:
        t_next = t + rng.exponential(1.0 / total_rate)
        while idx < times.size and times[idx] < t_next:
            states[idx] = z
            idx += 1
        if idx == times.size:
            break
        t = t_next

        p = int(np.searchsorted(cumulative_agents, rng.integers(total_agents), side="right"))
        blk = routes.block(p)
        old = blk.start + int(np.searchsorted(np.cumsum(counts[blk]), rng.integers(N[p]), side="right"))

        costs = routes.incidence_matrix(p).T @ game.delay_matrix(f)[p]
        weights = np.exp(-(costs - costs.min()) / eta)
        cumulative = np.cumsum(weights)
        new = blk.start + int(np.searchsorted(cumulative, rng.uniform(0.0, cumulative[-1]), side="right"))
        new = min(new, blk.stop - 1)

        events += 1
        if new == old:
            continue
        counts[old] -= 1
        counts[new] += 1
        z[old] = counts[old] * unit[p]
        z[new] = counts[new] * unit[p]
        f += unit[p] * (routes.incidence[:, new] - routes.incidence[:, old])

    record_agent_events(events)
    logger.debug(f"Agent simulation: {events} revisions over t={times[-1]:g}, seed={seed}")
    return Trajectory(
        routes=routes,
        times=times,
        states=states,
        eta=eta,
        method="agents",
        step=None,
        converged=False,
        final_residual=None,
        metadata={"seed": seed, "N": [int(n) for n in N], "events": events},
    )


@dataclass
class ComparisonReport:
    """l1 distance between empirical and ODE flows on a common grid"""

    sup_distance: float
    times: np.ndarray
    distances: np.ndarray

    def to_dict(self) -> dict:
        k = int(np.argmax(self.distances))
        return {
            "sup_distance": self.sup_distance,
            "t_at_sup": float(self.times[k]),
            "points": int(self.times.size),
        }


def compare_to_ode(empirical: Trajectory, ode: Trajectory) -> ComparisonReport:
    """
    Sup over the grid of ||z_emp(t) - z_ode(t)||_1

    Raises:
        ValidationError: the two trajectories are not on the same grid
    """
    if empirical.times.shape != ode.times.shape or not np.allclose(empirical.times, ode.times, rtol=0.0, atol=1e-9):
        raise ValidationError("Trajectories are on different time grids", invariant="common-grid", field="times")
    if empirical.states.shape != ode.states.shape:
        raise ValidationError("Trajectories have different dimensions", invariant="dimension", field="states")
    distances = np.abs(empirical.states - ode.states).sum(axis=1)
    sup = float(distances.max()) if distances.size else 0.0
    return ComparisonReport(sup_distance=sup, times=empirical.times.copy(), distances=distances)
