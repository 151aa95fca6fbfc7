"""
Logit choice map, logit(eta) vector field and trajectory integration
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, List, Optional, Tuple

import numpy as np

from hetroute.config import IntegratorOptions
from hetroute.exceptions import ErrorCodes, NumericalError, ValidationError
from hetroute.game import Game, RouteSet, route_cost_vector
from hetroute.monitoring import record_integration_steps

logger = logging.getLogger(__name__)


def check_eta(eta: float) -> float:
    """Noise level must be positive and finite"""
    eta = float(eta)
    if not math.isfinite(eta) or eta <= 0:
        raise ValidationError(f"Noise level must be positive and finite, got {eta!r}", invariant="eta-positive", field="eta", value=eta)
    return eta


def softmax_blocks(costs: np.ndarray, eta: float, throughputs: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """
    Per-block v_p * softmax(-costs / eta)

    Each block is shifted by its own minimum before exponentiating, so the
    largest weight is exactly 1 and nothing overflows for tiny eta.

    Args:
        costs: Flat cost vector
        eta: Noise level
        throughputs: v_p per block
        offsets: Start index of each block
    """
    sizes = np.diff(np.append(offsets, costs.shape[0]))
    mins = np.minimum.reduceat(costs, offsets)
    weights = np.exp(-(costs - np.repeat(mins, sizes)) / eta)
    totals = np.add.reduceat(weights, offsets)
    return weights * np.repeat(throughputs / totals, sizes)


def _logit(game: Game, routes: RouteSet, z: np.ndarray, eta: float) -> np.ndarray:
    costs = route_cost_vector(game, routes, z)
    if not np.all(np.isfinite(costs)):
        raise NumericalError("Non-finite route cost", operation="logit_map", error_code=ErrorCodes.NON_FINITE)
    return softmax_blocks(costs, eta, routes.throughputs, routes.offsets)


def logit_map(game: Game, routes: RouteSet, z: np.ndarray, eta: float) -> np.ndarray:
    """
    G(z, eta): logit best response to the costs at z

    Each population's output sums to v_p. Components are positive unless
    exp(-gap/eta) underflows.

    Raises:
        ValidationError: bad z or eta
        NumericalError: non-finite cost
    """
    eta = check_eta(eta)
    z = routes.check_admissible(z)
    return _logit(game, routes, z, eta)


def logit_rhs(game: Game, routes: RouteSet, z: np.ndarray, eta: float) -> np.ndarray:
    """Velocity of logit(eta): G(z, eta) - z"""
    eta = check_eta(eta)
    z = routes.check_admissible(z)
    return _logit(game, routes, z, eta) - z


def rk4_step(rhs: Callable[[float, np.ndarray], np.ndarray], t: float, y: np.ndarray, h: float) -> np.ndarray:
    """Classic 4th order Runge-Kutta step"""
    k1 = rhs(t, y)
    k2 = rhs(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = rhs(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = rhs(t + h, y + h * k3)
    return y + h * (k1 / 6.0 + k2 / 3.0 + k3 / 3.0 + k4 / 6.0)


@dataclass
class Trajectory:
    """
    Time-stamped route flows from ODE integration or agent simulation

    states has shape (len(times), routes.dimension).
    """

    routes: RouteSet
    times: np.ndarray
    states: np.ndarray
    eta: float
    method: str
    step: Optional[float] = None
    converged: bool = False
    final_residual: Optional[float] = None
    metadata: dict = field(default_factory=dict)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def __len__(self) -> int:
        return len(self.times)

    def aggregate(self) -> Optional[np.ndarray]:
        """w(t) = sum_p z^p(t) when all populations share a route set"""
        if not self.routes.shares_route_set:
            return None
        return self.states.reshape(len(self.times), self.routes.n_populations, -1).sum(axis=1)

    def rows(self) -> Iterator[Tuple[float, str, int, float]]:
        """Long format (t, population id, route index, flow)"""
        labels = self.routes.labels()
        for t, state in zip(self.times, self.states):
            for (pid, r), x in zip(labels, state):
                yield float(t), pid, r, float(x)

    def summary(self) -> dict:
        return {
            "eta": self.eta,
            "method": self.method,
            "step": self.step,
            "points": len(self.times),
            "t_final": float(self.times[-1]),
            "converged": self.converged,
            "final_residual": self.final_residual,
            "final_z": {
                pid: [float(x) for x in block]
                for pid, block in zip(self.routes.population_ids, self.routes.split(self.final))
            },
            **self.metadata,
        }


def _project_step(routes: RouteSet, y: np.ndarray, drift_tol: float, t: float) -> np.ndarray:
    if not np.all(np.isfinite(y)):
        raise NumericalError(f"NaN state at t={t:.6g}", operation="integrate", error_code=ErrorCodes.NON_FINITE, t=t)
    drift = np.abs(np.add.reduceat(y, routes.offsets) - routes.throughputs)
    bound = drift_tol * np.maximum(1.0, routes.throughputs)
    if np.any(drift > bound):
        raise NumericalError(
            f"Simplex drift {float(drift.max()):.3g} exceeds {drift_tol:g} at t={t:.6g}",
            operation="integrate",
            t=t,
        )
    return routes.project(y)


def integrate(
    game: Game,
    routes: RouteSet,
    z0: np.ndarray,
    eta: float,
    horizon: float,
    options: Optional[IntegratorOptions] = None,
) -> Trajectory:
    """
    Integrate logit(eta) from z0 over [0, horizon] with RK4

    Every step is followed by clip + renormalize. With stop_on_stationary the
    run ends as soon as ||G(z) - z||_1 drops below stationarity_tol.

    Args:
        game: Game
        routes: Its route set
        z0: Admissible start
        eta: Noise level
        horizon: Final time T > 0
        options: Integrator options

    Returns:
        Trajectory

    Raises:
        NumericalError: NaN state, simplex drift or adaptive step underflow
    """
    options = options or IntegratorOptions()
    eta = check_eta(eta)
    if not math.isfinite(horizon) or horizon <= 0:
        raise ValidationError("Horizon must be positive and finite", invariant="horizon-positive", field="horizon", value=horizon)
    y = routes.check_admissible(z0, name="z0").copy()

    def rhs(_t: float, state: np.ndarray) -> np.ndarray:
        return _logit(game, routes, state, eta) - state

    times: List[float] = [0.0]
    states: List[np.ndarray] = [y.copy()]
    residual = float(np.abs(rhs(0.0, y)).sum())
    converged = residual < options.stationarity_tol
    steps = 0

    if options.method == "rk4":
        h = options.step
        n_steps = max(1, int(math.ceil(horizon / h - 1e-9)))
        k = 0
        while not (converged and options.stop_on_stationary) and k < n_steps:
            t = k * h
            t_next = min((k + 1) * h, horizon)
            y = _project_step(routes, rk4_step(rhs, t, y, t_next - t), options.drift_tol, t_next)
            k += 1
            steps += 1
            residual = float(np.abs(rhs(t_next, y)).sum())
            converged = residual < options.stationarity_tol
            if k % options.record_every == 0 or k == n_steps or (converged and options.stop_on_stationary):
                times.append(t_next)
                states.append(y.copy())
    else:
        h = options.step
        t = 0.0
        accepted = 0
        while not (converged and options.stop_on_stationary) and t < horizon:
            h = min(h, horizon - t)
            full = rk4_step(rhs, t, y, h)
            half = rk4_step(rhs, t + 0.5 * h, rk4_step(rhs, t, y, 0.5 * h), 0.5 * h)
            err = float(np.abs(half - full).sum()) / 15.0
            if err <= options.tol:
                t = t + h
                y = _project_step(routes, half, options.drift_tol, t)
                accepted += 1
                steps += 3
                residual = float(np.abs(rhs(t, y)).sum())
                converged = residual < options.stationarity_tol
                if accepted % options.record_every == 0 or t >= horizon or (converged and options.stop_on_stationary):
                    times.append(t)
                    states.append(y.copy())
            factor = 2.0 if err == 0 else min(2.0, max(0.2, 0.9 * (options.tol / err) ** 0.2))
            h = h * factor
            if h < options.min_step and t < horizon:
                raise NumericalError(
                    f"Adaptive step {h:.3g} fell below {options.min_step:g} at t={t:.6g}",
                    operation="integrate",
                    error_code=ErrorCodes.STEP_UNDERFLOW,
                    t=t,
                )

    record_integration_steps(steps)
    logger.debug(f"Integrated {steps} steps to t={times[-1]:.6g}, residual {residual:.3e}, converged={converged}")
    return Trajectory(
        routes=routes,
        times=np.array(times),
        states=np.array(states),
        eta=eta,
        method=options.method,
        step=options.step,
        converged=converged,
        final_residual=residual,
    )
