"""
Command-line entry point for hetroute
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
from pydantic import ValidationError as PydanticValidationError

from hetroute import __version__
from hetroute.config import (
    ETA_FLOOR,
    ContinuationOptions,
    IntegratorOptions,
    RunConfig,
    Settings,
    SolverOptions,
)
from hetroute.continuation import (
    bifurcation_diagram,
    coordinate_function,
    detect_bifurcations,
    limit_equilibria,
    sweep,
)
from hetroute.dynamics import integrate
from hetroute.equilibria import check_strict, check_wardrop, search_fixed_points
from hetroute.exceptions import HetrouteError, ValidationError, format_error_message
from hetroute.export import ArtifactWriter
from hetroute.game import Game, RouteSet, route_costs
from hetroute.meanfield import compare_to_ode, simulate_agents
from hetroute.monitoring import Monitoring
from hetroute.potential import (
    check_symmetry,
    lyapunov_monitor,
    perturbed_potential,
    potential_structure,
    toll_potential,
)
from hetroute.routes import enumerate_routes
from hetroute.schema import load_flow, load_game, load_toll_spec
from hetroute.stability import contraction_margin, estimate_eta_threshold
from hetroute.utils import dirichlet_flows

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3


def setup_logging(log_level: str = "INFO", log_file: Optional[str] = None) -> None:
    """
    Setup logging configuration

    Args:
        log_level: Logging level
        log_file: Optional log file, in addition to stderr
    """
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    logging.basicConfig(
        level=getattr(logging, log_level.upper()),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=handlers,
        force=True,
    )


def parse_z0(spec: str, routes: RouteSet) -> np.ndarray:
    """
    Initial condition from a specifier

    uniform | vertex:k | file:path | dirichlet:seed
    """
    kind, _, arg = spec.partition(":")
    try:
        if kind == "uniform" and not arg:
            return routes.uniform()
        if kind == "vertex":
            return routes.vertex_at(int(arg))
        if kind == "file" and arg:
            return load_flow(arg, routes)
        if kind == "dirichlet":
            rng = np.random.default_rng(int(arg))
            return dirichlet_flows(rng, routes.sizes, routes.throughputs, 1)[0]
    except ValueError:
        pass
    raise ValidationError(
        f"Bad initial condition {spec!r}; use uniform, vertex:k, file:path or dirichlet:seed",
        invariant="z0-specifier",
        field="z0",
        value=spec,
    )


def _trajectory_artifacts(writer: ArtifactWriter, name: str, trajectory, extra: Optional[Dict[str, object]] = None) -> None:
    header = ["t", "pop", "route", "flow"] + list(extra or {})
    tail = list((extra or {}).values())
    writer.add_csv(f"{name}.csv", header, (list(row) + tail for row in trajectory.rows()))
    w = trajectory.aggregate()
    if w is not None:
        rows = ((float(t), r, float(x)) for t, wt in zip(trajectory.times, w) for r, x in enumerate(wt))
        writer.add_csv(f"{name}_aggregate.csv", ["t", "route", "flow"], rows)


def cmd_routes(config: RunConfig, game: Game, routes: RouteSet, writer: ArtifactWriter) -> int:
    for p, pid in enumerate(routes.population_ids):
        for r in range(int(routes.sizes[p])):
            print(f"{pid}\t{r}\t{routes.route_name(p, r)}")
    writer.add_json("routes.json", routes.to_dict())
    return EXIT_OK


def cmd_simulate(config: RunConfig, game: Game, routes: RouteSet, writer: ArtifactWriter) -> int:
    z0 = parse_z0(config.z0, routes)
    trajectory = integrate(game, routes, z0, config.eta, config.horizon, config.integrator)
    _trajectory_artifacts(writer, "trajectory", trajectory)
    summary = trajectory.summary()
    summary["z0"] = config.z0
    writer.add_json("trajectory.json", summary)
    logger.info(f"Simulation finished: converged={trajectory.converged}, residual={trajectory.final_residual:.3e}")
    return EXIT_OK


def cmd_fixed_points(config: RunConfig, game: Game, routes: RouteSet, writer: ArtifactWriter) -> int:
    search = search_fixed_points(game, routes, config.eta, config.starts, config.seed, config.solver, config.jobs)
    writer.add_json(
        "fixed_points.json",
        {
            "eta": config.eta,
            "seed": config.seed,
            "starts": search.starts,
            "failures": search.failures,
            "failure_messages": search.failure_messages,
            "fixed_points": [r.to_dict(routes) for r in search.records],
        },
    )
    counts = {s: sum(1 for r in search.records if r.stability == s) for s in ("stable", "unstable", "marginal")}
    logger.info(f"{len(search.records)} fixed point(s) at eta={config.eta:g}: {counts}")
    return EXIT_OK


def cmd_sweep(config: RunConfig, game: Game, routes: RouteSet, writer: ArtifactWriter) -> int:
    eta_min = config.eta_min
    if eta_min < ETA_FLOOR:
        logger.warning(f"eta-min {eta_min:g} is below the floor {ETA_FLOOR:g}; clamping to {ETA_FLOOR:g}")
        eta_min = ETA_FLOOR
    if config.eta_max <= eta_min:
        raise ValidationError("eta-max must be greater than eta-min", invariant="grid-decreasing", field="eta_max")
    grid = config.model_copy(update={"eta_min": eta_min}).eta_grid()
    coordinate = config.coordinate or f"f:{routes.link_ids[0]}"
    # fail on a bad selector before the expensive part
    coordinate_function(routes, coordinate)

    options = config.continuation.model_copy(update={"seed": config.seed})
    branches = sweep(game, routes, grid, options=options, solver=config.solver, jobs=config.jobs)
    events = detect_bifurcations(branches, game, routes, width=options.refine_width, solver=config.solver, n_starts=options.n_starts, seed=options.seed)
    limits = limit_equilibria(branches, eta_min=eta_min, game=game, routes=routes)
    diagram = bifurcation_diagram(branches, routes, coordinate)

    writer.add_csv(
        "diagram.csv",
        ["eta", "branch", "stability", "coord_name", "value"],
        ((row.eta, row.branch, row.stability, row.coord_name, row.value) for row in diagram),
    )
    writer.add_json("branches.json", {"grid": grid, "branches": [b.to_dict(routes) for b in branches]})
    writer.add_json("events.json", {"events": [e.to_dict() for e in events]})
    writer.add_json("limits.json", {"eta_min": eta_min, "limits": [lim.to_dict(routes) for lim in limits]})
    return EXIT_OK


def cmd_certify(config: RunConfig, game: Game, routes: RouteSet, writer: ArtifactWriter) -> int:
    if config.threshold:
        estimate = estimate_eta_threshold(game, routes, seed=config.seed, sample_size=config.samples, jobs=config.jobs)
        writer.add_json("threshold.json", estimate.to_dict())
        return EXIT_OK
    if config.eta is None:
        raise ValidationError("certify needs --eta or --threshold", invariant="eta-required", field="eta")
    cert = contraction_margin(game, routes, config.eta, seed=config.seed, sample_size=config.samples, jobs=config.jobs)
    writer.add_json("certificate.json", cert.to_dict(routes))
    logger.info(f"Certificate at eta={config.eta:g}: c={cert.margin_c:.6g}, valid={cert.valid}")
    return EXIT_OK


def cmd_wardrop(config: RunConfig, game: Game, routes: RouteSet, writer: ArtifactWriter) -> int:
    if config.flow_path is None:
        raise ValidationError("wardrop needs --flow", invariant="flow-required", field="flow")
    z = load_flow(config.flow_path, routes)
    report = check_wardrop(game, routes, z)
    strict = check_strict(game, routes, z)
    violation = report.violation()
    out = {
        "wardrop": report.is_equilibrium,
        "strict": strict.is_strict,
        "gap": report.gap,
        "report": report.to_dict(),
        "strict_report": strict.to_dict(),
        "costs": {pid: [float(c) for c in cost] for pid, cost in zip(routes.population_ids, route_costs(game, routes, z))},
        "violation": None,
    }
    if violation is not None:
        pid, r, gap = violation
        p = routes.population_ids.index(pid)
        out["violation"] = {"population": pid, "route": r, "route_name": routes.route_name(p, r), "gap": gap}
    writer.add_json("wardrop.json", out)
    return EXIT_OK


def cmd_potential(config: RunConfig, game: Game, routes: RouteSet, writer: ArtifactWriter) -> int:
    spec = load_toll_spec(config.game_path)
    source = spec if spec is not None else game
    symmetry = check_symmetry(game, routes, seed=config.seed)
    out: Dict[str, object] = {"symmetric": symmetry.symmetric, "symmetry": symmetry.to_dict(), "toll_game": spec is not None}
    if symmetry.symmetric:
        eta = config.eta if config.eta is not None else 0.5
        z0 = parse_z0(config.z0, routes)
        options = config.integrator.model_copy(update={"stop_on_stationary": False})
        trajectory = integrate(game, routes, z0, eta, config.horizon, options)
        lyapunov = lyapunov_monitor(source, routes, trajectory, eta)
        value = toll_potential(source, routes, z0)
        structure = potential_structure(source, routes)
        toll_term = float(np.einsum("ek,ke->", routes.incidence * z0, structure.offsets[routes.pop_of]))
        out.update(
            {
                "eta": eta,
                "z0": config.z0,
                "V": value.V,
                "toll_term": toll_term,
                "beckmann_term": value.V - toll_term,
                "V_eta": perturbed_potential(source, routes, trajectory.final, eta).V_eta,
                "lyapunov": lyapunov.to_dict(),
            }
        )
        _trajectory_artifacts(writer, "potential_trajectory", trajectory)
    writer.add_json("potential.json", out)
    return EXIT_OK


def cmd_agents(config: RunConfig, game: Game, routes: RouteSet, writer: ArtifactWriter) -> int:
    z0 = parse_z0(config.z0, routes)
    ode = None
    times = None
    if config.compare:
        options = config.integrator.model_copy(update={"stop_on_stationary": False, "method": "rk4"})
        ode = integrate(game, routes, z0, config.eta, config.horizon, options)
        times = ode.times
    empirical = simulate_agents(game, routes, config.eta, config.n_agents, z0, config.horizon, seed=config.seed, times=times)
    _trajectory_artifacts(writer, "agents", empirical, {"seed": config.seed, "N": config.n_agents})
    out = {"seed": config.seed, "N": config.n_agents, "eta": config.eta, "events": empirical.metadata["events"], "comparison": None}
    if ode is not None:
        comparison = compare_to_ode(empirical, ode)
        out["comparison"] = comparison.to_dict()
        writer.add_csv("agents_distance.csv", ["t", "distance"], zip(comparison.times, comparison.distances))
        logger.info(f"Sup-distance to the ODE: {comparison.sup_distance:.4g}")
    writer.add_json("agents.json", out)
    return EXIT_OK


COMMANDS: Dict[str, Callable[[RunConfig, Game, RouteSet, ArtifactWriter], int]] = {
    "routes": cmd_routes,
    "simulate": cmd_simulate,
    "fixed-points": cmd_fixed_points,
    "sweep": cmd_sweep,
    "certify": cmd_certify,
    "wardrop": cmd_wardrop,
    "potential": cmd_potential,
    "agents": cmd_agents,
}

NEEDS_ETA = {"simulate", "fixed-points", "agents"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hetroute", description="Heterogeneous routing game analysis")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("game", type=Path, help="Game file (JSON)")
        p.add_argument("--out", type=Path, default=Path("out"), help="Output directory")
        p.add_argument("--jobs", type=int, default=None, help="Worker processes (HETROUTE_JOBS overrides)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--log-level", default=None)
        return p

    add("routes", "List the route enumeration")

    p = add("simulate", "Integrate logit(eta)")
    p.add_argument("--eta", type=float, required=True)
    p.add_argument("--t", dest="horizon", type=float, default=50.0)
    p.add_argument("--z0", default="uniform")
    p.add_argument("--step", type=float, default=0.01)
    p.add_argument("--adaptive", action="store_true", help="Step-doubling RK4")
    p.add_argument("--tol", type=float, default=1e-8, help="Local error tolerance (adaptive)")

    p = add("fixed-points", "Multi-start fixed points at one eta")
    p.add_argument("--eta", type=float, required=True)
    p.add_argument("--starts", type=int, default=64)

    p = add("sweep", "Continuation over a log-spaced eta grid")
    p.add_argument("--eta-max", type=float, default=1.0)
    p.add_argument("--eta-min", type=float, default=0.01)
    p.add_argument("--points", type=int, default=60)
    p.add_argument("--coord", default=None, help="f:<link> or z:<population>:<route>")
    p.add_argument("--starts", type=int, default=16)

    p = add("certify", "Sampled l1 contraction certificate")
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--threshold", action="store_true", help="Estimate the contraction threshold instead")
    p.add_argument("--samples", type=int, default=512)

    p = add("wardrop", "Check a flow file for Wardrop and strict equilibrium")
    p.add_argument("--flow", type=Path, required=True)

    p = add("potential", "Symmetry check and Lyapunov monitoring")
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--t", dest="horizon", type=float, default=20.0)
    p.add_argument("--z0", default="uniform")

    p = add("agents", "Finite-N agent simulation")
    p.add_argument("--eta", type=float, required=True)
    p.add_argument("--n", dest="n_agents", type=int, default=1000)
    p.add_argument("--t", dest="horizon", type=float, default=10.0)
    p.add_argument("--z0", default="uniform")
    p.add_argument("--compare", action="store_true", help="Integrate the ODE and report the sup-distance")
    return parser


def build_config(args: argparse.Namespace, settings: Settings) -> RunConfig:
    """Validate arguments into a RunConfig"""
    jobs = settings.JOBS if (settings.jobs_from_env or args.jobs is None) else args.jobs
    values = {
        "command": args.command,
        "game_path": args.game,
        "output_dir": args.out,
        "jobs": jobs,
        "seed": args.seed,
    }
    for name in ("eta", "eta_max", "eta_min", "points", "horizon", "starts", "n_agents", "z0", "threshold", "compare", "samples"):
        if getattr(args, name, None) is not None:
            values[name] = getattr(args, name)
    if getattr(args, "coord", None):
        values["coordinate"] = args.coord
    if getattr(args, "flow", None) is not None:
        values["flow_path"] = args.flow
    if args.command == "sweep":
        values["continuation"] = ContinuationOptions(n_starts=args.starts)
    if args.command == "simulate":
        values["integrator"] = IntegratorOptions(
            step=args.step, method="rk4-adaptive" if args.adaptive else "rk4", tol=args.tol
        )
    values["solver"] = SolverOptions()
    return RunConfig(**values)


def main(argv: Optional[List[str]] = None) -> int:
    """Run one command; returns the process exit code"""
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        settings = Settings.from_env()
    except PydanticValidationError as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return EXIT_INPUT

    setup_logging(args.log_level or settings.LOG_LEVEL, settings.LOG_FILE)
    monitoring = Monitoring(settings.SENTRY_DSN, settings.ENVIRONMENT, settings.METRICS_FILE)

    try:
        config = build_config(args, settings)
        if config.command in NEEDS_ETA and config.eta is None:
            raise ValidationError("--eta is required", invariant="eta-required", field="eta")
        with monitoring.measure_command(config.command):
            game = load_game(config.game_path)
            routes = enumerate_routes(game)
            writer = ArtifactWriter(config.output_dir)
            code = COMMANDS[config.command](config, game, routes, writer)
            config.prepare_output_dir()
            writer.flush()
        return code
    except PydanticValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(part) for part in first["loc"])
        message = f"Invalid argument {where}: {first['msg']}"
        logger.error(message)
        print(message, file=sys.stderr)
        monitoring.record_error("validation")
        return EXIT_INPUT
    except HetrouteError as e:
        logger.error(format_error_message(e))
        print(f"error: {e.message}", file=sys.stderr)
        monitoring.record_error(type(e).__name__, e if e.exit_code == EXIT_NUMERICAL else None)
        return e.exit_code
    except PermissionError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as e:
        logger.error(f"Fatal error: {e}", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        monitoring.record_error("fatal_error", e)
        return EXIT_NUMERICAL
    finally:
        monitoring.write_metrics()


def run() -> None:
    """Console-script entry point"""
    sys.exit(main())


if __name__ == "__main__":
    run()
