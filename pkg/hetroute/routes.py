"""
Route enumeration on the network multigraph
"""

import logging
from typing import List

import networkx as nx

from hetroute.exceptions import CapExceededError
from hetroute.game import Game, Route, RouteSet
from hetroute.utils import ROUTE_CAP

logger = logging.getLogger(__name__)


def simple_routes(game: Game, origin: str, destination: str, cap: int = ROUTE_CAP, population: str = None) -> List[Route]:
    """
    All simple paths from origin to destination as link-id sequences

    Parallel links give distinct routes. Routes are sorted by the positions of
    their links in the network's link list.

    Raises:
        CapExceededError: more than `cap` simple paths exist
    """
    position = game.network.link_index
    found: List[Route] = []
    for path in nx.all_simple_edge_paths(game.network.graph, origin, destination):
        if len(found) >= cap:
            raise CapExceededError(
                f"More than {cap} routes from {origin!r} to {destination!r}"
                + (f" for population {population!r}" if population else ""),
                what="routes",
                cap=cap,
                population=population,
            )
        found.append(tuple(key for _, _, key in path))
    found.sort(key=lambda route: [position[link_id] for link_id in route])
    return found


def enumerate_routes(game: Game, cap: int = ROUTE_CAP) -> RouteSet:
    """
    Enumerate R_p for every population and build the incidence matrices

    Args:
        game: Validated game
        cap: Maximum number of routes per population

    Returns:
        RouteSet in deterministic order
    """
    per_population = []
    for pop in game.populations:
        routes = simple_routes(game, pop.origin, pop.destination, cap=cap, population=pop.id)
        logger.debug(f"Population {pop.id}: {len(routes)} routes")
        per_population.append(routes)
    route_set = RouteSet.from_routes(game, per_population)
    logger.info(f"Enumerated {route_set.dimension} routes over {route_set.n_populations} populations")
    return route_set
