"""
hetroute - analysis engine for heterogeneous routing games under logit dynamics
"""

__version__ = "1.0.0"
__author__ = "hetroute team"

from hetroute.config import RunConfig, Settings
from hetroute.game import Game, RouteSet, link_flow, route_costs
from hetroute.routes import enumerate_routes
from hetroute.schema import load_game, load_toll_spec

__all__ = [
    "Game",
    "RouteSet",
    "RunConfig",
    "Settings",
    "enumerate_routes",
    "link_flow",
    "load_game",
    "load_toll_spec",
    "route_costs",
]
