"""
Shared fixtures: bundled games, the three equilibria of the konishi game and random small games
"""

from pathlib import Path

import numpy as np
import pytest

from hetroute.game import DelayFunction, Game, Link, Network, Population
from hetroute.routes import enumerate_routes
from hetroute.schema import load_game, load_toll_spec

GAMES_DIR = Path(__file__).resolve().parent.parent / "games"


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance checks (deselect with -m 'not slow')")


@pytest.fixture
def games_dir() -> Path:
    return GAMES_DIR


@pytest.fixture(scope="session")
def konishi():
    return load_game(GAMES_DIR / "konishi.json")


@pytest.fixture(scope="session")
def konishi_routes(konishi):
    return enumerate_routes(konishi)


@pytest.fixture(scope="session")
def eq1(konishi_routes):
    return konishi_routes.vertex((0, 2, 3))


@pytest.fixture(scope="session")
def eq2(konishi_routes):
    return konishi_routes.vertex((3, 0, 1))


@pytest.fixture(scope="session")
def eq3():
    return np.array([0.6, 0.0, 0.0, 0.6, 10 / 21, 0.0, 11 / 21, 0.0, 0.0, 11 / 21, 0.0, 10 / 21])


@pytest.fixture(scope="session")
def toll_spec():
    return load_toll_spec(GAMES_DIR / "toll_two_population.json")


@pytest.fixture(scope="session")
def toll_game():
    return load_game(GAMES_DIR / "toll_two_population.json")


@pytest.fixture(scope="session")
def toll_routes(toll_game):
    return enumerate_routes(toll_game)


@pytest.fixture(scope="session")
def affine_game():
    return load_game(GAMES_DIR / "affine_parallel.json")


@pytest.fixture(scope="session")
def constant_game():
    return load_game(GAMES_DIR / "constant_parallel.json")


def parallel_game(delays_by_population, throughputs) -> Game:
    """o -> d over one parallel link per delay entry"""
    n_links = len(delays_by_population[0])
    network = Network(
        nodes=("o", "d"),
        links=tuple(Link(id=f"e{k + 1}", tail="o", head="d") for k in range(n_links)),
    )
    populations = tuple(
        Population(
            id=f"p{p + 1}",
            origin="o",
            destination="d",
            throughput=float(v),
            delays={f"e{k + 1}": d for k, d in enumerate(delays)},
        )
        for p, (delays, v) in enumerate(zip(delays_by_population, throughputs))
    )
    return Game(network=network, populations=populations)


def random_two_population_game(rng: np.random.Generator) -> Game:
    """Two populations on a small two-stage network with random polynomial delays"""
    network = Network(
        nodes=("o", "m", "d"),
        links=(
            Link("e1", "o", "m"),
            Link("e2", "o", "m"),
            Link("e3", "m", "d"),
            Link("e4", "m", "d"),
            Link("e5", "o", "d"),
        ),
    )
    populations = []
    for p in range(2):
        delays = {
            link.id: DelayFunction.poly(rng.uniform(0.0, 3.0, size=int(rng.integers(1, 4))))
            for link in network.links
        }
        populations.append(
            Population(id=f"p{p + 1}", origin="o", destination="d", throughput=float(rng.uniform(0.5, 2.0)), delays=delays)
        )
    return Game(network=network, populations=tuple(populations))


@pytest.fixture
def make_parallel_game():
    return parallel_game


@pytest.fixture
def make_random_game():
    return random_two_population_game


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    """Keep the developer's .env out of the tests"""
    for name in (
        "HETROUTE_JOBS",
        "HETROUTE_LOG_LEVEL",
        "HETROUTE_LOG_FILE",
        "HETROUTE_METRICS_FILE",
        "HETROUTE_ENVIRONMENT",
        "SENTRY_DSN",
    ):
        monkeypatch.delenv(name, raising=False)
