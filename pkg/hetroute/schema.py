"""
Game, toll-game and flow file loading

Files are UTF-8 JSON. The pydantic models below check document shape; model
invariants (negative throughput, unknown nodes, unreachable destinations) are
checked by the game types themselves so the error names the invariant.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from pydantic import ValidationError as PydanticValidationError

from hetroute.exceptions import GameFileError, ValidationError
from hetroute.game import DelayFunction, Game, Link, Network, Population, RouteSet
from hetroute.potential import PopulationDemand, TollGameSpec

logger = logging.getLogger(__name__)


class DelayEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    type: Literal["constant", "affine", "linear", "poly"]
    params: List[float] = Field(min_length=1)

    def build(self) -> DelayFunction:
        return DelayFunction.from_params(self.type, self.params)


class LinkEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str
    tail: str
    head: str


class PopulationEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str
    origin: str
    destination: str
    throughput: float
    delays: Dict[str, DelayEntry]


class TollPopulationEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str
    origin: str
    destination: str
    throughput: float


class GameDocument(BaseModel):
    """Standard game file"""

    model_config = ConfigDict(extra="forbid")

    mode: Literal["standard"] = "standard"
    nodes: List[str]
    links: List[LinkEntry]
    populations: List[PopulationEntry]


class TollDocument(BaseModel):
    """Toll-sensitivity game file: shared delays plus alpha_p * omega_e"""

    model_config = ConfigDict(extra="forbid")

    mode: Literal["toll"]
    nodes: List[str]
    links: List[LinkEntry]
    populations: List[TollPopulationEntry]
    base_delays: Dict[str, DelayEntry]
    tolls: Dict[str, float]
    sensitivities: Dict[str, float]


def _read_json(path: Union[str, Path]) -> Any:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise GameFileError(f"File not found: {path}", path=str(path))
    except (OSError, UnicodeDecodeError) as e:
        raise GameFileError(f"Cannot read {path}: {e}", path=str(path))
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise GameFileError(f"Invalid JSON in {path}: {e.msg}", path=str(path), line=e.lineno, column=e.colno)


def _parse(model: type, data: Any, path: Path) -> BaseModel:
    try:
        return model.model_validate(data)
    except PydanticValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(part) for part in first["loc"])
        raise GameFileError(f"{path}: {where}: {first['msg']}", path=str(path), field=where)


def _network(links: List[LinkEntry], nodes: List[str]) -> Network:
    return Network(
        nodes=tuple(nodes),
        links=tuple(Link(id=link.id, tail=link.tail, head=link.head) for link in links),
    )


def toll_spec_from_document(doc: TollDocument) -> TollGameSpec:
    return TollGameSpec(
        network=_network(doc.links, doc.nodes),
        populations=tuple(
            PopulationDemand(id=p.id, origin=p.origin, destination=p.destination, throughput=p.throughput)
            for p in doc.populations
        ),
        base_delays={link_id: entry.build() for link_id, entry in doc.base_delays.items()},
        tolls=dict(doc.tolls),
        sensitivities=dict(doc.sensitivities),
    )


def game_from_document(doc: GameDocument) -> Game:
    network = _network(doc.links, doc.nodes)
    populations = tuple(
        Population(
            id=p.id,
            origin=p.origin,
            destination=p.destination,
            throughput=p.throughput,
            delays={link_id: entry.build() for link_id, entry in p.delays.items()},
        )
        for p in doc.populations
    )
    return Game(network=network, populations=populations)


def load_document(path: Union[str, Path]) -> Union[GameDocument, TollDocument]:
    """Parse a game file into its document model, standard or toll"""
    path = Path(path)
    data = _read_json(path)
    if isinstance(data, dict) and data.get("mode") == "toll":
        return _parse(TollDocument, data, path)
    return _parse(GameDocument, data, path)


def load_game(path: Union[str, Path]) -> Game:
    """
    Load and validate a game file

    Toll files (`mode: "toll"`) are expanded into a standard Game with
    tau^p_e(f) = tau_e(f) + alpha_p * omega_e.

    Raises:
        GameFileError: unreadable file, malformed JSON or wrong document shape
        ValidationError: a game invariant does not hold
    """
    doc = load_document(path)
    if isinstance(doc, TollDocument):
        game = toll_spec_from_document(doc).to_game()
    else:
        game = game_from_document(doc)
    logger.info(
        f"Loaded game {Path(path).name}: {len(game.network.nodes)} nodes, "
        f"{game.n_links} links, {len(game.populations)} populations"
    )
    return game


def load_toll_spec(path: Union[str, Path]) -> Optional[TollGameSpec]:
    """TollGameSpec for toll files, None for standard game files"""
    doc = load_document(path)
    if isinstance(doc, TollDocument):
        return toll_spec_from_document(doc)
    return None


def load_flow(path: Union[str, Path], routes: RouteSet) -> np.ndarray:
    """
    Read a flow file {population id: {route index: flow}} into a flat route flow

    Unlisted routes carry zero flow. The result must be admissible.
    """
    path = Path(path)
    data = _read_json(path)
    if not isinstance(data, dict):
        raise GameFileError(f"{path}: flow file must be a JSON object", path=str(path))
    z = np.zeros(routes.dimension)
    for pid, entries in data.items():
        if pid not in routes.population_ids:
            raise ValidationError(f"Unknown population {pid!r} in flow file", invariant="population-exists", field=pid)
        p = routes.population_ids.index(pid)
        if not isinstance(entries, dict):
            raise GameFileError(f"{path}: flows of {pid!r} must be an object", path=str(path), field=pid)
        for key, value in entries.items():
            try:
                r = int(key)
                flow = float(value)
            except (TypeError, ValueError):
                raise GameFileError(f"{path}: bad entry {key!r} for {pid!r}", path=str(path), field=f"{pid}.{key}")
            if r < 0 or r >= int(routes.sizes[p]):
                raise ValidationError(
                    f"Route index {r} out of range for population {pid!r}",
                    invariant="route-index",
                    field=f"{pid}.{key}",
                    value=r,
                )
            z[int(routes.offsets[p]) + r] = flow
    return routes.check_admissible(z, name=str(path))


def flow_to_dict(routes: RouteSet, z: np.ndarray) -> Dict[str, Dict[str, float]]:
    """Inverse of load_flow, every route listed"""
    return {
        pid: {str(r): float(x) for r, x in enumerate(block)}
        for pid, block in zip(routes.population_ids, routes.split(z))
    }
