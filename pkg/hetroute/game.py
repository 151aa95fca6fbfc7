"""
Heterogeneous routing game model: network, delays, populations, route flows

Route flows are flat float arrays ordered population by population, route by
route, following the RouteSet enumeration. RouteSet carries the block offsets
that split a flat vector back into per-population vectors z^p.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from hetroute.exceptions import ValidationError
from hetroute.utils import flow_tolerance

logger = logging.getLogger(__name__)

Route = Tuple[str, ...]


@dataclass(frozen=True)
class Link:
    """Directed link of the multigraph"""

    id: str
    tail: str
    head: str


@dataclass(frozen=True)
class Network:
    """
    Directed multigraph; parallel links are allowed
    """

    nodes: Tuple[str, ...]
    links: Tuple[Link, ...]

    def __post_init__(self):
        if not self.nodes:
            raise ValidationError("Network needs at least one node", invariant="non-empty-nodes", field="nodes")
        if not self.links:
            raise ValidationError("Network needs at least one link", invariant="non-empty-links", field="links")
        if len(set(self.nodes)) != len(self.nodes):
            raise ValidationError("Node identifiers must be unique", invariant="unique-node-ids", field="nodes")
        seen = set()
        node_set = set(self.nodes)
        for link in self.links:
            if link.id in seen:
                raise ValidationError(
                    f"Duplicate link id {link.id!r}", invariant="unique-link-ids", field="links", value=link.id
                )
            seen.add(link.id)
            for end in (link.tail, link.head):
                if end not in node_set:
                    raise ValidationError(
                        f"Link {link.id!r} references unknown node {end!r}",
                        invariant="link-endpoints-exist",
                        field=f"links.{link.id}",
                        value=end,
                    )

    @cached_property
    def link_index(self) -> Dict[str, int]:
        """Link id -> position in the ordered link list"""
        return {link.id: i for i, link in enumerate(self.links)}

    @property
    def link_ids(self) -> Tuple[str, ...]:
        return tuple(link.id for link in self.links)

    @cached_property
    def graph(self) -> nx.MultiDiGraph:
        """networkx view keyed by link id"""
        g = nx.MultiDiGraph()
        g.add_nodes_from(self.nodes)
        for link in self.links:
            g.add_edge(link.tail, link.head, key=link.id)
        return g


class DelayKind(str, Enum):
    CONSTANT = "constant"
    AFFINE = "affine"
    LINEAR = "linear"
    POLY = "poly"


@dataclass(frozen=True)
class DelayFunction:
    """
    Non-decreasing polynomial delay tau(f) = sum_k coefficients[k] * f**k

    All coefficients are non-negative, which makes tau non-decreasing on
    [0, inf) with a closed-form derivative and antiderivative.
    """

    kind: DelayKind
    coefficients: Tuple[float, ...]

    def __post_init__(self):
        if not self.coefficients:
            raise ValidationError("Delay function needs coefficients", invariant="non-empty-coefficients")
        for c in self.coefficients:
            if not math.isfinite(c) or c < 0:
                raise ValidationError(
                    "Delay coefficients must be finite and non-negative",
                    invariant="non-negative-coefficients",
                    value=c,
                )

    @classmethod
    def constant(cls, a: float) -> "DelayFunction":
        return cls(DelayKind.CONSTANT, (float(a),))

    @classmethod
    def affine(cls, a: float, b: float) -> "DelayFunction":
        return cls(DelayKind.AFFINE, (float(a), float(b)))

    @classmethod
    def linear(cls, b: float) -> "DelayFunction":
        return cls(DelayKind.LINEAR, (0.0, float(b)))

    @classmethod
    def poly(cls, coefficients: Sequence[float]) -> "DelayFunction":
        return cls(DelayKind.POLY, tuple(float(c) for c in coefficients))

    @classmethod
    def from_params(cls, kind: str, params: Sequence[float]) -> "DelayFunction":
        """
        Build from the game-file form {type, params}

        constant: [a]; affine: [a, b]; linear: [b]; poly: [c0, c1, ...]
        """
        arity = {"constant": 1, "affine": 2, "linear": 1}
        if kind in arity and len(params) != arity[kind]:
            raise ValidationError(
                f"Delay type {kind!r} takes {arity[kind]} parameter(s), got {len(params)}",
                invariant="delay-arity",
                value=list(params),
            )
        if kind == "constant":
            return cls.constant(params[0])
        if kind == "affine":
            return cls.affine(params[0], params[1])
        if kind == "linear":
            return cls.linear(params[0])
        if kind == "poly":
            return cls.poly(params)
        raise ValidationError(f"Unknown delay type {kind!r}", invariant="delay-type", value=kind)

    @property
    def degree(self) -> int:
        nonzero = [k for k, c in enumerate(self.coefficients) if c != 0.0]
        return nonzero[-1] if nonzero else 0

    def __call__(self, f):
        return np.polynomial.polynomial.polyval(f, self.coefficients)

    def derivative(self, f):
        if len(self.coefficients) == 1:
            return np.zeros_like(np.asarray(f, dtype=float))
        return np.polynomial.polynomial.polyval(f, np.polynomial.polynomial.polyder(self.coefficients))

    def integral(self, f):
        """Closed-form integral from 0 to f"""
        return np.polynomial.polynomial.polyval(f, np.polynomial.polynomial.polyint(self.coefficients))

    def shifted(self, offset: float) -> "DelayFunction":
        """Add a constant term, keeping the kind where the family allows it"""
        coeffs = list(self.coefficients)
        coeffs[0] += float(offset)
        if offset == 0:
            return self
        if self.kind is DelayKind.CONSTANT:
            return DelayFunction(DelayKind.CONSTANT, tuple(coeffs))
        if self.kind in (DelayKind.AFFINE, DelayKind.LINEAR):
            return DelayFunction.affine(coeffs[0], coeffs[1])
        return DelayFunction.poly(coeffs)

    def to_dict(self) -> dict:
        c = self.coefficients
        if self.kind is DelayKind.CONSTANT:
            params = [c[0]]
        elif self.kind is DelayKind.AFFINE:
            params = [c[0], c[1]]
        elif self.kind is DelayKind.LINEAR:
            params = [c[1]]
        else:
            params = list(c)
        return {"type": self.kind.value, "params": params}


@dataclass(frozen=True)
class Population:
    """Users sharing an origin-destination pair and a delay map"""

    id: str
    origin: str
    destination: str
    throughput: float
    delays: Mapping[str, DelayFunction]

    def __post_init__(self):
        if not math.isfinite(self.throughput) or self.throughput < 0:
            raise ValidationError(
                f"Population {self.id!r} has negative or non-finite throughput",
                invariant="non-negative-throughput",
                field=f"populations.{self.id}.throughput",
                value=self.throughput,
            )
        if self.origin == self.destination:
            raise ValidationError(
                f"Population {self.id!r} has identical origin and destination",
                invariant="distinct-od-pair",
                field=f"populations.{self.id}",
                value=self.origin,
            )


@dataclass(frozen=True, eq=False)
class Game:
    """
    Heterogeneous routing game (network, populations, delays, throughputs)

    Immutable after construction; the padded coefficient tensor of shape
    (populations, links, degree + 1) evaluates every delay in one pass.
    """

    network: Network
    populations: Tuple[Population, ...]
    _coeffs: np.ndarray = field(init=False, repr=False)
    _dcoeffs: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.populations:
            raise ValidationError("Game needs at least one population", invariant="non-empty-populations")
        ids = [p.id for p in self.populations]
        if len(set(ids)) != len(ids):
            raise ValidationError("Population ids must be unique", invariant="unique-population-ids", field="populations")
        nodes = set(self.network.nodes)
        link_ids = set(self.network.link_ids)
        for pop in self.populations:
            for end in (pop.origin, pop.destination):
                if end not in nodes:
                    raise ValidationError(
                        f"Population {pop.id!r} references unknown node {end!r}",
                        invariant="od-nodes-exist",
                        field=f"populations.{pop.id}",
                        value=end,
                    )
            missing = link_ids - set(pop.delays)
            extra = set(pop.delays) - link_ids
            if missing:
                raise ValidationError(
                    f"Population {pop.id!r} has no delay for links {sorted(missing)}",
                    invariant="delay-map-covers-links",
                    field=f"populations.{pop.id}.delays",
                    value=sorted(missing),
                )
            if extra:
                raise ValidationError(
                    f"Population {pop.id!r} has delays for unknown links {sorted(extra)}",
                    invariant="delay-map-covers-links",
                    field=f"populations.{pop.id}.delays",
                    value=sorted(extra),
                )
            if not nx.has_path(self.network.graph, pop.origin, pop.destination):
                raise ValidationError(
                    f"Destination {pop.destination!r} is unreachable from {pop.origin!r} for population {pop.id!r}",
                    invariant="route-exists",
                    field=f"populations.{pop.id}",
                )

        width = 1 + max(len(d.coefficients) for pop in self.populations for d in pop.delays.values())
        coeffs = np.zeros((len(self.populations), len(self.network.links), width))
        for p, pop in enumerate(self.populations):
            for e, link in enumerate(self.network.links):
                c = pop.delays[link.id].coefficients
                coeffs[p, e, : len(c)] = c
        dcoeffs = coeffs[:, :, 1:] * np.arange(1, width)
        object.__setattr__(self, "_coeffs", coeffs)
        object.__setattr__(self, "_dcoeffs", dcoeffs)

    @property
    def throughputs(self) -> np.ndarray:
        return np.array([p.throughput for p in self.populations], dtype=float)

    @property
    def population_ids(self) -> Tuple[str, ...]:
        return tuple(p.id for p in self.populations)

    @property
    def n_links(self) -> int:
        return len(self.network.links)

    @property
    def coefficients(self) -> np.ndarray:
        """Padded coefficient tensor, read-only view"""
        view = self._coeffs.view()
        view.flags.writeable = False
        return view

    def population_index(self, pop_id: str) -> int:
        for i, pop in enumerate(self.populations):
            if pop.id == pop_id:
                return i
        raise ValidationError(f"Unknown population {pop_id!r}", invariant="population-exists", value=pop_id)

    def delay_matrix(self, f: np.ndarray) -> np.ndarray:
        """tau^p_e(f_e) for every population and link, shape (P, E)"""
        return _horner(self._coeffs, f)

    def delay_derivative_matrix(self, f: np.ndarray) -> np.ndarray:
        """(tau^p_e)'(f_e), shape (P, E)"""
        if self._dcoeffs.shape[2] == 0:
            return np.zeros((len(self.populations), f.shape[0]))
        return _horner(self._dcoeffs, f)

    @property
    def has_constant_delays(self) -> bool:
        return not np.any(self._dcoeffs)


def _horner(coeffs: np.ndarray, f: np.ndarray) -> np.ndarray:
    out = np.array(coeffs[:, :, -1], dtype=float)
    for k in range(coeffs.shape[2] - 2, -1, -1):
        out = out * f + coeffs[:, :, k]
    return out


@dataclass(frozen=True, eq=False)
class RouteSet:
    """
    Routes per population with link-route incidence matrices

    The stacked incidence matrix has one column per (population, route) pair,
    so the link flow of a flat route flow z is simply incidence @ z.
    """

    population_ids: Tuple[str, ...]
    link_ids: Tuple[str, ...]
    routes: Tuple[Tuple[Route, ...], ...]
    throughputs: np.ndarray
    incidence: np.ndarray = field(init=False, repr=False)
    sizes: np.ndarray = field(init=False, repr=False)
    offsets: np.ndarray = field(init=False, repr=False)
    pop_of: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        index = {link_id: e for e, link_id in enumerate(self.link_ids)}
        sizes = np.array([len(r) for r in self.routes], dtype=np.int64)
        if np.any(sizes == 0):
            raise ValidationError("Every population needs at least one route", invariant="route-exists")
        incidence = np.zeros((len(self.link_ids), int(sizes.sum())))
        col = 0
        for pop_routes in self.routes:
            for route in pop_routes:
                for link_id in route:
                    incidence[index[link_id], col] = 1.0
                col += 1
        offsets = np.concatenate(([0], np.cumsum(sizes)[:-1])).astype(np.int64)
        pop_of = np.repeat(np.arange(len(self.routes)), sizes)
        incidence.flags.writeable = False
        object.__setattr__(self, "throughputs", np.asarray(self.throughputs, dtype=float))
        object.__setattr__(self, "incidence", incidence)
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "pop_of", pop_of)

    @classmethod
    def from_routes(cls, game: Game, routes: Sequence[Sequence[Route]]) -> "RouteSet":
        """Build a RouteSet for the game from explicit route lists"""
        if len(routes) != len(game.populations):
            raise ValidationError("One route list per population is required", invariant="route-set-shape")
        return cls(
            population_ids=game.population_ids,
            link_ids=game.network.link_ids,
            routes=tuple(tuple(tuple(r) for r in pop_routes) for pop_routes in routes),
            throughputs=game.throughputs,
        )

    @property
    def dimension(self) -> int:
        return int(self.sizes.sum())

    @property
    def n_populations(self) -> int:
        return len(self.routes)

    def incidence_matrix(self, p: int) -> np.ndarray:
        """A^p, shape (E, R_p)"""
        return self.incidence[:, self.block(p)]

    def block(self, p: int) -> slice:
        start = int(self.offsets[p])
        return slice(start, start + int(self.sizes[p]))

    def split(self, z: np.ndarray) -> List[np.ndarray]:
        return [z[self.block(p)] for p in range(self.n_populations)]

    def labels(self) -> List[Tuple[str, int]]:
        """(population id, route index) per flat coordinate"""
        return [(pid, r) for pid, size in zip(self.population_ids, self.sizes) for r in range(int(size))]

    def route_name(self, p: int, r: int) -> str:
        return "(" + ",".join(self.routes[p][r]) + ")"

    @cached_property
    def tangent_basis(self) -> np.ndarray:
        """
        Columns e_i - e_last per population, spanning {x : per-population sums are 0}
        """
        n = self.dimension
        cols = []
        for p in range(self.n_populations):
            blk = self.block(p)
            last = blk.stop - 1
            for i in range(blk.start, last):
                col = np.zeros(n)
                col[i] = 1.0
                col[last] = -1.0
                cols.append(col)
        return np.array(cols).T if cols else np.zeros((n, 0))

    @cached_property
    def tangent_coords(self) -> np.ndarray:
        """Left inverse of tangent_basis on the tangent space (drops each last coordinate)"""
        keep = [i for p in range(self.n_populations) for i in range(self.block(p).start, self.block(p).stop - 1)]
        sel = np.zeros((len(keep), self.dimension))
        sel[np.arange(len(keep)), keep] = 1.0
        return sel

    def uniform(self) -> np.ndarray:
        """Barycenter of Z: every population spread evenly over its routes"""
        return np.repeat(self.throughputs / self.sizes, self.sizes)

    @property
    def vertex_count(self) -> int:
        return int(np.prod(self.sizes, dtype=object))

    def iter_vertices(self, cap: Optional[int] = None) -> Iterator[np.ndarray]:
        """Vertex profiles (each population on one route), itertools.product order"""
        choices = itertools.product(*(range(int(s)) for s in self.sizes))
        for k, choice in enumerate(choices):
            if cap is not None and k >= cap:
                return
            yield self.vertex(choice)

    def vertex(self, choice: Sequence[int]) -> np.ndarray:
        z = np.zeros(self.dimension)
        for p, r in enumerate(choice):
            z[int(self.offsets[p]) + int(r)] = self.throughputs[p]
        return z

    def vertex_at(self, k: int) -> np.ndarray:
        """k-th vertex profile in iter_vertices order"""
        if k < 0 or k >= self.vertex_count:
            raise ValidationError(f"Vertex index {k} out of range", invariant="vertex-index", value=k)
        choice = []
        for size in reversed(self.sizes):
            k, r = divmod(k, int(size))
            choice.append(r)
        return self.vertex(list(reversed(choice)))

    @property
    def shares_route_set(self) -> bool:
        """All populations have the same route list (aggregate flow is meaningful)"""
        return all(r == self.routes[0] for r in self.routes[1:])

    def aggregate(self, z: np.ndarray) -> Optional[np.ndarray]:
        """w = sum_p z^p, or None when route sets differ"""
        if not self.shares_route_set:
            return None
        return np.sum(np.reshape(z, (self.n_populations, -1)), axis=0)

    def check_admissible(self, z: np.ndarray, name: str = "z") -> np.ndarray:
        """Validate z in Z and return it as a float array"""
        z = np.asarray(z, dtype=float)
        if z.shape != (self.dimension,):
            raise ValidationError(
                f"{name} has shape {z.shape}, expected ({self.dimension},)",
                invariant="dimension",
                field=name,
            )
        if not np.all(np.isfinite(z)):
            raise ValidationError(f"{name} has non-finite entries", invariant="finite-flow", field=name)
        for p, block in enumerate(self.split(z)):
            v = float(self.throughputs[p])
            tol = flow_tolerance(v)
            if np.any(block < -tol):
                raise ValidationError(
                    f"{name} has negative flow for population {self.population_ids[p]!r}",
                    invariant="non-negative-flow",
                    field=name,
                )
            if abs(block.sum() - v) > tol:
                raise ValidationError(
                    f"{name} sums to {block.sum()!r} for population {self.population_ids[p]!r}, expected {v!r}",
                    invariant="flow-conservation",
                    field=name,
                )
        return z

    def project(self, z: np.ndarray) -> np.ndarray:
        """Clip negatives at 0 and rescale each block to its throughput"""
        z = np.clip(z, 0.0, None)
        sums = np.add.reduceat(z, self.offsets)
        scale = np.divide(self.throughputs, sums, out=np.zeros_like(sums), where=sums > 0)
        z = z * np.repeat(scale, self.sizes)
        empty = (sums <= 0) & (self.throughputs > 0)
        if np.any(empty):
            uniform = self.uniform()
            for p in np.flatnonzero(empty):
                z[self.block(int(p))] = uniform[self.block(int(p))]
        return z

    def to_dict(self) -> dict:
        return {
            pid: [list(route) for route in pop_routes]
            for pid, pop_routes in zip(self.population_ids, self.routes)
        }


def link_flow(routes: RouteSet, z: np.ndarray) -> np.ndarray:
    """
    Link flow f = sum_p A^p z^p

    Raises:
        ValidationError: dimension mismatch
    """
    z = np.asarray(z, dtype=float)
    if z.shape != (routes.dimension,):
        raise ValidationError(
            f"Route flow has shape {z.shape}, expected ({routes.dimension},)",
            invariant="dimension",
            field="z",
        )
    return routes.incidence @ z


def route_cost_vector(game: Game, routes: RouteSet, z: np.ndarray) -> np.ndarray:
    """Flat route costs c^p_r(z), same layout as z"""
    f = routes.incidence @ z
    delays = game.delay_matrix(f)
    # column k picks the delays of its own population
    return np.einsum("ek,ke->k", routes.incidence, delays[routes.pop_of])


def route_costs(game: Game, routes: RouteSet, z: np.ndarray) -> List[np.ndarray]:
    """
    Per-population route cost vectors c^p(z)

    c^p_r(z) = sum_e A^p_er tau^p_e(f_e), f from link_flow
    """
    f = link_flow(routes, z)
    delays = game.delay_matrix(f)
    return [routes.incidence_matrix(p).T @ delays[p] for p in range(routes.n_populations)]
