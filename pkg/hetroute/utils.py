"""
Shared utilities and constants
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, List, Sequence, TypeVar

import numpy as np

logger = logging.getLogger(__name__)

# Constants
ROUTE_CAP = 10_000
VERTEX_CAP = 1024
FLOW_TOL = 1e-12
SUPPORT_FRACTION = 1e-10
DEFAULT_SAMPLE_SIZE = 512
DEFAULT_SEED = 0

T = TypeVar("T")
R = TypeVar("R")


def flow_tolerance(throughput: float) -> float:
    """Admissibility tolerance on a population's total flow"""
    return FLOW_TOL * max(1.0, throughput)


def l1(x: np.ndarray) -> float:
    """l1 norm as a Python float"""
    return float(np.abs(x).sum())


def segment_sum(values: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Sum of each contiguous population block"""
    return np.add.reduceat(values, offsets)


def largest_remainder(fractions: np.ndarray, total: int) -> np.ndarray:
    """
    Round non-negative fractions summing to one into integers summing to total

    Args:
        fractions: Non-negative weights, normalised internally
        total: Target integer sum

    Returns:
        Integer counts with counts.sum() == total
    """
    weights = np.asarray(fractions, dtype=float)
    s = weights.sum()
    if s <= 0:
        weights = np.full(weights.shape, 1.0 / weights.size)
    else:
        weights = weights / s
    raw = weights * total
    counts = np.floor(raw).astype(np.int64)
    missing = int(total - counts.sum())
    if missing > 0:
        # Stable sort keeps ties in index order
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:missing]] += 1
    return counts


def dirichlet_flows(
    rng: np.random.Generator,
    sizes: Sequence[int],
    throughputs: Sequence[float],
    count: int,
) -> np.ndarray:
    """
    Draw admissible route flows with per-population Dirichlet(1, ..., 1) shares

    Returns:
        Array of shape (count, sum(sizes))
    """
    blocks = []
    for size, v in zip(sizes, throughputs):
        if size == 1:
            blocks.append(np.full((count, 1), float(v)))
        else:
            blocks.append(rng.dirichlet(np.ones(size), size=count) * v)
    return np.hstack(blocks) if blocks else np.zeros((count, 0))


def parallel_map(func: Callable[[T], R], items: Iterable[T], jobs: int = 1) -> List[R]:
    """
    Map func over items with at most `jobs` worker processes

    Results keep input order, so merges downstream are deterministic
    regardless of completion order.
    """
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    workers = min(jobs, len(items))
    chunksize = max(1, len(items) // (4 * workers))
    logger.debug(f"Fanning out {len(items)} tasks over {workers} workers")
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items, chunksize=chunksize))


def format_float(x: float) -> str:
    """Render a float with 17 significant digits"""
    return format(float(x), ".17g")
