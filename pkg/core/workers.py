"""Frame-level worker pool."""
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Sequence, TypeVar

import numpy as np

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def frame_generators(seed: int, count: int) -> List[np.random.Generator]:
    """One independent generator per frame position, independent of scheduling."""
    return [np.random.default_rng(child) for child in np.random.SeedSequence(seed).spawn(count)]


def run_frames(func: Callable[[T], R], items: Sequence[T], jobs: int = 1) -> List[R]:
    """Apply ``func`` to every item, preserving input order in the result."""
    if not items:
        return []

    jobs = max(1, min(jobs, len(items)))
    if jobs == 1:
        return [func(item) for item in items]

    logger.info(f"Processing {len(items)} frames on {jobs} workers")
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(func, items))


def frame_seeds(seed: int, count: int) -> List[int]:
    """Integer seeds for frame positions, for components that take a seed rather than a generator."""
    return [int(child.generate_state(1)[0]) for child in np.random.SeedSequence(seed).spawn(count)]
