"""Hash-table lookup vs. linear scan on identical voxel-query workloads."""

from __future__ import annotations

import logging
import time

import numpy as np

from .exceptions import LookupMismatchError
from .hashing import build_table, lookup_rows, scan_lookup
from .io import BenchReport
from .ranges import KITTI_DILATED, candidate_offsets
from .scene import random_indices, synthetic_extent

logger = logging.getLogger(__name__)


def make_workload(n_sparse: int, n_queries: int, per_query: int = 48, seed: int = 0,
                  density: float = 0.01):
    """Scene indices, extent and the (n_queries * per_query, 3) candidate array.

    Queries are scene voxels; each one probes the first ``per_query``
    offsets of the module-1 attention ordering, so hits and misses mix the
    way they do during range assembly.
    """
    rng = np.random.default_rng(seed)
    extent = synthetic_extent(n_sparse, density)
    indices = random_indices(n_sparse, extent, rng)
    q = rng.integers(0, n_sparse, size=n_queries)
    offsets, _ = candidate_offsets(KITTI_DILATED["1"])
    if per_query > len(offsets):
        raise ValueError(f"at most {len(offsets)} candidates per query are available")
    cand = (indices[q][:, None, :] + offsets[None, :per_query, :]).reshape(-1, 3)
    return indices, extent, cand


def run_bench(n_sparse: int = 90_000, n_queries: int = 90_000, n_hash: int = 400_000,
              per_query: int = 48, seed: int = 0) -> BenchReport:
    if n_queries < 1:
        raise ValueError("the benchmark needs at least one query")
    if per_query < 1:
        raise ValueError("the benchmark needs at least one candidate per query")
    if n_sparse < 1 or n_sparse >= n_hash:
        raise ValueError(f"need 1 <= n_sparse < n_hash, got {n_sparse} and {n_hash}")
    indices, _, cand = make_workload(n_sparse, n_queries, per_query, seed)

    # compile both kernels outside the timed region
    warm = build_table(indices[:2], 8)
    lookup_rows(warm, indices[:2])
    scan_lookup(indices[:2], indices[:2])

    t0 = time.perf_counter()
    table = build_table(indices, n_hash)
    t1 = time.perf_counter()
    hash_rows = lookup_rows(table, cand)
    t2 = time.perf_counter()
    logger.info("hash path done in %.3fs; starting linear scan over %d candidates",
                t2 - t1, len(cand))
    scan_rows = scan_lookup(indices, cand)
    t3 = time.perf_counter()

    if not np.array_equal(hash_rows, scan_rows):
        bad = np.flatnonzero(hash_rows != scan_rows)
        raise LookupMismatchError(
            f"{len(bad)} of {len(cand)} lookups disagree; first at candidate "
            f"{tuple(cand[bad[0]])}: hash={hash_rows[bad[0]]} scan={scan_rows[bad[0]]}")

    hash_s, scan_s = max(t2 - t1, 1e-9), max(t3 - t2, 1e-9)
    return BenchReport(
        n_sparse=int(n_sparse),
        n_queries=int(n_queries),
        candidates_per_query=int(per_query),
        n_candidates=int(len(cand)),
        n_hits=int((hash_rows >= 0).sum()),
        n_hash=int(n_hash),
        seed=int(seed),
        verified=True,
        table=table.stats(),
        timing={"build_seconds": t1 - t0, "hash_seconds": hash_s, "scan_seconds": scan_s,
                "speedup": scan_s / hash_s},
    )
