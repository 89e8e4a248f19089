"""CPU reference engine for a sparse voxel transformer backbone."""

import numba

# TBB shipped in this environment is too old for numba; OpenMP is thread-safe
# for concurrent callers, unlike the workqueue fallback.
if numba.config.THREADING_LAYER == "default":
    numba.config.THREADING_LAYER = "omp"

from .grid import GridSpec, SparseVoxelSet, voxelize, voxel_center, downsample_indices, init_features  # noqa: E402
from .hashing import VoxelHashTable, build_table, lookup, batch_lookup, pack_key, MISS  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "GridSpec",
    "SparseVoxelSet",
    "voxelize",
    "voxel_center",
    "downsample_indices",
    "init_features",
    "VoxelHashTable",
    "build_table",
    "lookup",
    "batch_lookup",
    "pack_key",
    "MISS",
]
