"""Seeded synthetic scenes with uniform voxel occupancy."""

from __future__ import annotations

import numpy as np

from .grid import GridSpec, SparseVoxelSet, voxel_centers


def random_indices(n: int, extent, rng=None) -> np.ndarray:
    """``n`` distinct voxel indices drawn uniformly from ``extent``, sorted."""
    rng = np.random.default_rng(rng)
    extent = np.asarray(extent, dtype=np.int64)
    total = int(np.prod(extent))
    if n > total:
        raise ValueError(f"cannot place {n} voxels in {total} cells")
    if n == 0:
        return np.empty((0, 3), dtype=np.int64)
    if n > total // 4:
        flat = rng.choice(total, size=n, replace=False)
    else:
        flat = np.empty(0, dtype=np.int64)
        while len(flat) < n:
            draw = rng.integers(0, total, size=2 * (n - len(flat)) + 16)
            flat = np.unique(np.concatenate([flat, draw]))
        flat = rng.permutation(flat)[:n]
    # row-major flattening keeps the unravelled rows in lexicographic order
    flat = np.sort(flat)
    return np.stack(np.unravel_index(flat, tuple(extent)), axis=1).astype(np.int64)


def random_scene(n: int, grid: GridSpec, rng=None) -> SparseVoxelSet:
    """Voxel set with ``n`` occupied cells; features are the cell centers."""
    idx = random_indices(n, grid.extent, rng)
    return SparseVoxelSet(idx, voxel_centers(idx, grid), grid)


def random_points(n_voxels: int, grid: GridSpec, points_per_voxel: int = 2,
                  rng=None) -> np.ndarray:
    """Points jittered inside ``n_voxels`` random cells, as (N, 4) with zero intensity."""
    rng = np.random.default_rng(rng)
    idx = random_indices(n_voxels, grid.extent, rng)
    idx = np.repeat(idx, points_per_voxel, axis=0)
    frac = rng.uniform(0.05, 0.95, size=idx.shape)
    xyz = np.asarray(grid.origin) + np.asarray(grid.voxel_size) * (idx + frac)
    return np.hstack([xyz, np.zeros((len(xyz), 1))])


def synthetic_extent(n: int, density: float = 0.01, z: int = 40) -> tuple[int, int, int]:
    """Square-footprint extent holding ``n`` voxels at roughly ``density`` occupancy."""
    side = int(np.ceil(np.sqrt(n / (density * z))))
    return (max(side, 2), max(side, 2), z)
