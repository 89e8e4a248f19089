"""Voxel grids: point ingestion, voxelization, centers and index downsampling."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import EmptyVoxelSetError, PointFileError


@dataclass(frozen=True)
class GridSpec:
    """Regular 3D grid: ``origin`` and ``voxel_size`` in meters, ``extent`` in cells.

    Defaults cover x in [0, 70.4), y in [-40, 40), z in [-3, 1) meters.
    """

    origin: tuple[float, float, float] = (0.0, -40.0, -3.0)
    voxel_size: tuple[float, float, float] = (0.05, 0.05, 0.1)
    extent: tuple[int, int, int] = (1408, 1600, 40)

    def __post_init__(self):
        origin = tuple(float(x) for x in self.origin)
        size = tuple(float(x) for x in self.voxel_size)
        extent = tuple(int(x) for x in self.extent)
        if len(origin) != 3 or len(size) != 3 or len(extent) != 3:
            raise ValueError("origin, voxel_size and extent must all have 3 components")
        if not all(np.isfinite(origin)):
            raise ValueError(f"origin must be finite, got {origin}")
        if not all(s > 0 and np.isfinite(s) for s in size):
            raise ValueError(f"voxel_size must be positive, got {size}")
        if not all(e >= 1 for e in extent):
            raise ValueError(f"extent must be >= 1 on every axis, got {extent}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "voxel_size", size)
        object.__setattr__(self, "extent", extent)

    @property
    def n_dense(self) -> int:
        return int(np.prod(self.extent, dtype=np.int64))

    def downsampled(self, stride: int = 2) -> "GridSpec":
        """Grid after an index downsample: voxel size scales by ``stride``."""
        return GridSpec(
            origin=self.origin,
            voxel_size=tuple(s * stride for s in self.voxel_size),
            extent=tuple(-(-e // stride) for e in self.extent),
        )

    def to_dict(self) -> dict:
        return {"origin": list(self.origin), "voxel_size": list(self.voxel_size),
                "extent": list(self.extent)}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(origin=tuple(d["origin"]), voxel_size=tuple(d["voxel_size"]),
                   extent=tuple(d["extent"]))


@dataclass
class SparseVoxelSet:
    """Non-empty voxels of a grid: integer ``indices`` (N, 3) and ``features`` (N, d)."""

    indices: np.ndarray
    features: np.ndarray
    grid: GridSpec = field(default_factory=GridSpec)

    def __post_init__(self):
        self.indices = np.ascontiguousarray(self.indices, dtype=np.int64).reshape(-1, 3)
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features.reshape(len(self.indices), -1)
        if len(self.indices) != len(self.features):
            raise ValueError(
                f"indices and features disagree on row count: "
                f"{len(self.indices)} vs {len(self.features)}"
            )

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def n_channels(self) -> int:
        return self.features.shape[1]

    def centers(self) -> np.ndarray:
        return voxel_centers(self.indices, self.grid)

    def validate(self) -> None:
        """Raise ``ValueError`` if any structural invariant is broken."""
        v = self.indices
        if len(v) == 0:
            return
        if (v < 0).any() or (v >= np.asarray(self.grid.extent)).any():
            raise ValueError("voxel index outside grid extent")
        if not is_lexsorted_unique(v):
            raise ValueError("voxel indices must be unique and lexicographically sorted")


def is_lexsorted_unique(indices: np.ndarray) -> bool:
    """True iff rows are strictly increasing in lexicographic (x, y, z) order."""
    v = np.asarray(indices, dtype=np.int64)
    if len(v) < 2:
        return True
    d = np.diff(v, axis=0)
    # first non-zero component of each row difference must be positive
    nz = d != 0
    first = np.argmax(nz, axis=1)
    lead = d[np.arange(len(d)), first]
    return bool(nz.any(axis=1).all() and (lead > 0).all())


def lexsort_rows(indices: np.ndarray) -> np.ndarray:
    """Permutation sorting (N, 3) rows by x, then y, then z."""
    v = np.asarray(indices)
    return np.lexsort((v[:, 2], v[:, 1], v[:, 0]))


def unique_rows(indices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unique rows in lexicographic order plus the inverse map."""
    uniq, inverse = np.unique(np.asarray(indices, dtype=np.int64), axis=0, return_inverse=True)
    return uniq, inverse.reshape(-1)


def point_indices(points: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Cell index of each point; half-open cells, so boundary points go up."""
    p = np.asarray(points, dtype=np.float64)[:, :3]
    rel = (p - np.asarray(grid.origin)) / np.asarray(grid.voxel_size)
    return np.floor(rel).astype(np.int64)


def voxelize(points, grid: GridSpec) -> SparseVoxelSet:
    """Rasterize points into the non-empty voxels of ``grid``.

    Each voxel's 3 features are the mean xyz of its points. Points whose
    cell falls outside the extent are dropped. Output rows are sorted
    lexicographically.
    """
    p = np.asarray(points, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] < 3:
        raise ValueError(f"points must have shape (N, 3) or (N, 4), got {p.shape}")
    if len(p) == 0:
        raise ValueError("point list is empty")
    if not np.isfinite(p[:, :3]).all():
        raise ValueError("point coordinates must be finite")

    idx = point_indices(p, grid)
    inside = ((idx >= 0) & (idx < np.asarray(grid.extent))).all(axis=1)
    if not inside.any():
        raise EmptyVoxelSetError("empty voxel set: every point lies outside the grid extent")
    idx, xyz = idx[inside], p[inside, :3]

    uniq, inverse = unique_rows(idx)
    counts = np.bincount(inverse, minlength=len(uniq)).astype(np.float64)
    feats = np.zeros((len(uniq), 3))
    for c in range(3):
        feats[:, c] = np.bincount(inverse, weights=xyz[:, c], minlength=len(uniq)) / counts
    return SparseVoxelSet(uniq, feats, grid)


def voxel_center(v, grid: GridSpec) -> np.ndarray:
    """Metric center ``origin + r * (v + 0.5)`` of one voxel."""
    v = np.asarray(v, dtype=np.int64)
    if v.shape != (3,):
        raise ValueError(f"expected a 3-index, got shape {v.shape}")
    if (v < 0).any() or (v >= np.asarray(grid.extent)).any():
        raise ValueError(f"voxel {tuple(v)} outside extent {grid.extent}")
    return voxel_centers(v[None], grid)[0]


def voxel_centers(indices: np.ndarray, grid: GridSpec) -> np.ndarray:
    v = np.asarray(indices, dtype=np.float64).reshape(-1, 3)
    return np.asarray(grid.origin) + np.asarray(grid.voxel_size) * (v + 0.5)


def downsample_indices(indices: np.ndarray, stride: int = 2) -> np.ndarray:
    """Unique, sorted ``floor(v / stride)`` rows."""
    if int(stride) != stride or stride < 1:
        raise ValueError(f"stride must be a positive integer, got {stride}")
    v = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
    if len(v) == 0:
        return v.copy()
    return unique_rows(np.floor_divide(v, int(stride)))[0]


def downsample(voxels: SparseVoxelSet, stride: int = 2) -> tuple[np.ndarray, GridSpec]:
    """Downsampled index set together with the coarser grid it lives on."""
    return downsample_indices(voxels.indices, stride), voxels.grid.downsampled(stride)


def init_features(voxels: SparseVoxelSet, W_init: np.ndarray, b_init: np.ndarray,
                  source: str = "center") -> SparseVoxelSet:
    """Linear projection of voxel coordinates into the initial feature space.

    ``source="center"`` projects the metric cell centers; ``source="mean"``
    projects the stored per-voxel mean point instead.
    """
    W = np.asarray(W_init, dtype=np.float64)
    b = np.asarray(b_init, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != 3:
        raise ValueError(f"W_init must be 3 x d, got {W.shape}")
    if b.shape != (W.shape[1],):
        raise ValueError(f"b_init must have length {W.shape[1]}, got {b.shape}")
    if voxels.n_channels != 3:
        raise ValueError(f"init_features expects 3-channel coordinates, got {voxels.n_channels}")
    if source == "center":
        coords = voxels.centers()
    elif source == "mean":
        coords = voxels.features
    else:
        raise ValueError(f"unknown coordinate source {source!r}")
    return SparseVoxelSet(voxels.indices, coords @ W + b, voxels.grid)


def read_points(path, fmt: str | None = None) -> np.ndarray:
    """Load a point file as an (N, 4) float64 array (x, y, z, intensity).

    ``bin`` files hold little-endian float32 quadruplets; ``ascii`` files
    hold one ``x y z [intensity]`` row per line with ``#`` comments.
    """
    path = Path(path)
    if fmt is None:
        fmt = "bin" if path.suffix.lower() == ".bin" else "ascii"
    try:
        if fmt == "bin":
            raw = path.read_bytes()
            if len(raw) % 16:
                raise PointFileError(f"{path}: size {len(raw)} is not a multiple of 16 bytes")
            pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
        elif fmt == "ascii":
            pts = _read_ascii(path)
        else:
            raise PointFileError(f"unknown point format {fmt!r}")
    except OSError as exc:
        raise PointFileError(f"cannot read {path}: {exc}") from exc
    if len(pts) == 0:
        raise PointFileError(f"{path}: no points")
    if not np.isfinite(pts[:, :3]).all():
        raise PointFileError(f"{path}: non-finite coordinates")
    return pts


def _read_ascii(path: Path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) not in (3, 4):
                raise PointFileError(f"{path}:{lineno}: expected 3 or 4 columns, got {len(parts)}")
            try:
                vals = [float(x) for x in parts]
            except ValueError as exc:
                raise PointFileError(f"{path}:{lineno}: {exc}") from exc
            rows.append(vals if len(vals) == 4 else vals + [0.0])
    return np.asarray(rows, dtype=np.float64).reshape(-1, 4)


def write_points(path, points: np.ndarray, fmt: str = "bin") -> None:
    p = np.asarray(points, dtype=np.float64)
    if p.shape[1] == 3:
        p = np.hstack([p, np.zeros((len(p), 1))])
    if fmt == "bin":
        Path(path).write_bytes(p.astype("<f4").tobytes())
    else:
        np.savetxt(path, p, fmt="%.9g")
