"""Attending-set generation: Local and Dilated Attention ranges.

A query at integer index ``v`` attends over non-empty voxels at
``v + o`` for candidate offsets ``o``. Candidate offsets are fixed per
configuration, so they are enumerated once, in a documented order:

1. the local window ``[-R_local, R_local]`` (stride 1), lexicographic;
2. each dilated ring in config order: the strided lattice over
   ``[-R_end, R_end]`` minus the same-stride lattice over
   ``[-R_start, R_start]``, lexicographic within the ring.

Offsets already emitted by an earlier group are skipped, and a query's
attendees are the first ``budget`` candidates that hit a non-empty voxel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numba
import numpy as np

from .exceptions import ConfigError
from .hashing import AXIS_LIMIT, EMPTY, VoxelHashTable, _home, _pack, lookup_rows

DEFAULT_BUDGET = 48
R_LOCAL = (1, 1, 1)


def _triple(x, name) -> tuple[int, int, int]:
    t = tuple(int(c) for c in x)
    if len(t) != 3:
        raise ConfigError(f"{name} must have 3 components, got {x!r}")
    return t


@dataclass(frozen=True)
class RangeSpec:
    start: tuple[int, int, int]
    end: tuple[int, int, int]
    stride: tuple[int, int, int]

    def __post_init__(self):
        start = _triple(self.start, "R_start")
        end = _triple(self.end, "R_end")
        stride = _triple(self.stride, "R_stride")
        if any(s < 0 for s in start):
            raise ConfigError(f"R_start must be non-negative, got {start}")
        if not all(s < e for s, e in zip(start, end)):
            raise ConfigError(f"R_start {start} must be < R_end {end} on every axis")
        if any(s < 1 for s in stride):
            raise ConfigError(f"R_stride must be >= 1, got {stride}")
        object.__setattr__(self, "start", start)
        object.__setattr__(self, "end", end)
        object.__setattr__(self, "stride", stride)

    def to_dict(self) -> dict:
        return {"start": list(self.start), "end": list(self.end), "stride": list(self.stride)}


@dataclass(frozen=True)
class DilatedConfig:
    """Ordered dilated rings, validated for outward growth.

    Consecutive rings must satisfy ``stride[m] <= stride[m+1]`` on every
    axis (strictly on at least one) and ``end[m] <= start[m+1]`` on every
    axis where the next ring's start is non-zero. A zero start component
    marks a flat start window on that axis and is exempt.
    """

    rings: tuple[RangeSpec, ...]

    def __post_init__(self):
        rings = tuple(r if isinstance(r, RangeSpec) else RangeSpec(**r) for r in self.rings)
        object.__setattr__(self, "rings", rings)
        for m, (a, b) in enumerate(zip(rings, rings[1:]), 1):
            if not all(sa <= sb for sa, sb in zip(a.stride, b.stride)) or a.stride == b.stride:
                raise ConfigError(f"ring {m + 1}: stride {b.stride} must grow from {a.stride}")
            for ax in range(3):
                if b.start[ax] > 0 and a.end[ax] > b.start[ax]:
                    raise ConfigError(
                        f"ring {m + 1}: R_start {b.start} overlaps previous R_end {a.end}")

    def to_dict(self) -> dict:
        return {"rings": [r.to_dict() for r in self.rings]}

    @classmethod
    def from_dict(cls, d) -> "DilatedConfig":
        rings = d["rings"] if isinstance(d, dict) else d
        return cls(tuple(RangeSpec(**r) for r in rings))

    @classmethod
    def load(cls, path) -> "DilatedConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: malformed dilated config: {exc}") from exc


def _cfg(*rows) -> DilatedConfig:
    return DilatedConfig(tuple(RangeSpec(*r) for r in rows))


# Dilated Attention settings per backbone module group (KITTI).
KITTI_DILATED = {
    "1": _cfg(((2, 2, 0), (5, 5, 3), (1, 1, 1)),
              ((5, 5, 0), (25, 25, 15), (5, 5, 2)),
              ((25, 25, 0), (125, 125, 15), (25, 25, 3))),
    "2-4": _cfg(((2, 2, 0), (4, 4, 3), (1, 1, 1)),
                ((4, 4, 0), (12, 12, 8), (3, 3, 2)),
                ((12, 12, 0), (60, 60, 8), (12, 12, 2))),
    "5-7": _cfg(((2, 2, 0), (3, 3, 2), (1, 1, 1)),
                ((3, 3, 0), (8, 8, 4), (2, 2, 1)),
                ((8, 8, 0), (32, 32, 4), (8, 8, 1))),
    "8-9": _cfg(((2, 2, 0), (4, 4, 3), (1, 1, 1)),
                ((4, 4, 0), (16, 16, 5), (2, 2, 1))),
}


def kitti_config_for_module(module: int) -> DilatedConfig:
    """Dilated config of backbone module ``module`` (1-based)."""
    for key, cfg in KITTI_DILATED.items():
        lo, _, hi = key.partition("-")
        if int(lo) <= module <= int(hi or lo):
            return cfg
    raise ValueError(f"no dilated config for module {module}")


def lattice_offsets(start, end, stride) -> np.ndarray:
    """Points ``start + k * stride`` inside the closed box ``[start, end]``, lexicographic."""
    start, end, stride = (np.asarray(x, dtype=np.int64) for x in (start, end, stride))
    if (stride < 1).any():
        raise ValueError(f"stride must be >= 1, got {stride}")
    if (start > end).any():
        return np.empty((0, 3), dtype=np.int64)
    axes = [np.arange(start[a], end[a] + 1, stride[a]) for a in range(3)]
    grid = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grid], axis=1)


def ring_offsets(ring: RangeSpec) -> np.ndarray:
    """Candidate offsets of one dilated ring, lexicographic.

    The subtraction runs on candidate offsets rather than on looked-up
    voxels; both lattices share the stride, so filtering by occupancy
    commutes with the difference. A zero start component keeps the start
    window flat on that axis, so only the ``o == 0`` plane is removed there.
    """
    end = np.asarray(ring.end)
    start = np.asarray(ring.start)
    outer = lattice_offsets(-end, end, ring.stride)
    inner = lattice_offsets(-start, start, ring.stride)
    if len(inner) == 0:
        return outer
    return outer[~_rows_in(outer, inner)]


def _rows_in(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Mask of rows of ``a`` present in ``b``."""
    view = np.dtype((np.void, 3 * 8))
    av = np.ascontiguousarray(a, dtype=np.int64).view(view).ravel()
    bv = np.ascontiguousarray(b, dtype=np.int64).view(view).ravel()
    return np.isin(av, bv)


@lru_cache(maxsize=64)
def _candidates_cached(config: DilatedConfig | None, r_local, include_local):
    groups = []
    if include_local:
        r = np.asarray(r_local)
        groups.append(lattice_offsets(-r, r, (1, 1, 1)))
    if config is not None:
        groups.extend(ring_offsets(ring) for ring in config.rings)
    kept, labels = [], []
    seen = np.empty((0, 3), dtype=np.int64)
    for g, offs in enumerate(groups):
        fresh = offs[~_rows_in(offs, seen)] if len(seen) else offs
        kept.append(fresh)
        labels.append(np.full(len(fresh), g, dtype=np.int64))
        seen = np.concatenate([seen, fresh])
    offsets = np.concatenate(kept) if kept else np.empty((0, 3), dtype=np.int64)
    group = np.concatenate(labels) if labels else np.empty(0, dtype=np.int64)
    offsets.setflags(write=False)
    group.setflags(write=False)
    return offsets, group


def candidate_offsets(config: DilatedConfig | None = None, r_local=R_LOCAL,
                      include_local: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Ordered, de-duplicated candidate offsets and their group label.

    Label 0 is the local window when ``include_local``; rings follow in
    config order.
    """
    return _candidates_cached(config, tuple(int(c) for c in r_local), bool(include_local))


def _hits(v_i, table: VoxelHashTable, offsets: np.ndarray, extent=None):
    cand = np.asarray(v_i, dtype=np.int64).reshape(1, 3) + offsets
    inside = (cand >= 0).all(axis=1)
    if extent is not None:
        inside &= (cand < np.asarray(extent)).all(axis=1)
    cand = cand[inside]
    rows = lookup_rows(table, cand)
    hit = rows >= 0
    return rows[hit], cand[hit], np.flatnonzero(inside)[hit]


def _as_list(rows, cand):
    return [(int(j), tuple(int(c) for c in v)) for j, v in zip(rows, cand)]


def local_range(v_i, table: VoxelHashTable, r_local=R_LOCAL, extent=None) -> list:
    """Non-empty voxels ``(j, v_j)`` in the closed window ``v_i +- r_local``."""
    offsets, _ = candidate_offsets(None, r_local, True)
    rows, cand, _ = _hits(v_i, table, offsets, extent)
    return _as_list(rows, cand)


def dilated_range(v_i, table: VoxelHashTable, config: DilatedConfig, extent=None) -> list:
    """Non-empty voxels ``(j, v_j)`` of the union of ``config``'s rings."""
    offsets, _ = candidate_offsets(config, R_LOCAL, False)
    rows, cand, _ = _hits(v_i, table, offsets, extent)
    return _as_list(rows, cand)


@dataclass
class AttendSet:
    """Attendees of one query: row numbers and offsets ``v_j - v_i``."""

    query_row: int | None
    query_index: tuple[int, int, int]
    rows: np.ndarray
    offsets: np.ndarray
    groups: np.ndarray
    budget: int
    n_candidates_hit: int

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def truncated(self) -> bool:
        return self.n_candidates_hit > len(self.rows)

    @property
    def empty(self) -> bool:
        return len(self.rows) == 0


def assemble_attend_set(v_i, table: VoxelHashTable, config: DilatedConfig | None,
                        budget: int = DEFAULT_BUDGET, r_local=R_LOCAL, extent=None,
                        query_row: int | None = None) -> AttendSet:
    """Local hits, then ring hits in config order, truncated to ``budget``."""
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    offsets, group = candidate_offsets(config, r_local, True)
    rows, cand, pos = _hits(v_i, table, offsets, extent)
    n_hit = len(rows)
    rows, cand, pos = rows[:budget], cand[:budget], pos[:budget]
    v = tuple(int(c) for c in v_i)
    return AttendSet(query_row, v, rows, cand - np.asarray(v), group[pos], int(budget), n_hit)


@numba.njit(cache=True, parallel=True)
def _gather(keys, values, shift, anchors, offsets, extent, budget, out_rows, counts):
    n_slots_mask = keys.shape[0] - 1
    for q in numba.prange(anchors.shape[0]):
        ax, ay, az = anchors[q, 0], anchors[q, 1], anchors[q, 2]
        n = 0
        for c in range(offsets.shape[0]):
            x = ax + offsets[c, 0]
            y = ay + offsets[c, 1]
            z = az + offsets[c, 2]
            if x < 0 or y < 0 or z < 0 or x >= extent[0] or y >= extent[1] or z >= extent[2]:
                continue
            k = _pack(x, y, z)
            s = _home(k, shift)
            while True:
                cur = keys[s]
                if cur == k:
                    out_rows[q, n] = values[s]
                    n += 1
                    break
                if cur == EMPTY:
                    break
                s = (s + 1) & n_slots_mask
            if n == budget:
                break
        counts[q] = n


def gather_attend_rows(anchors, table: VoxelHashTable, offsets: np.ndarray,
                       budget: int = DEFAULT_BUDGET, extent=None) -> tuple[np.ndarray, np.ndarray]:
    """Batched assembly for many queries.

    Returns ``rows`` of shape (N, budget), padded with -1, and the number of
    valid attendees per query. Row ``q`` equals ``assemble_attend_set`` for
    ``anchors[q]`` with the same candidate offsets.
    """
    anchors = np.ascontiguousarray(np.asarray(anchors, dtype=np.int64).reshape(-1, 3))
    offs = np.ascontiguousarray(offsets, dtype=np.int64)
    if extent is None:
        ext = np.full(3, AXIS_LIMIT, dtype=np.int64)
    else:
        ext = np.minimum(np.asarray(extent, dtype=np.int64), AXIS_LIMIT)
    rows = np.full((len(anchors), budget), -1, dtype=np.int64)
    counts = np.zeros(len(anchors), dtype=np.int64)
    if len(anchors):
        _gather(table.keys, table.values, table.shift, anchors, offs, ext, int(budget),
                rows, counts)
    return rows, counts
