"""Open-addressing voxel hash table (Fast Voxel Query).

Keys are packed 3D voxel indices, values are row numbers into the sparse
index array. Collisions are resolved by linear probing with wraparound. The
table has two phases: a build phase that claims slots, then a read-only
query phase in which any number of threads may look up concurrently.
"""

from __future__ import annotations

import csv
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numba
import numpy as np

from .exceptions import TableFullError

AXIS_BITS = 20
AXIS_LIMIT = 1 << AXIS_BITS
EMPTY = np.uint64(0xFFFFFFFFFFFFFFFF)
MISS = -1
DEFAULT_N_HASH = 400_000

_FIB = np.uint64(0x9E3779B97F4A7C15)
_MASK20 = np.uint64(AXIS_LIMIT - 1)


def pack_key(v) -> int:
    """Pack a 3-index into 60 bits: x | y << 20 | z << 40."""
    x, y, z = (int(c) for c in v)
    for c in (x, y, z):
        if not 0 <= c < AXIS_LIMIT:
            raise ValueError(f"index component {c} outside [0, {AXIS_LIMIT})")
    return x | (y << AXIS_BITS) | (z << (2 * AXIS_BITS))


def unpack_key(key: int) -> tuple[int, int, int]:
    key = int(key)
    m = AXIS_LIMIT - 1
    return key & m, (key >> AXIS_BITS) & m, (key >> (2 * AXIS_BITS)) & m


def pack_keys(indices: np.ndarray) -> np.ndarray:
    v = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
    if len(v) and ((v < 0).any() or (v >= AXIS_LIMIT).any()):
        raise ValueError(f"index components must lie in [0, {AXIS_LIMIT})")
    u = v.astype(np.uint64)
    return u[:, 0] | (u[:, 1] << np.uint64(20)) | (u[:, 2] << np.uint64(40))


def unpack_keys(keys: np.ndarray) -> np.ndarray:
    k = np.asarray(keys, dtype=np.uint64)
    return np.stack([k & _MASK20, (k >> np.uint64(20)) & _MASK20,
                     (k >> np.uint64(40)) & _MASK20], axis=1).astype(np.int64)


def slot_count(n_hash: int) -> int:
    """Round a requested table size up to a power of two."""
    n = max(int(n_hash), 2)
    return 1 << (n - 1).bit_length()


@numba.njit(cache=True, inline="always")
def _pack(x, y, z):
    return np.uint64(x) | (np.uint64(y) << np.uint64(20)) | (np.uint64(z) << np.uint64(40))


@numba.njit(cache=True, inline="always")
def _home(key, shift):
    # multiply-shift: the top log2(n_slots) bits of key * golden-ratio constant
    return np.int64((key * np.uint64(0x9E3779B97F4A7C15)) >> np.uint64(shift))


@numba.njit(cache=True)
def _insert_all(keys, values, packed, shift):
    n_slots = keys.shape[0]
    mask = n_slots - 1
    for j in range(packed.shape[0]):
        k = packed[j]
        s = _home(k, shift)
        while keys[s] != EMPTY:
            if keys[s] == k:
                return j  # duplicate row
            s = (s + 1) & mask
        keys[s] = k
        values[s] = j
    return -1


@numba.njit(cache=True)
def _find(keys, values, k, shift):
    mask = keys.shape[0] - 1
    s = _home(k, shift)
    probes = 1
    while True:
        cur = keys[s]
        if cur == k:
            return values[s], probes
        if cur == EMPTY:
            return -1, probes
        s = (s + 1) & mask
        probes += 1


@numba.njit(cache=True, parallel=True)
def _lookup_many(keys, values, shift, cand, rows, probes):
    for c in numba.prange(cand.shape[0]):
        x, y, z = cand[c, 0], cand[c, 1], cand[c, 2]
        if x < 0 or y < 0 or z < 0 or x >= AXIS_LIMIT or y >= AXIS_LIMIT or z >= AXIS_LIMIT:
            rows[c] = -1
            probes[c] = 0
        else:
            rows[c], probes[c] = _find(keys, values, _pack(x, y, z), shift)


@numba.njit(cache=True, parallel=True, fastmath=True)
def _scan_many(stored, cand_keys, rows):
    n = stored.shape[0]
    for c in numba.prange(cand_keys.shape[0]):
        k = cand_keys[c]
        r = -1
        # branch-free so the inner loop vectorizes; stored keys are unique
        for j in range(n):
            r = j if stored[j] == k else r
        rows[c] = r


@dataclass
class VoxelHashTable:
    """Slot arrays of an open-addressing table; see :func:`build_table`."""

    keys: np.ndarray
    values: np.ndarray
    count: int
    n_hash: int

    @property
    def n_slots(self) -> int:
        return len(self.keys)

    @property
    def shift(self) -> int:
        return 64 - (self.n_slots.bit_length() - 1)

    @property
    def load_factor(self) -> float:
        return self.count / self.n_slots

    def as_tensor(self) -> np.ndarray:
        """The table as a 2 x n_slots array: keys row, values row (EMPTY shown as -1)."""
        k = self.keys.astype(np.int64)
        k[self.keys == EMPTY] = -1
        return np.stack([k, self.values])

    def lookup(self, v) -> int:
        return lookup(self, v)

    def lookup_rows(self, candidates) -> np.ndarray:
        return lookup_rows(self, candidates)

    def probe_lengths(self, candidates=None) -> np.ndarray:
        """Slots examined per lookup; defaults to every stored key."""
        if candidates is None:
            candidates = unpack_keys(self.keys[self.keys != EMPTY])
        return _lookup(self, candidates)[1]

    def stats(self) -> dict:
        probes = self.probe_lengths()
        return {
            "n_hash": int(self.n_hash),
            "n_slots": int(self.n_slots),
            "count": int(self.count),
            "load_factor": float(self.load_factor),
            "mean_probe": float(probes.mean()) if len(probes) else 0.0,
            "max_probe": int(probes.max()) if len(probes) else 0,
        }

    def dump_csv(self, path) -> None:
        """Write occupied slots as ``slot,key,value`` rows."""
        occupied = np.flatnonzero(self.keys != EMPTY)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["slot", "key", "value"])
            for s in occupied:
                w.writerow([int(s), int(self.keys[s]), int(self.values[s])])


def _empty_table(n_hash: int, n_rows: int) -> VoxelHashTable:
    if n_rows >= n_hash:
        raise TableFullError(f"table over-full: {n_rows} keys for N_hash={n_hash}")
    n_slots = slot_count(n_hash)
    return VoxelHashTable(
        keys=np.full(n_slots, EMPTY, dtype=np.uint64),
        values=np.full(n_slots, MISS, dtype=np.int64),
        count=0,
        n_hash=int(n_hash),
    )


def build_table(indices, n_hash: int = DEFAULT_N_HASH) -> VoxelHashTable:
    """Insert every row of ``indices`` with its row number as value."""
    v = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
    table = _empty_table(n_hash, len(v))
    packed = pack_keys(v)
    dup = _insert_all(table.keys, table.values, packed, table.shift)
    if dup >= 0:
        raise ValueError(f"duplicate voxel index {tuple(v[dup])} at row {dup}")
    table.count = len(v)
    return table


class _SlotClaims:
    """Compare-and-swap on key slots, emulated with striped locks."""

    def __init__(self, keys: np.ndarray, n_stripes: int = 64):
        self.keys = keys
        self._locks = [threading.Lock() for _ in range(n_stripes)]

    def cas(self, slot: int, expected, new):
        with self._locks[slot % len(self._locks)]:
            cur = self.keys[slot]
            if cur == expected:
                self.keys[slot] = new
            return cur


def build_table_concurrent(indices, n_hash: int = DEFAULT_N_HASH,
                           n_threads: int = 4) -> VoxelHashTable:
    """Multi-threaded build: each insert claims its key slot by CAS, then writes the value.

    Slot layout depends on thread interleaving; lookup results do not.
    """
    v = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
    table = _empty_table(n_hash, len(v))
    packed = pack_keys(v)
    claims = _SlotClaims(table.keys)
    mask = table.n_slots - 1
    homes = ((packed * _FIB) >> np.uint64(table.shift)).astype(np.int64)
    duplicates = []

    def insert(rows):
        for j in rows:
            k = packed[j]
            s = int(homes[j])
            while True:
                prev = claims.cas(s, EMPTY, k)
                if prev == EMPTY:
                    table.values[s] = j
                    break
                if prev == k:
                    duplicates.append(j)
                    break
                s = (s + 1) & mask

    chunks = np.array_split(np.arange(len(v)), max(1, n_threads))
    with ThreadPoolExecutor(max_workers=max(1, n_threads)) as pool:
        list(pool.map(insert, chunks))
    if duplicates:
        j = min(duplicates)
        raise ValueError(f"duplicate voxel index {tuple(v[j])} at row {j}")
    table.count = len(v)
    return table


def _lookup(table: VoxelHashTable, candidates) -> tuple[np.ndarray, np.ndarray]:
    cand = np.ascontiguousarray(np.asarray(candidates, dtype=np.int64).reshape(-1, 3))
    rows = np.empty(len(cand), dtype=np.int64)
    probes = np.empty(len(cand), dtype=np.int64)
    if len(cand):
        _lookup_many(table.keys, table.values, table.shift, cand, rows, probes)
    return rows, probes


def lookup(table: VoxelHashTable, v) -> int:
    """Row of ``v`` in the indexed array, or ``MISS`` (-1) if ``v`` is empty."""
    return int(_lookup(table, np.asarray(v, dtype=np.int64).reshape(1, 3))[0][0])


def lookup_rows(table: VoxelHashTable, candidates) -> np.ndarray:
    """Vectorized :func:`lookup`: one row number (or -1) per candidate."""
    return _lookup(table, candidates)[0]


def batch_lookup(table: VoxelHashTable, candidates) -> tuple[np.ndarray, np.ndarray]:
    """Hits among ``candidates`` as ``(hit_indices, rows)``, in candidate order."""
    cand = np.asarray(candidates, dtype=np.int64).reshape(-1, 3)
    rows = lookup_rows(table, cand)
    hit = rows >= 0
    return cand[hit], rows[hit]


def scan_lookup(indices, candidates) -> np.ndarray:
    """Brute-force O(N_sparse) per-candidate search; the reference for the table."""
    v = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
    cand = np.asarray(candidates, dtype=np.int64).reshape(-1, 3)
    rows = np.full(len(cand), MISS, dtype=np.int64)
    if len(cand) == 0 or len(v) == 0:
        return rows
    ok = ((cand >= 0) & (cand < AXIS_LIMIT)).all(axis=1)
    cand_keys = np.full(len(cand), EMPTY, dtype=np.uint64)
    cand_keys[ok] = pack_keys(cand[ok])
    _scan_many(pack_keys(v), cand_keys, rows)
    return rows
