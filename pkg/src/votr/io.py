"""Weight files and JSON reports.

Weight file layout ("votrw-v1")::

    8 bytes   magic  b"VOTRW\\x00v1"
    8 bytes   little-endian uint64 header length H
    H bytes   UTF-8 JSON header
    ...       little-endian float32 payload

The header lists every tensor as ``{"name", "shape", "offset"}`` with
``offset`` counted in float32 elements from the start of the payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .exceptions import ConfigError

WEIGHTS_FORMAT = "votrw-v1"
WEIGHTS_MAGIC = b"VOTRW\x00v1"
REPORT_SCHEMA_VERSION = "votr-report-v1"
BENCH_SCHEMA_VERSION = "votr-bench-v1"


def save_weights(path, tensors: dict[str, np.ndarray]) -> None:
    entries, offset = [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = json.dumps({"format": WEIGHTS_FORMAT, "dtype": "<f4", "count": offset,
                         "tensors": entries}).encode()
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_weights(path) -> dict[str, np.ndarray]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read weights {path}: {exc}") from exc
    if raw[:8] != WEIGHTS_MAGIC or len(raw) < 16:
        raise ConfigError(f"{path}: not a {WEIGHTS_FORMAT} file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + hlen])
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: corrupt header: {exc}") from exc
    if header.get("format") != WEIGHTS_FORMAT:
        raise ConfigError(f"{path}: unsupported format {header.get('format')!r}")
    payload = np.frombuffer(raw[16 + hlen:], dtype="<f4")
    if len(payload) != header["count"]:
        raise ConfigError(f"{path}: payload has {len(payload)} floats, header says {header['count']}")
    out = {}
    for t in header["tensors"]:
        size = int(np.prod(t["shape"], dtype=np.int64))
        out[t["name"]] = payload[t["offset"]:t["offset"] + size].astype(np.float64).reshape(t["shape"])
    return out


_STAGE_SCHEMA = {
    "type": "object",
    "required": ["module", "kind", "n_in", "n_out", "n_dropped", "attendees_mean",
                 "attendees_max", "table"],
    "properties": {
        "module": {"type": "integer", "minimum": 1},
        "kind": {"enum": ["sparse", "submanifold"]},
        "n_in": {"type": "integer", "minimum": 0},
        "n_out": {"type": "integer", "minimum": 0},
        "n_dropped": {"type": "integer", "minimum": 0},
        "attendees_mean": {"type": "number", "minimum": 0},
        "attendees_max": {"type": "integer", "minimum": 0},
        "table": {"type": "object"},
    },
}

RUN_REPORT_SCHEMA = {
    "type": "object",
    "required": ["schema", "input", "seed", "budget", "scale_counts", "scale_channels",
                 "modules", "attendee_histogram", "checksums", "timing"],
    "properties": {
        "schema": {"const": REPORT_SCHEMA_VERSION},
        "input": {"type": "string"},
        "seed": {"type": ["integer", "null"]},
        "budget": {"type": "integer", "minimum": 1},
        "scale_counts": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "scale_channels": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "modules": {"type": "array", "items": _STAGE_SCHEMA},
        "attendee_histogram": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "checksums": {"type": "object", "additionalProperties": {"type": "string"}},
        "timing": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0}},
    },
}

BENCH_REPORT_SCHEMA = {
    "type": "object",
    "required": ["schema", "n_sparse", "n_queries", "candidates_per_query", "n_candidates",
                 "n_hits", "n_hash", "seed", "verified", "table", "timing"],
    "properties": {
        "schema": {"const": BENCH_SCHEMA_VERSION},
        "n_sparse": {"type": "integer", "minimum": 1},
        "n_queries": {"type": "integer", "minimum": 1},
        "candidates_per_query": {"type": "integer", "minimum": 1},
        "n_candidates": {"type": "integer", "minimum": 1},
        "n_hits": {"type": "integer", "minimum": 0},
        "n_hash": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
        "verified": {"const": True},
        "table": {"type": "object"},
        "timing": {
            "type": "object",
            "required": ["hash_seconds", "scan_seconds", "speedup"],
            "properties": {
                "hash_seconds": {"type": "number", "exclusiveMinimum": 0},
                "scan_seconds": {"type": "number", "exclusiveMinimum": 0},
                "speedup": {"type": "number", "exclusiveMinimum": 0},
            },
        },
    },
}


@dataclass
class RunReport:
    input: str
    seed: int | None
    budget: int
    scale_counts: list[int]
    scale_channels: list[int]
    modules: list[dict]
    attendee_histogram: list[int]
    checksums: dict[str, str]
    timing: dict[str, float] = field(default_factory=dict)
    schema: str = REPORT_SCHEMA_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, include_timing: bool = True) -> str:
        d = self.to_dict()
        if not include_timing:
            d["timing"] = {}
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        d = json.loads(text)
        jsonschema.validate(d, RUN_REPORT_SCHEMA)
        return cls(**d)


@dataclass
class BenchReport:
    n_sparse: int
    n_queries: int
    candidates_per_query: int
    n_candidates: int
    n_hits: int
    n_hash: int
    seed: int
    verified: bool
    table: dict
    timing: dict[str, float]
    schema: str = BENCH_SCHEMA_VERSION

    @property
    def speedup(self) -> float:
        return self.timing["speedup"]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BenchReport":
        d = json.loads(text)
        jsonschema.validate(d, BENCH_REPORT_SCHEMA)
        return cls(**d)
