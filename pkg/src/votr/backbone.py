"""Submanifold and sparse voxel modules composed into the 9-module backbone."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import AttentionWeights, attend_padded, attend_sparse_padded
from .exceptions import ConfigError, EmptyVoxelSetError
from .grid import GridSpec, SparseVoxelSet, downsample_indices, init_features, voxelize
from .hashing import DEFAULT_N_HASH, VoxelHashTable, build_table
from .ranges import (DEFAULT_BUDGET, R_LOCAL, DilatedConfig, candidate_offsets,
                     gather_attend_rows, kitti_config_for_module)

logger = logging.getLogger(__name__)

CONFIG_FORMAT = "votr-config-v1"
NORM_EPS = 1e-5


@dataclass
class BatchNorm:
    """Per-channel normalization over the voxels of one set."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def identity(cls, d: int) -> "BatchNorm":
        return cls(np.ones(d), np.zeros(d), np.zeros(d), np.ones(d))

    def normalize(self, x: np.ndarray, mode: str = "batch") -> np.ndarray:
        """Standardized ``x`` before the affine step.

        ``"batch"`` uses the statistics of ``x``; ``"running"`` the stored
        ones; ``"calibrate"`` behaves like ``"batch"`` and also stores them.
        """
        if mode in ("batch", "calibrate"):
            mean, var = x.mean(axis=0), x.var(axis=0)
            if mode == "calibrate":
                self.running_mean, self.running_var = mean.copy(), var.copy()
        elif mode == "running":
            mean, var = self.running_mean, self.running_var
        else:
            raise ValueError(f"unknown norm mode {mode!r}")
        return (x - mean) / np.sqrt(var + NORM_EPS)

    def __call__(self, x: np.ndarray, mode: str = "batch") -> np.ndarray:
        return self.normalize(x, mode) * self.gamma + self.beta


@dataclass
class ModuleSpec:
    kind: str  # "sparse" or "submanifold"
    c_in: int
    c_out: int
    dilated: DilatedConfig
    stride: int = 2

    def __post_init__(self):
        if self.kind not in ("sparse", "submanifold"):
            raise ConfigError(f"unknown module kind {self.kind!r}")
        if self.kind == "submanifold" and self.c_in != self.c_out:
            raise ConfigError("submanifold modules keep their channel count")
        if isinstance(self.dilated, dict):
            self.dilated = DilatedConfig.from_dict(self.dilated)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "c_in": self.c_in, "c_out": self.c_out,
             "dilated": self.dilated.to_dict()}
        if self.kind == "sparse":
            d["stride"] = self.stride
        return d


def default_modules() -> list[ModuleSpec]:
    channels = [(16, 32), (32, 32), (32, 32), (32, 64), (64, 64), (64, 64),
                (64, 64), (64, 64), (64, 64)]
    return [
        ModuleSpec("sparse" if k % 3 == 0 else "submanifold", ci, co,
                   kitti_config_for_module(k + 1))
        for k, (ci, co) in enumerate(channels)
    ]


@dataclass
class BackboneConfig:
    modules: list[ModuleSpec] = field(default_factory=default_modules)
    grid: GridSpec = field(default_factory=GridSpec)
    d_init: int = 16
    n_heads: int = 4
    budget: int = DEFAULT_BUDGET
    n_hash: int = DEFAULT_N_HASH
    r_local: tuple[int, int, int] = R_LOCAL
    ffn_ratio: int = 4
    norm: str = "batch"
    feature_source: str = "center"
    seed: int = 0

    def __post_init__(self):
        self.r_local = tuple(int(c) for c in self.r_local)
        if self.budget < 1:
            raise ConfigError("budget must be >= 1")
        if self.norm not in ("batch", "running"):
            raise ConfigError(f"norm must be 'batch' or 'running', got {self.norm!r}")
        c = self.d_init
        for k, m in enumerate(self.modules, 1):
            if m.c_in != c:
                raise ConfigError(f"module {k} expects {m.c_in} channels, previous stage gives {c}")
            if m.c_in % self.n_heads:
                raise ConfigError(f"module {k}: {m.c_in} channels not divisible by {self.n_heads} heads")
            c = m.c_out

    def to_dict(self) -> dict:
        return {
            "format": CONFIG_FORMAT,
            "grid": self.grid.to_dict(),
            "d_init": self.d_init,
            "n_heads": self.n_heads,
            "budget": self.budget,
            "n_hash": self.n_hash,
            "r_local": list(self.r_local),
            "ffn_ratio": self.ffn_ratio,
            "norm": self.norm,
            "feature_source": self.feature_source,
            "seed": self.seed,
            "modules": [m.to_dict() for m in self.modules],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        fmt = d.pop("format", CONFIG_FORMAT)
        if fmt != CONFIG_FORMAT:
            raise ConfigError(f"unsupported config format {fmt!r}")
        try:
            if "grid" in d:
                d["grid"] = GridSpec.from_dict(d["grid"])
            if "modules" in d:
                d["modules"] = [ModuleSpec(**m) for m in d["modules"]]
            return cls(**d)
        except (TypeError, KeyError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"malformed backbone config: {exc}") from exc

    @classmethod
    def load(cls, path) -> "BackboneConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)

    def dump(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text


@dataclass
class ModuleParams:
    attention: AttentionWeights
    ffn_W1: np.ndarray
    ffn_b1: np.ndarray
    ffn_W2: np.ndarray
    ffn_b2: np.ndarray
    proj_W: np.ndarray
    proj_b: np.ndarray
    norm1: BatchNorm
    norm2: BatchNorm

    @property
    def d_in(self) -> int:
        return self.attention.d_model

    @property
    def d_out(self) -> int:
        return self.proj_W.shape[1]

    @classmethod
    def init(cls, c_in: int, c_out: int, n_heads: int = 4, ffn_ratio: int = 4,
             rng=None) -> "ModuleParams":
        rng = np.random.default_rng(rng)
        d_ff = ffn_ratio * c_in

        def lin(fan_in, fan_out):
            bound = np.sqrt(1.0 / fan_in)
            return (rng.uniform(-bound, bound, (fan_in, fan_out)),
                    rng.uniform(-bound, bound, fan_out))

        attn = AttentionWeights.init(c_in, n_heads, rng)
        W1, b1 = lin(c_in, d_ff)
        W2, b2 = lin(d_ff, c_in)
        Wp, bp = lin(c_in, c_out)
        return cls(attn, W1, b1, W2, b2, Wp, bp, BatchNorm.identity(c_in),
                   BatchNorm.identity(c_in))

    @classmethod
    def zeros(cls, c_in: int, c_out: int, n_heads: int = 4, ffn_ratio: int = 4) -> "ModuleParams":
        d_ff = ffn_ratio * c_in
        z = np.zeros
        return cls(AttentionWeights.zeros(c_in, n_heads), z((c_in, d_ff)), z(d_ff),
                   z((d_ff, c_in)), z(c_in), z((c_in, c_out)), z(c_out),
                   BatchNorm.identity(c_in), BatchNorm.identity(c_in))

    def ffn(self, x: np.ndarray) -> np.ndarray:
        return np.maximum(x @ self.ffn_W1 + self.ffn_b1, 0.0) @ self.ffn_W2 + self.ffn_b2

    def tensors(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {f"{prefix}attn.{k}": v for k, v in self.attention.tensors().items()}
        for name in ("ffn_W1", "ffn_b1", "ffn_W2", "ffn_b2", "proj_W", "proj_b"):
            out[prefix + name] = getattr(self, name)
        for site in ("norm1", "norm2"):
            bn = getattr(self, site)
            for k in ("gamma", "beta", "running_mean", "running_var"):
                out[f"{prefix}{site}.{k}"] = getattr(bn, k)
        return out


@dataclass
class BackboneParams:
    W_init: np.ndarray
    b_init: np.ndarray
    modules: list[ModuleParams]

    @classmethod
    def init(cls, config: BackboneConfig, seed: int | None = None) -> "BackboneParams":
        rng = np.random.default_rng(config.seed if seed is None else seed)
        bound = np.sqrt(1.0 / 3)
        W_init = rng.uniform(-bound, bound, (3, config.d_init))
        b_init = rng.uniform(-bound, bound, config.d_init)
        mods = [ModuleParams.init(m.c_in, m.c_out, config.n_heads, config.ffn_ratio, rng)
                for m in config.modules]
        return cls(W_init, b_init, mods)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"init.W": self.W_init, "init.b": self.b_init}
        for k, m in enumerate(self.modules, 1):
            out.update(m.tensors(f"module{k}."))
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray], config: BackboneConfig) -> "BackboneParams":
        t = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}
        mods = []
        try:
            for k in range(1, len(config.modules) + 1):
                p = f"module{k}."
                attn = AttentionWeights(**{n: t[f"{p}attn.{n}"]
                                           for n in ("W_q", "W_k", "W_v", "W_pos", "W_out")})
                norms = [BatchNorm(*(t[f"{p}{site}.{n}"] for n in
                                     ("gamma", "beta", "running_mean", "running_var")))
                         for site in ("norm1", "norm2")]
                mods.append(ModuleParams(attn, *(t[p + n] for n in
                                                 ("ffn_W1", "ffn_b1", "ffn_W2", "ffn_b2",
                                                  "proj_W", "proj_b")), *norms))
            return cls(t["init.W"], t["init.b"], mods)
        except KeyError as exc:
            raise ConfigError(f"weights missing tensor {exc}") from exc


@dataclass
class ModuleTrace:
    """Bookkeeping of one module forward."""

    kind: str
    n_in: int
    n_out: int
    attendee_counts: np.ndarray
    n_dropped: int = 0
    seconds: float = 0.0
    table_stats: dict | None = None


def _gather_inputs(rows, counts, features, centers, query_centers):
    mask = np.arange(rows.shape[1])[None, :] < counts[:, None]
    safe = np.where(mask, rows, 0)
    f_att = features[safe]
    rel = query_centers[:, None, :] - centers[safe]
    f_att[~mask] = 0.0
    rel[~mask] = 0.0
    return f_att, rel, mask


def _table_for(voxels: SparseVoxelSet, n_hash: int, table: VoxelHashTable | None):
    if table is not None:
        return table
    return build_table(voxels.indices, n_hash)


def submanifold_forward(voxels: SparseVoxelSet, params: ModuleParams, dilated: DilatedConfig | None,
                        budget: int = DEFAULT_BUDGET, n_hash: int = DEFAULT_N_HASH,
                        r_local=R_LOCAL, norm: str = "batch", table: VoxelHashTable | None = None,
                        trace: list | None = None) -> SparseVoxelSet:
    """Location-preserving module: attention, FFN, residuals, norms, projection."""
    if voxels.n_channels != params.d_in:
        raise ValueError(f"module expects {params.d_in} channels, got {voxels.n_channels}")
    t0 = time.perf_counter()
    table = _table_for(voxels, n_hash, table)
    offsets, _ = candidate_offsets(dilated, r_local, True)
    rows, counts = gather_attend_rows(voxels.indices, table, offsets, budget, voxels.grid.extent)
    centers = voxels.centers()
    f = voxels.features
    f_att, rel, mask = _gather_inputs(rows, counts, f, centers, centers)
    attn, _ = attend_padded(f, f_att, rel, mask, params.attention)
    x1 = params.norm1(f + attn, norm)
    x2 = params.norm2(x1 + params.ffn(x1), norm)
    out = x2 @ params.proj_W + params.proj_b
    if trace is not None:
        trace.append(ModuleTrace("submanifold", len(voxels), len(voxels), counts,
                                 seconds=time.perf_counter() - t0, table_stats=table.stats()))
    return SparseVoxelSet(voxels.indices, out, voxels.grid)


def sparse_forward(voxels: SparseVoxelSet, params: ModuleParams, dilated: DilatedConfig | None,
                   budget: int = DEFAULT_BUDGET, n_hash: int = DEFAULT_N_HASH,
                   r_local=R_LOCAL, norm: str = "batch", stride: int = 2,
                   table: VoxelHashTable | None = None,
                   trace: list | None = None) -> SparseVoxelSet:
    """Downsampling module: features at the ``floor(v / stride)`` locations.

    Each output ``v'`` attends over input voxels around input index
    ``stride * v'``, with ranges in input-grid units. The query is the
    max-pooled attendee feature and there is no residual around attention.
    """
    if voxels.n_channels != params.d_in:
        raise ValueError(f"module expects {params.d_in} channels, got {voxels.n_channels}")
    t0 = time.perf_counter()
    table = _table_for(voxels, n_hash, table)
    out_idx = downsample_indices(voxels.indices, stride)
    out_grid = voxels.grid.downsampled(stride)
    offsets, _ = candidate_offsets(dilated, r_local, True)
    rows, counts = gather_attend_rows(out_idx * stride, table, offsets, budget, voxels.grid.extent)
    all_counts = counts
    keep = counts > 0
    n_dropped = int((~keep).sum())
    if n_dropped:
        logger.warning("sparse module dropped %d output locations with no attendees", n_dropped)
        out_idx, rows, counts = out_idx[keep], rows[keep], counts[keep]
    if len(out_idx) == 0:
        if trace is not None:
            trace.append(ModuleTrace("sparse", len(voxels), 0, all_counts, n_dropped,
                                     seconds=time.perf_counter() - t0, table_stats=table.stats()))
        return SparseVoxelSet(out_idx, np.zeros((0, params.d_out)), out_grid)
    q_centers = SparseVoxelSet(out_idx, np.zeros((len(out_idx), 0)), out_grid).centers()
    f_att, rel, mask = _gather_inputs(rows, counts, voxels.features, voxels.centers(), q_centers)
    attn, _ = attend_sparse_padded(f_att, rel, mask, params.attention)
    x1 = params.norm1(attn, norm)
    x2 = params.norm2(x1 + params.ffn(x1), norm)
    out = x2 @ params.proj_W + params.proj_b
    if trace is not None:
        trace.append(ModuleTrace("sparse", len(voxels), len(out_idx), all_counts, n_dropped,
                                 seconds=time.perf_counter() - t0, table_stats=table.stats()))
    return SparseVoxelSet(out_idx, out, out_grid)


def prepare_input(x, config: BackboneConfig, params: BackboneParams) -> SparseVoxelSet:
    """Points or a voxel set -> voxels carrying ``d_init`` initial features."""
    if isinstance(x, SparseVoxelSet):
        voxels = x
    else:
        voxels = voxelize(x, config.grid)
    if voxels.n_channels == 3 and config.d_init != 3:
        voxels = init_features(voxels, params.W_init, params.b_init, config.feature_source)
    if voxels.n_channels != config.d_init:
        raise ValueError(f"expected {config.d_init}-channel input, got {voxels.n_channels}")
    return voxels


def backbone_forward(x, config: BackboneConfig, params: BackboneParams,
                     trace: list | None = None, norm: str | None = None) -> list[SparseVoxelSet]:
    """Run all modules; returns the input scale and the output of each stage.

    A stage is one sparse module followed by its submanifold modules, so the
    default configuration yields 4 voxel sets. ``norm`` overrides the
    configured normalization mode; ``"calibrate"`` stores each site's batch
    statistics as its running statistics.
    """
    voxels = prepare_input(x, config, params)
    if len(params.modules) != len(config.modules):
        raise ConfigError("parameter and config module counts differ")
    scales = [voxels]
    table = None
    for k, (spec, p) in enumerate(zip(config.modules, params.modules), 1):
        kw = dict(budget=config.budget, n_hash=config.n_hash, r_local=config.r_local,
                  norm=norm or config.norm, trace=trace)
        if spec.kind == "sparse":
            if k > 1:
                scales.append(voxels)
            voxels = sparse_forward(voxels, p, spec.dilated, stride=spec.stride, table=table, **kw)
            table = None
            if len(voxels) == 0:
                raise EmptyVoxelSetError(f"module {k} (sparse) produced an empty voxel set")
        else:
            if table is None:
                table = _table_for(voxels, config.n_hash, None)
            voxels = submanifold_forward(voxels, p, spec.dilated, table=table, **kw)
    scales.append(voxels)
    return scales


def bev_project(final: SparseVoxelSet) -> np.ndarray:
    """Dense (X, Y, Z * C) map; z slab ``k`` occupies channels ``k*C:(k+1)*C``."""
    X, Y, Z = final.grid.extent
    C = final.n_channels
    bev = np.zeros((X, Y, Z, C))
    v = final.indices
    bev[v[:, 0], v[:, 1], v[:, 2]] = final.features
    return bev.reshape(X, Y, Z * C)
