"""scikit-learn style wrappers so the backbone composes with ``Pipeline``.

>>> from sklearn.pipeline import make_pipeline
>>> pipe = make_pipeline(Voxelizer(extent=(64, 64, 16)), VoxelTransformerBackbone(), BEVProjector())
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .backbone import (BackboneConfig, BackboneParams, ModuleSpec, backbone_forward,
                       bev_project, default_modules)
from .grid import GridSpec, SparseVoxelSet, voxelize
from .hashing import DEFAULT_N_HASH
from .io import load_weights
from .ranges import DEFAULT_BUDGET, R_LOCAL


def check_points(X) -> np.ndarray:
    """Validate a point array: 2-D, finite, 3 or 4 columns."""
    X = check_array(X, dtype=np.float64, ensure_min_samples=1)
    if X.shape[1] not in (3, 4):
        raise ValueError(f"points need 3 or 4 columns, got {X.shape[1]}")
    return X


def check_voxel_set(X, n_channels: int | None = None) -> SparseVoxelSet:
    if not isinstance(X, SparseVoxelSet):
        raise TypeError(f"expected a SparseVoxelSet, got {type(X).__name__}")
    X.validate()
    if n_channels is not None and X.n_channels != n_channels:
        raise ValueError(f"expected {n_channels} channels, got {X.n_channels}")
    if not np.isfinite(X.features).all():
        raise ValueError("voxel features must be finite")
    return X


class Voxelizer(TransformerMixin, BaseEstimator):
    """Points (N, 3|4) -> :class:`SparseVoxelSet` with mean-point features."""

    def __init__(self, origin=(0.0, -40.0, -3.0), voxel_size=(0.05, 0.05, 0.1),
                 extent=(1408, 1600, 40)):
        self.origin = origin
        self.voxel_size = voxel_size
        self.extent = extent

    def fit(self, X=None, y=None):
        self.grid_ = GridSpec(self.origin, self.voxel_size, self.extent)
        return self

    def transform(self, X):
        check_is_fitted(self, "grid_")
        return voxelize(check_points(X), self.grid_)


class VoxelTransformerBackbone(TransformerMixin, BaseEstimator):
    """Sparse voxel transformer backbone over a :class:`SparseVoxelSet`.

    ``fit`` builds the configuration for the input grid and initializes (or
    loads) parameters; with ``norm="running"`` it also stores per-site
    normalization statistics from ``X``. ``transform`` returns the final
    voxel set, or all scales when ``return_all_scales`` is set.
    """

    def __init__(self, n_heads=4, budget=DEFAULT_BUDGET, n_hash=DEFAULT_N_HASH,
                 r_local=R_LOCAL, ffn_ratio=4, norm="batch", feature_source="center",
                 modules=None, weights=None, seed=0, return_all_scales=False):
        self.n_heads = n_heads
        self.budget = budget
        self.n_hash = n_hash
        self.r_local = r_local
        self.ffn_ratio = ffn_ratio
        self.norm = norm
        self.feature_source = feature_source
        self.modules = modules
        self.weights = weights
        self.seed = seed
        self.return_all_scales = return_all_scales

    def _config(self, grid: GridSpec) -> BackboneConfig:
        modules = self.modules
        if modules is None:
            modules = default_modules()
        else:
            modules = [m if isinstance(m, ModuleSpec) else ModuleSpec(**m) for m in modules]
        return BackboneConfig(modules=modules, grid=grid, n_heads=self.n_heads,
                              budget=self.budget, n_hash=self.n_hash, r_local=self.r_local,
                              ffn_ratio=self.ffn_ratio, norm=self.norm,
                              feature_source=self.feature_source, seed=self.seed)

    def fit(self, X, y=None):
        X = check_voxel_set(X)
        self.config_ = self._config(X.grid)
        if self.weights is None:
            self.params_ = BackboneParams.init(self.config_)
        elif isinstance(self.weights, BackboneParams):
            self.params_ = self.weights
        else:
            self.params_ = BackboneParams.from_tensors(load_weights(self.weights), self.config_)
        if self.norm == "running":
            backbone_forward(X, self.config_, self.params_, norm="calibrate")
        self.n_features_out_ = self.config_.modules[-1].c_out
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = check_voxel_set(X)
        scales = backbone_forward(X, self.config_, self.params_)
        return scales if self.return_all_scales else scales[-1]


class BEVProjector(TransformerMixin, BaseEstimator):
    """Final voxel set -> dense bird's-eye-view array (X, Y, Z * C)."""

    def fit(self, X=None, y=None):
        return self

    def __sklearn_is_fitted__(self):
        return True  # stateless

    def transform(self, X):
        return bev_project(check_voxel_set(X))
