"""The DN defensive layer and the normalization-ablation transforms.

DN standardizes every sample position of the raw window across the rows of
a batch, then applies a learned scalar affine map. It is inserted in front of
the first convolution and trained together with the rest of the network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import autodiff as ad
from .errors import ConfigurationError, DefenseError
from .models import NORM_KINDS, ModelSpec, dn


@dataclass(frozen=True)
class DNParams:
    gamma: float = 1.0
    dn_shift: float = 0.0
    eps_stab: float = 1e-5

    def __post_init__(self):
        if not self.eps_stab > 0:
            raise ConfigurationError(f"eps_stab must be positive, got {self.eps_stab}")
        if not (np.isfinite(self.gamma) and np.isfinite(self.dn_shift)):
            raise ConfigurationError("gamma and dn_shift must be finite")


def dn_forward(batch, params=None):
    """Apply DN with batch statistics to an (m, L) batch.

    Accepts an ndarray (returns an ndarray) or a :class:`~vibattack.autodiff.Tensor`
    (returns a Tensor that participates in backpropagation).
    """
    params = params or DNParams()
    as_tensor = isinstance(batch, ad.Tensor)
    x = batch if as_tensor else ad.Tensor(batch)
    if x.data.ndim != 2:
        raise ConfigurationError(f"dn_forward expects an (m, L) batch, got shape {x.shape}")
    if x.shape[0] < 2:
        raise ConfigurationError("DN batch statistics need m >= 2 rows; use stored statistics for single windows")
    gamma = np.full((1, 1), params.gamma)
    shift = np.full((1, 1), params.dn_shift)
    out = ad.batchnorm(x, gamma, shift, params.eps_stab, axes=(0,))
    return out if as_tensor else out.data


class DataNormalization(TransformerMixin, BaseEstimator):
    """DN as a standalone transformer.

    ``fit`` stores per-position mean and variance; ``transform`` uses the
    batch being transformed when ``use_batch_stats`` is true, otherwise the
    stored statistics.
    """

    def __init__(self, gamma=1.0, dn_shift=0.0, eps_stab=1e-5, use_batch_stats=True):
        self.gamma = gamma
        self.dn_shift = dn_shift
        self.eps_stab = eps_stab
        self.use_batch_stats = use_batch_stats

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_min_samples=2)
        self.mean_ = X.mean(axis=0)
        self.var_ = X.var(axis=0)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        X = check_array(X, dtype=np.float64)
        params = DNParams(self.gamma, self.dn_shift, self.eps_stab)
        if self.use_batch_stats:
            return dn_forward(X, params)
        check_is_fitted(self)
        return self.gamma * (X - self.mean_) / np.sqrt(self.var_ + self.eps_stab) + self.dn_shift


def attach_defense(spec, eps_stab=1e-5):
    """Insert a DN layer in front of ``spec``'s first layer; the result must be retrained."""
    if spec.layers and spec.layers[0].kind == "dn":
        raise DefenseError(f"{spec.name} already starts with a DN layer")
    if not any(layer.kind == "conv" for layer in spec.layers):
        raise DefenseError(f"{spec.name} has no convolutional layer to protect")
    return ModelSpec(f"{spec.name}+dn", (dn(eps_stab),) + spec.layers)


def ablate_normalization(spec):
    """Drop every batchnorm/DN layer from ``spec``; the result must be retrained."""
    if not spec.uses_normalization:
        raise DefenseError(f"{spec.name} has no normalization layers to remove")
    return ModelSpec(f"{spec.name}-nonorm", tuple(layer for layer in spec.layers if layer.kind not in NORM_KINDS))
