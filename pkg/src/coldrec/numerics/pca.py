"""Column standardization followed by PCA projection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    scale: np.ndarray
    components: np.ndarray  # (D, m), orthonormal columns

    @property
    def input_dim(self) -> int:
        return self.components.shape[0]

    @property
    def output_dim(self) -> int:
        return self.components.shape[1]


def fit_pca(X, m: int) -> PcaModel:
    """Fit standardization statistics and the top-``m`` principal directions.

    Components are eigenvectors of the covariance of the standardized rows,
    ordered by descending eigenvalue. Each is sign-fixed so its
    largest-magnitude entry is positive. Zero-variance columns get scale 1.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"fit_pca expects a 2-D matrix, got shape {X.shape}")
    n, d = X.shape
    if n < 2:
        raise ValueError(f"fit_pca needs at least 2 rows, got {n}")
    if d < m:
        raise ValueError(f"fit_pca cannot reduce dimension {d} to larger target {m}")
    if n < m:
        raise ValueError(f"fit_pca needs at least m={m} rows, got {n}")

    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0.0] = 1.0
    Z = (X - mean) / scale
    cov = Z.T @ Z / (n - 1)
    cov = 0.5 * (cov + cov.T)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(-eigvals, kind="stable")[:m]
    comps = eigvecs[:, order]
    pivots = np.argmax(np.abs(comps), axis=0)
    signs = np.sign(comps[pivots, np.arange(m)])
    signs[signs == 0] = 1.0
    return PcaModel(mean=mean, scale=scale, components=comps * signs)


def pca_transform(model: PcaModel, x) -> np.ndarray:
    """Project one D-vector or a batch of rows to the component space."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.input_dim:
        raise ValueError(f"pca_transform: expected dimension {model.input_dim}, got {x.shape[-1]}")
    return ((x - model.mean) / model.scale) @ model.components


def pca_inverse(model: PcaModel, y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return (y @ model.components.T) * model.scale + model.mean
