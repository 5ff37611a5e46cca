from __future__ import annotations

import numpy as np

from ..errors import DegenerateInputError, ShapeError


def covariance_spectrum(features) -> np.ndarray:
    """Singular values (descending) of the column covariance of an N x d matrix."""
    x = np.asarray(features.data if hasattr(features, "data") else features, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected an N x d matrix, got shape {x.shape}")
    if x.shape[0] < 2:
        raise DegenerateInputError("covariance needs at least two rows")
    centered = x - x.mean(axis=0, keepdims=True)
    cov = centered.T @ centered / (x.shape[0] - 1)
    return np.linalg.svd(cov, compute_uv=False)
