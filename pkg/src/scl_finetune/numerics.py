"""Dense float64 primitives: normalization, softmax, similarities, PCA."""

from __future__ import annotations

import numpy as np

from .errors import DegenerateData, ZeroVector

_ZERO_NORM = 1e-30


def as_real(x) -> np.ndarray:
    """float64 array, except extended-precision input keeps its dtype."""
    x = np.asarray(x)
    if x.dtype == np.longdouble:
        return x
    return x.astype(np.float64, copy=False)


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale a vector to unit euclidean length.

    Raises ZeroVector when the norm is below 1e-30.
    """
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if not norm >= _ZERO_NORM:
        raise ZeroVector(f"cannot normalize vector with norm {norm!r}")
    return v / norm


def l2_normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise normalization; returns (unit rows, row norms)."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    if x.shape[0] and not np.all(norms >= _ZERO_NORM):
        bad = int(np.argmin(norms))
        raise ZeroVector(f"row {bad} has norm {norms[bad]!r}")
    return x / norms[:, None], norms


def normalize_backward(grad_unit: np.ndarray, unit: np.ndarray, norms: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. unit rows back through ``x / ||x||``."""
    radial = np.sum(grad_unit * unit, axis=1, keepdims=True)
    return (grad_unit - radial * unit) / norms[:, None]


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = as_real(logits)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = as_real(logits)
    z = z - np.max(z, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def pairwise_dot(embeddings: np.ndarray) -> np.ndarray:
    """Gram matrix of the rows, symmetrized so that G == G.T exactly."""
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] < 1:
        raise ValueError("expected a non-empty 2-D embedding matrix")
    g = e @ e.T
    return 0.5 * (g + g.T)


def is_unit_rows(embeddings: np.ndarray, tol: float = 1e-9) -> bool:
    norms = np.linalg.norm(np.asarray(embeddings, dtype=np.float64), axis=1)
    return bool(np.all(np.abs(norms - 1.0) <= tol))


def principal_components(x: np.ndarray, k: int = 2) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-k principal axes of the rows of ``x``.

    Returns (mean, components k x d, eigenvalues). Covariance uses the 1/n
    normalization. Each component is signed so its first coordinate with
    magnitude above 1e-12 is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DegenerateData("need at least two rows")
    mean = x.mean(axis=0)
    centered = x - mean
    if not np.any(np.abs(centered) > 0):
        raise DegenerateData("all rows are identical")
    cov = centered.T @ centered / x.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:k]
    comps = evecs[:, order].T.copy()
    for row in comps:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if nz.size and row[nz[0]] < 0:
            row *= -1.0
    if comps.shape[0] < k:
        # fewer input dims than requested components
        comps = np.vstack([comps, np.zeros((k - comps.shape[0], x.shape[1]))])
        evals_k = np.concatenate([evals[order], np.zeros(k - order.size)])
    else:
        evals_k = evals[order]
    return mean, comps, np.clip(evals_k, 0.0, None)


def pca_project_2d(x: np.ndarray) -> np.ndarray:
    """Project mean-centered rows onto the top two principal components."""
    mean, comps, _ = principal_components(x, k=2)
    return (np.asarray(x, dtype=np.float64) - mean) @ comps.T
