"""Symmetric eigendecomposition and the matrix square-root family.

Everything here works on float64 symmetric matrices. Empirical covariances
of mean-subtracted data are PSD up to rounding, so negative eigenvalues
within tolerance are clamped to zero before any square root is taken.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import DimensionError, IllConditionedError, NotPSDError, NumericError

# Eigenvalues below -PSD_TOL * lambda_max mean the matrix is not a covariance.
PSD_TOL = 1e-6
# Below this spectral ratio an unridged inverse square root is refused.
COND_FLOOR = 1e-10


class EigPair(NamedTuple):
    values: np.ndarray   # (n,) descending
    vectors: np.ndarray  # (n, n), columns orthonormal


def check_symmetric(a: np.ndarray, tol: float = 1e-5) -> np.ndarray:
    """Validate and symmetrize a square matrix; returns float64."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"expected a square matrix, got {a.shape}")
    scale = max(1.0, float(np.abs(a).max()))
    if float(np.abs(a - a.T).max()) > tol * scale:
        raise DimensionError("matrix is not symmetric within tolerance")
    return (a + a.T) / 2.0


def sym_eig(a: np.ndarray) -> EigPair:
    """Full spectral decomposition of a symmetric matrix, eigenvalues descending."""
    a = check_symmetric(a)
    try:
        values, vectors = np.linalg.eigh(a)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK rarely fails
        raise NumericError(f"eigendecomposition failed: {exc}") from exc
    order = np.argsort(values)[::-1]
    return EigPair(values[order], vectors[:, order])


def _clamped_spectrum(a: np.ndarray) -> EigPair:
    values, vectors = sym_eig(a)
    lam_max = float(values[0])
    if lam_max > 0 and float(values[-1]) < -PSD_TOL * lam_max:
        raise NotPSDError(
            f"eigenvalue {values[-1]:.3e} below PSD tolerance {-PSD_TOL * lam_max:.3e}"
        )
    return EigPair(np.maximum(values, 0.0), vectors)


def sym_sqrt(a: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root: V diag(sqrt(lambda)) V^T."""
    values, vectors = _clamped_spectrum(a)
    root = (vectors * np.sqrt(values)) @ vectors.T
    return (root + root.T) / 2.0


def sym_invsqrt(a: np.ndarray, eps: float = 0.0) -> np.ndarray:
    """Symmetric inverse square root V diag(1/sqrt(lambda + eps)) V^T.

    Eigenvalues are clamped at zero before the eps shift. With eps == 0 the
    matrix must be well-conditioned (lambda_min/lambda_max >= 1e-10);
    otherwise an IllConditionedError asks the caller to set eps.
    """
    if eps < 0:
        raise NumericError(f"eps must be nonnegative, got {eps}")
    values, vectors = _clamped_spectrum(a)
    if eps == 0.0:
        lam_max = float(values[0])
        lam_min = float(values[-1])
        if lam_max <= 0.0 or lam_min / lam_max < COND_FLOOR:
            raise IllConditionedError(
                f"spectral ratio {0.0 if lam_max <= 0 else lam_min / lam_max:.3e} "
                f"below {COND_FLOOR:.0e}; pass eps > 0 to regularize"
            )
    inv = (vectors / np.sqrt(values + eps)) @ vectors.T
    return (inv + inv.T) / 2.0


def scale_eps(a: np.ndarray, rel: float) -> float:
    """Scale-relative ridge rel * trace(a)/n used to regularize inverse roots."""
    n = a.shape[0]
    return float(rel) * float(np.trace(a)) / n if rel > 0 else 0.0


def svd(a: np.ndarray):
    """Thin SVD (U, S, V) with a = U diag(S) V^T and singular values descending."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"svd expects a 2-D array, got {a.shape}")
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"svd failed to converge: {exc}") from exc
    return u, s, vt.T
