"""Dense linear-algebra primitives: covariance, eigendecomposition, projection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SYMMETRY_TOL = 1e-10
ORTHONORMAL_TOL = 1e-8


class DimensionError(ValueError):
    """Raised when array shapes do not fit together."""


class NonFiniteError(ValueError):
    """Raised on NaN or Inf input."""


def as_matrix(a, name="matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {m.shape}")
    if m.size == 0:
        raise DimensionError(f"{name} is empty")
    if not np.all(np.isfinite(m)):
        raise NonFiniteError(f"{name} has non-finite entries")
    return m


@dataclass(frozen=True)
class Spectrum:
    """Eigenpairs of a symmetric matrix, eigenvalues in descending order.

    ``eigenvectors[:, i]`` pairs with ``eigenvalues[i]``.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def size(self) -> int:
        return self.eigenvalues.shape[0]

    def reconstruct(self) -> np.ndarray:
        U = self.eigenvectors
        return (U * self.eigenvalues) @ U.T

    def nonzero_count(self, rel_tol: float = 1e-10) -> int:
        lam = self.eigenvalues
        top = max(lam[0], 0.0)
        return int(np.count_nonzero(lam > rel_tol * top)) if top > 0 else 0


def feature_covariance(phi) -> np.ndarray:
    """Uncentered second moment ``(1/n) Phi Phi^T`` of a p x n feature stack."""
    phi = as_matrix(phi, "features")
    n = phi.shape[1]
    cov = phi @ phi.T / n
    # exact symmetry; BLAS may differ in the last bit between (i,j) and (j,i)
    return (cov + cov.T) / 2.0


def _fix_signs(U: np.ndarray) -> np.ndarray:
    # largest-magnitude entry positive; argmax picks the lowest index on ties
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs


def sym_eig(a) -> Spectrum:
    a = as_matrix(a, "symmetric matrix")
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"expected a square matrix, got {a.shape}")
    scale = np.max(np.abs(a))
    asym = np.max(np.abs(a - a.T))
    if asym > SYMMETRY_TOL * scale:
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
    a = (a + a.T) / 2.0
    lam, U = np.linalg.eigh(a)
    order = np.argsort(-lam, kind="stable")
    return Spectrum(lam[order].copy(), _fix_signs(U[:, order]))


def check_orthonormal(U: np.ndarray, tol: float = ORTHONORMAL_TOL) -> None:
    k = U.shape[1]
    err = np.max(np.abs(U.T @ U - np.eye(k))) if k else 0.0
    if err > tol:
        raise ValueError(f"columns are not orthonormal (max error {err:.3e})")


def project_subspace(U_sub, V) -> np.ndarray:
    """Return ``U_sub U_sub^T V`` for a basis ``U_sub`` with orthonormal columns."""
    U_sub = np.asarray(U_sub, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if U_sub.ndim != 2:
        raise DimensionError("basis must be 2-D")
    if V.shape[0] != U_sub.shape[0]:
        raise DimensionError(f"basis has {U_sub.shape[0]} rows, operand has {V.shape[0]}")
    check_orthonormal(U_sub)
    return U_sub @ (U_sub.T @ V)


def operator_norm(M) -> float:
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    if not np.any(M):
        return 0.0
    return float(np.linalg.norm(M, 2))


def spectral_pinv(A, rel_tol: float = 1e-10) -> np.ndarray:
    """Pseudo-inverse of a symmetric PSD matrix, dropping eigenvalues below ``rel_tol * max``."""
    decomp = sym_eig(A)
    lam, U = decomp.eigenvalues, decomp.eigenvectors
    top = lam[0]
    if top <= 0:
        return np.zeros_like(np.asarray(A, dtype=np.float64))
    keep = lam > rel_tol * top
    return (U[:, keep] / lam[keep]) @ U[:, keep].T
