"""Robust Feature Inference: score eigenvectors, select, project the last layer.

Typical use::

    decomp = sym_eig(feature_covariance(Phi))
    table = robustness_scores(decomp, beta)
    proj = select_topk_union(table, decomp, K=beta.shape[1])
    logits = rfi_infer(proj, model, x)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .linalg import DimensionError, Spectrum, as_matrix, feature_covariance, project_subspace, sym_eig
from .models import GamModel

NEGATIVE_EIG_TOL = 1e-10
ZERO_EIG_REL = 1e-12


@dataclass(frozen=True)
class RobustnessScoreTable:
    """``scores[c, i] = lambda_i * (beta_c . u_i)^2``; ``order[c]`` sorts row c descending."""

    scores: np.ndarray
    order: np.ndarray
    weights: np.ndarray


@dataclass(frozen=True)
class RobustProjector:
    selected_indices: np.ndarray
    U_tilde: np.ndarray
    beta_tilde: np.ndarray
    K: int
    mode: str
    scores: Optional[RobustnessScoreTable] = None
    class_bases: tuple = field(default=())

    @property
    def projector(self) -> np.ndarray:
        return self.U_tilde @ self.U_tilde.T

    def as_model(self, model: GamModel) -> GamModel:
        """The defended model; gradients flow through the projected weights."""
        return model.with_weights(self.beta_tilde)


def _weights(beta) -> np.ndarray:
    beta = np.asarray(beta, dtype=np.float64)
    return beta[:, None] if beta.ndim == 1 else beta


def robustness_scores(spectrum: Spectrum, beta) -> RobustnessScoreTable:
    beta = _weights(beta)
    lam, U = spectrum.eigenvalues, spectrum.eigenvectors
    if beta.shape[0] != U.shape[0]:
        raise DimensionError(f"weights have {beta.shape[0]} rows, spectrum has dim {U.shape[0]}")
    scale = max(abs(lam[0]), abs(lam[-1]), 1.0)
    if lam[-1] < -NEGATIVE_EIG_TOL * scale:
        raise ValueError(f"negative eigenvalue {lam[-1]:.3e}; scores need a PSD covariance")
    lam = np.clip(lam, 0.0, None)
    top = lam[0]
    lam = np.where(lam <= ZERO_EIG_REL * top, 0.0, lam)
    scores = lam[None, :] * (beta.T @ U) ** 2
    # Descending score, ties to the smaller eigen-index. Zero-eigenvalue
    # directions score 0 and sit at the highest indices, so they are only
    # reached when a class has fewer than K positive scores.
    order = np.argsort(-scores, axis=1, kind="stable")
    return RobustnessScoreTable(scores, order, beta.copy())


def _finish(beta, U_full, indices, K, mode, table=None, class_bases=()):
    indices = np.asarray(sorted(set(int(i) for i in indices)), dtype=np.int64)
    U_t = U_full[:, indices]
    if len(indices) == U_full.shape[0]:
        # full basis: the projector is the identity, keep beta bit-exact
        beta_t = beta.copy()
    else:
        beta_t = project_subspace(U_t, beta)
    return RobustProjector(indices, U_t, beta_t, K, mode, table, class_bases)


def select_topk_union(table: RobustnessScoreTable, spectrum: Spectrum, K: int) -> RobustProjector:
    """Union over classes of the K highest-scoring eigenvectors, then project the weights."""
    p = spectrum.size
    if not 1 <= K <= p:
        raise ValueError(f"K must be in [1, {p}], got {K}")
    chosen = np.unique(table.order[:, :K])
    return _finish(table.weights, spectrum.eigenvectors, chosen, K, "global-union", table)


def fit_rfi(phi, beta, K: Optional[int] = None, mode: str = "global-union") -> RobustProjector:
    """Run the whole pipeline from a p x n feature stack; K defaults to the class count."""
    beta = _weights(beta)
    K = beta.shape[1] if K is None else int(K)
    if mode == "global-union":
        decomp = sym_eig(feature_covariance(phi))
        return select_topk_union(robustness_scores(decomp, beta), decomp, K)
    if mode == "classwise-bc":
        return select_classwise_bc(feature_covariance(phi), beta, K)
    raise ValueError(f"unknown mode {mode!r}")


def rfi_infer(projector: RobustProjector, model: GamModel, x) -> np.ndarray:
    if projector.beta_tilde.shape != model.weights.shape:
        raise DimensionError("projector was not built for this model's weights")
    return model.feature_map(x) @ projector.beta_tilde


def classwise_matrix(sigma: np.ndarray, beta_c: np.ndarray) -> np.ndarray:
    """``B_c = (beta_c beta_c^T Sigma + Sigma beta_c beta_c^T) / 2``."""
    sb = sigma @ beta_c
    outer = np.outer(beta_c, sb)
    return (outer + outer.T) / 2.0


def select_classwise_bc(sigma, beta, K: int) -> RobustProjector:
    """Per-class basis of the K dominant eigenvectors of ``B_c``.

    Output c of the defended model is ``beta_c^T U_c U_c^T phi(x)``, which is a
    GAM with column c of ``beta_tilde`` equal to ``U_c U_c^T beta_c``.
    """
    sigma = as_matrix(sigma, "covariance")
    beta = _weights(beta)
    p = sigma.shape[0]
    if beta.shape[0] != p:
        raise DimensionError("weights do not match the covariance dimension")
    if not 1 <= K <= p:
        raise ValueError(f"K must be in [1, {p}], got {K}")
    bases = []
    beta_t = np.empty_like(beta)
    for c in range(beta.shape[1]):
        decomp = sym_eig(classwise_matrix(sigma, beta[:, c]))
        Uc = decomp.eigenvectors[:, :K]
        bases.append(Uc)
        beta_t[:, c] = beta[:, c] if K == p else project_subspace(Uc, beta[:, c:c + 1])[:, 0]
    stacked = np.hstack(bases)
    # span of all class bases, for reporting only
    q, r = np.linalg.qr(stacked)
    rank = int(np.sum(np.abs(np.diag(r)) > 1e-10))
    U_span = q[:, :rank] if rank < p else np.eye(p)
    return RobustProjector(np.arange(U_span.shape[1]), U_span, beta_t, K, "classwise-bc",
                           None, tuple(bases))


def information_of_projector(projector: RobustProjector, table: Optional[RobustnessScoreTable] = None) -> np.ndarray:
    """Per-class information: sum of the selected robustness scores."""
    if projector.mode != "global-union":
        raise ValueError("information is defined for global-union projectors")
    table = table if table is not None else projector.scores
    if table is None:
        raise ValueError("score table required")
    return table.scores[:, projector.selected_indices].sum(axis=1)
