"""Generalized additive models ``h(x) = beta^T phi(x)`` and synthetic data.

Feature maps are fixed (never trained) and expose analytic input-Jacobians so
that attacks can differentiate through them without autodiff.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np

from .linalg import DimensionError, feature_covariance, sym_eig
from .rng import substream

FeatureKind = Literal["linear", "random-affine-relu", "random-linear"]
FEATURE_KINDS = ("linear", "random-affine-relu", "random-linear")


@dataclass(frozen=True)
class FeatureMap:
    """Deterministic feature map ``R^d -> R^p``.

    ``linear`` is the identity (p = d). The random kinds draw
    ``W ~ N(0, 1/d)`` of shape (p, d); ``random-affine-relu`` adds a bias
    ``b ~ N(0, 1/d)`` and applies ReLU.
    """

    kind: str
    input_dim: int
    feature_dim: int
    seed: int = 0
    W: np.ndarray = field(repr=False, default=None)
    b: np.ndarray = field(repr=False, default=None)
    lipschitz_bound: float = 1.0

    @classmethod
    def create(cls, kind: str, input_dim: int, feature_dim: Optional[int] = None, seed: int = 0):
        if kind not in FEATURE_KINDS:
            raise ValueError(f"unknown feature map kind {kind!r}")
        d = int(input_dim)
        if d < 1:
            raise DimensionError("input_dim must be positive")
        if kind == "linear":
            if feature_dim not in (None, d):
                raise DimensionError("linear feature map requires feature_dim == input_dim")
            return cls(kind, d, d, seed, np.eye(d), np.zeros(d), 1.0)
        p = int(feature_dim if feature_dim is not None else d)
        rng = substream(seed, "feature-map", p, d)
        W = rng.standard_normal((p, d)) / np.sqrt(d)
        b = rng.standard_normal(p) / np.sqrt(d) if kind == "random-affine-relu" else np.zeros(p)
        # spectral norm from the SVD, nudged up so it is a strict upper bound in floating point
        L = float(np.linalg.norm(W, 2)) * (1.0 + 1e-12)
        return cls(kind, d, p, seed, W, b, L)

    @property
    def relu(self) -> bool:
        return self.kind == "random-affine-relu"

    def preactivation(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return X @ self.W.T + self.b

    def __call__(self, X) -> np.ndarray:
        """Features of one input (shape (p,)) or a batch (shape (m, p))."""
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.input_dim:
            raise DimensionError(f"expected inputs of dim {self.input_dim}, got {X.shape[-1]}")
        if self.kind == "linear":
            return X.copy()
        pre = self.preactivation(X)
        return np.maximum(pre, 0.0) if self.relu else pre

    def jacobian(self, x) -> np.ndarray:
        """Input-Jacobian (p, d) at a single point; ReLU subgradient at 0 is 0."""
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "linear":
            return np.eye(self.input_dim)
        if self.relu:
            mask = self.preactivation(x) > 0
            return self.W * mask[:, None]
        return self.W.copy()

    def feature_matrix(self, X) -> np.ndarray:
        """Stack features column-wise: returns Phi of shape (p, n)."""
        return np.ascontiguousarray(self(np.atleast_2d(X)).T)


@dataclass(frozen=True)
class GamModel:
    feature_map: FeatureMap
    weights: np.ndarray  # (p, C)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim == 1:
            w = w[:, None]
        if w.shape[0] != self.feature_map.feature_dim:
            raise DimensionError(
                f"weights have {w.shape[0]} rows, feature map has dim {self.feature_map.feature_dim}"
            )
        object.__setattr__(self, "weights", w)

    @property
    def n_outputs(self) -> int:
        return self.weights.shape[1]

    def with_weights(self, weights) -> "GamModel":
        return GamModel(self.feature_map, weights)

    def logits(self, X) -> np.ndarray:
        return self.feature_map(X) @ self.weights


def gam_predict(model: GamModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("input has non-finite entries")
    return model.logits(x)


def _combination(model: GamModel, direction) -> np.ndarray:
    C = model.n_outputs
    if isinstance(direction, (int, np.integer)):
        if not 0 <= direction < C:
            raise DimensionError(f"class index {direction} out of range for {C} outputs")
        w = np.zeros(C)
        w[direction] = 1.0
        return w
    w = np.asarray(direction, dtype=np.float64).ravel()
    if w.shape[0] != C:
        raise DimensionError(f"combination has length {w.shape[0]}, model has {C} outputs")
    return w


def gam_input_gradient(model: GamModel, x, direction) -> np.ndarray:
    """Gradient in x of ``w^T beta^T phi(x)``; ``direction`` is a class index or w."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.feature_map.input_dim,):
        raise DimensionError(f"expected a single input of dim {model.feature_map.input_dim}")
    w = _combination(model, direction)
    return model.feature_map.jacobian(x).T @ (model.weights @ w)


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    """Gaussian inputs with labels ``y = beta_true^T phi(x) + eps``.

    ``covariance='spiked'`` sets the first input variance to ``1 + sqrt(d/n)``.
    In ``classification`` mode Y is the one-hot argmax of the noiseless output.
    """

    d: int
    n: int
    true_weights: np.ndarray
    covariance: str = "identity"
    noise_sigma: float = 0.0
    seed: int = 0
    mode: str = "regression"

    def input_variances(self) -> np.ndarray:
        var = np.ones(self.d)
        if self.covariance == "spiked":
            var[0] = 1.0 + np.sqrt(self.d / self.n)
        elif self.covariance != "identity":
            raise ValueError(f"unknown covariance {self.covariance!r}")
        return var


def sample_inputs(spec: SyntheticDatasetSpec, stream: str = "dataset") -> np.ndarray:
    rng = substream(spec.seed, stream, 0)
    return rng.standard_normal((spec.n, spec.d)) * np.sqrt(spec.input_variances())


def sample_dataset(spec: SyntheticDatasetSpec, feature_map: FeatureMap):
    if spec.noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    if spec.n <= 0:
        raise ValueError("n must be positive")
    if feature_map.input_dim != spec.d:
        raise DimensionError("feature map input dim does not match the dataset")
    beta = np.asarray(spec.true_weights, dtype=np.float64)
    if beta.ndim == 1:
        beta = beta[:, None]
    if beta.shape[0] != feature_map.feature_dim:
        raise DimensionError("true weights do not match the feature dimension")
    X = sample_inputs(spec)
    clean = feature_map(X) @ beta
    if spec.mode == "classification":
        Y = np.eye(beta.shape[1])[np.argmax(clean, axis=1)]
    elif spec.mode == "regression":
        noise = substream(spec.seed, "noise", 0).standard_normal(clean.shape)
        Y = clean + spec.noise_sigma * noise
    else:
        raise ValueError(f"unknown mode {spec.mode!r}")
    return X, Y


def fit_least_squares(phi, Y, ridge: float = 0.0) -> np.ndarray:
    """Minimize ``(1/2n)||Y - Phi^T beta||^2 + (ridge/2)||beta||^2``.

    With ``ridge == 0`` the minimum-norm solution is returned, using a
    spectral pseudo-inverse that drops eigenvalues below ``1e-10 * max``.
    """
    phi = np.asarray(phi, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if phi.shape[1] != Y.shape[0]:
        raise DimensionError(f"Phi has {phi.shape[1]} samples, Y has {Y.shape[0]}")
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    n = phi.shape[1]
    cov = feature_covariance(phi)
    rhs = phi @ Y / n
    if ridge > 0:
        return np.linalg.solve(cov + ridge * np.eye(cov.shape[0]), rhs)
    spec = sym_eig(cov)
    lam, U = spec.eigenvalues, spec.eigenvectors
    if lam[0] <= 0:
        return np.zeros((phi.shape[0], Y.shape[1]))
    keep = lam > 1e-10 * lam[0]
    return U[:, keep] @ ((U[:, keep].T @ rhs) / lam[keep, None])
