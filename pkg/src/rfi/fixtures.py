"""Constructed problem instances with known answers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import FeatureMap, GamModel, fit_least_squares
from .rng import substream


@dataclass(frozen=True)
class PlantedTask:
    """Classification task whose trained head carries a non-robust direction.

    The first C input coordinates hold the class signal ``separation * e_y``
    plus unit Gaussian noise; the remaining coordinates are near-constant
    (std ``nuisance_std``). The head is the ridge least-squares fit plus,
    per class, a weight of norm ``plant_norm`` on the near-constant
    coordinates. That added weight barely moves clean logits but gives an l2
    attacker a cheap direction; its robustness scores are tiny because the
    covariance has almost no variance there.
    """

    model: GamModel
    X_train: np.ndarray
    Y_train: np.ndarray
    X_test: np.ndarray
    Y_test: np.ndarray

    @property
    def phi_train(self) -> np.ndarray:
        return self.model.feature_map.feature_matrix(self.X_train)


def _planted_inputs(rng, n, d, C, separation, nuisance_std):
    y = rng.integers(0, C, n)
    X = np.empty((n, d))
    X[:, :C] = separation * np.eye(C)[y] + rng.standard_normal((n, C))
    X[:, C:] = nuisance_std * rng.standard_normal((n, d - C))
    return X, np.eye(C)[y]


def planted_task(d: int = 12, C: int = 3, n_train: int = 600, n_test: int = 400,
                 separation: float = 2.5, nuisance_std: float = 0.02, plant_norm: float = 2.0,
                 ridge: float = 0.01, seed: int = 0) -> PlantedTask:
    if d <= C:
        raise ValueError("need d > C")
    X_train, Y_train = _planted_inputs(substream(seed, "dataset", 0), n_train, d, C, separation, nuisance_std)
    X_test, Y_test = _planted_inputs(substream(seed, "dataset", 1), n_test, d, C, separation, nuisance_std)
    fm = FeatureMap.create("linear", d)
    beta = fit_least_squares(fm.feature_matrix(X_train), Y_train, ridge=ridge)
    plant = substream(seed, "plant", 0).standard_normal((d - C, C))
    beta[C:] += plant_norm * plant / np.linalg.norm(plant, axis=0)
    return PlantedTask(GamModel(fm, beta), X_train, Y_train, X_test, Y_test)


def exact_moment_design(cov: np.ndarray, n: int, seed: int = 0) -> np.ndarray:
    """A p x n feature stack whose empirical second moment equals ``cov`` exactly.

    ``Phi = sqrt(n) cov^{1/2} Q`` with Q having orthonormal rows, so
    ``Phi Phi^T / n = cov`` up to rounding. Gradient descent on such a design
    follows the population dynamics, which makes finite-sample risk checks
    exact in expectation.
    """
    cov = np.asarray(cov, dtype=np.float64)
    p = cov.shape[0]
    if n < p:
        raise ValueError("need n >= p")
    lam, U = np.linalg.eigh(cov)
    root = (U * np.sqrt(np.clip(lam, 0.0, None))) @ U.T
    G = substream(seed, "design", 0).standard_normal((n, p))
    Q, _ = np.linalg.qr(G)
    return np.sqrt(n) * root @ Q.T
