"""Robustness and information of features: attack estimates, bounds, closed forms.

A feature here is ``f(x) = M phi(x)`` for a p x p matrix M, scored for class c
by ``y_c beta_c^T f(x)``. Its robustness is the mean over the data of the
worst value of that score over an l2 ball of radius ``delta`` around x.

The closed forms use the first term ``beta^T Sigma M beta``, which is the
clean mean of ``y beta^T M phi`` only when M is symmetric (for general M it
belongs to the feature ``M^T phi``). Every M built in this package is a
symmetric projector.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .attacks import AttackConfig, pgd_batch
from .linalg import DimensionError, as_matrix, operator_norm
from .models import GamModel

SQRT_2_OVER_PI = float(np.sqrt(2.0 / np.pi))


@dataclass(frozen=True)
class RobustnessEstimate:
    """Sample mean with its standard error.

    ``attack_spec`` is the AttackConfig used for the inner infimum, or
    ``"analytic"`` when no attack was needed. An attack only finds an upper
    bound on the infimum, so attacked estimates are upper bounds as well.
    """

    value: float
    std_error: float
    n_samples: int
    attack_spec: Union[AttackConfig, str]


def _estimate(per_sample: np.ndarray, method) -> RobustnessEstimate:
    n = per_sample.shape[0]
    se = float(per_sample.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return RobustnessEstimate(float(per_sample.mean()), se, n, method)


def _feature_head(model: GamModel, M, c: int) -> GamModel:
    """Single-output GAM computing ``beta_c^T M phi(x)``."""
    M = as_matrix(M, "feature matrix")
    p = model.feature_map.feature_dim
    if M.shape != (p, p):
        raise DimensionError(f"feature matrix must be {p}x{p}, got {M.shape}")
    if not 0 <= c < model.n_outputs:
        raise DimensionError(f"class {c} out of range")
    return model.with_weights(M.T @ model.weights[:, c])


def _targets(X, Y, c):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] == 0:
        raise ValueError("empty dataset")
    if Y.shape[0] != X.shape[0]:
        raise DimensionError("X and Y have different sample counts")
    return X, Y[:, c]


def default_inner_attack(delta: float, iterations: int = 100) -> AttackConfig:
    return AttackConfig(norm="l2", epsilon=delta, iterations=iterations,
                        loss="inner-product-minimization")


def empirical_robustness(model: GamModel, M, X, Y, c: int, delta: float,
                         attack: Optional[AttackConfig] = None, backend=None) -> RobustnessEstimate:
    """Mean over samples of ``min_{||x'-x||_2 <= delta} y_c beta_c^T M phi(x')``.

    The minimum is searched by l2 PGD on the inner product; ``attack`` sets the
    schedule (its norm must be l2; its radius is replaced by ``delta``).
    """
    if delta < 0:
        raise ValueError("delta must be >= 0")
    head = _feature_head(model, M, c)
    X, y = _targets(X, Y, c)
    if delta == 0:
        return _estimate(y * head.logits(X)[:, 0], "analytic")
    if attack is None:
        attack = default_inner_attack(delta)
    elif attack.norm != "l2":
        raise ValueError("robustness is defined over an l2 ball")
    else:
        attack = AttackConfig("l2", delta, attack.step_size, attack.iterations,
                              "inner-product-minimization", attack.random_start, attack.seed, attack.clip)
    # maximizing -y * z is minimizing the signed score
    _, best, _, _ = pgd_batch(head, X, np.zeros(X.shape[0]), attack,
                              combination=y[:, None], backend=backend)
    return _estimate(-best, attack)


def linear_infimum_estimate(beta_c, M, X, y_c, delta: float) -> RobustnessEstimate:
    """Closed-form inner minimum for identity features.

    ``min_{||d|| <= delta} y beta^T M (x + d) = y beta^T M x - delta |y| ||M^T beta||``.
    """
    beta_c = np.asarray(beta_c, dtype=np.float64).ravel()
    M = as_matrix(M, "feature matrix")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y_c = np.asarray(y_c, dtype=np.float64).ravel()
    if X.shape[0] == 0:
        raise ValueError("empty dataset")
    w = M.T @ beta_c
    vals = y_c * (X @ w) - delta * np.abs(y_c) * np.linalg.norm(w)
    return _estimate(vals, "analytic")


def _bound_terms(beta_c, sigma_cov, M, noise_sigma):
    beta_c = np.asarray(beta_c, dtype=np.float64).ravel()
    S = as_matrix(sigma_cov, "covariance")
    M = as_matrix(M, "feature matrix")
    p = beta_c.shape[0]
    if S.shape != (p, p) or M.shape != (p, p):
        raise DimensionError("beta, covariance and feature matrix dimensions differ")
    if noise_sigma < 0:
        raise ValueError("noise sigma must be >= 0")
    first = float(beta_c @ S @ M @ beta_c)
    spread = operator_norm(M) * np.linalg.norm(beta_c) * np.sqrt(noise_sigma ** 2 + beta_c @ S @ beta_c)
    return first, float(spread)


def robustness_lower_bound(beta_c, sigma_cov, M, lipschitz: float, delta: float, noise_sigma: float) -> float:
    """``beta^T Sigma M beta - L delta ||M||_op ||beta|| sqrt(sigma^2 + beta^T Sigma beta)``."""
    if lipschitz < 0 or delta < 0:
        raise ValueError("lipschitz and delta must be >= 0")
    first, spread = _bound_terms(beta_c, sigma_cov, M, noise_sigma)
    return first - lipschitz * delta * spread


def linear_exact_robustness(beta_c, sigma_cov, M, delta: float, noise_sigma: float) -> float:
    """Exact robustness for Gaussian inputs, identity features and beta an eigenvector of M.

    Same form as the Lipschitz bound with L replaced by ``sqrt(2/pi)``, the mean
    of ``|g|`` for a standard normal g.
    """
    if delta < 0:
        raise ValueError("delta must be >= 0")
    first, spread = _bound_terms(beta_c, sigma_cov, M, noise_sigma)
    return first - SQRT_2_OVER_PI * delta * spread


def information_score(model: GamModel, M, X, Y, c: int) -> RobustnessEstimate:
    """Monte-Carlo estimate of ``E[y_c beta_c^T M phi(x)]``."""
    head = _feature_head(model, M, c)
    X, y = _targets(X, Y, c)
    return _estimate(y * head.logits(X)[:, 0], "analytic")
