"""Neural tangent kernel features and training dynamics of random-features models.

Conventions. ``Phi`` is the p x n feature stack of the training inputs.

* ``Theta = Phi^T Phi / n`` (n x n) with eigenpairs ``(lam_i, v_i)``;
* ``Sigma = Phi Phi^T / n`` (p x p) with eigenpairs ``(mu_j, u_j)``.

The nonzero parts of the two spectra coincide and ``u_j = Phi v_j / sqrt(n mu_j)``.
Gradient-descent coefficients are written with the covariance eigenvalue
``eig = mu_j``, ``1 - (1 - eta * eig)^t``. Texts that parameterize by the
singular value s_j of ``Phi / sqrt(n)`` write ``eig = s_j^2``; see
:func:`eig_from_singular`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
from scipy.stats import spearmanr

from .attacks import AttackConfig, pgd_batch
from .linalg import DimensionError, Spectrum, feature_covariance, sym_eig
from .models import FeatureMap, GamModel, fit_least_squares
from .rng import substream

PINV_REL_TOL = 1e-10
DUALITY_TOL = 1e-8
DIVERGENCE_FACTOR = 10.0


def eig_from_singular(s):
    """Covariance eigenvalue from the singular value of ``Phi / sqrt(n)``."""
    return np.asarray(s, dtype=np.float64) ** 2


def singular_from_eig(eig):
    return np.sqrt(np.clip(np.asarray(eig, dtype=np.float64), 0.0, None))


def _as_targets(Y, n):
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape[0] != n:
        raise DimensionError(f"targets have {Y.shape[0]} rows, expected {n}")
    return Y


def _kept(eigenvalues: np.ndarray, rel_tol: float = PINV_REL_TOL) -> np.ndarray:
    top = max(eigenvalues[0], 0.0)
    if top == 0.0:
        return np.zeros(eigenvalues.shape, bool)
    return eigenvalues > rel_tol * top


@dataclass(frozen=True)
class NtkSystem:
    theta: np.ndarray
    spectrum: Spectrum
    X: np.ndarray
    Y: Optional[np.ndarray]
    feature_map: FeatureMap
    phi: np.ndarray = field(repr=False)
    duality_error: float = 0.0

    @property
    def n(self) -> int:
        return self.theta.shape[0]

    def kept(self) -> np.ndarray:
        return _kept(self.spectrum.eigenvalues)

    def kernel_vector(self, x) -> np.ndarray:
        """``Theta(x, X)``: shape (n,) for one input, (n, m) for a batch."""
        x = np.asarray(x, dtype=np.float64)
        feats = self.feature_map(x)
        return self.phi.T @ feats.T / self.n


def ntk_gram(feature_map: FeatureMap, X, Y=None) -> NtkSystem:
    """Gram matrix ``Phi^T Phi / n`` with its spectrum.

    Also records the largest relative gap between the nonzero eigenvalues of
    the gram matrix and those of the feature covariance.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n = X.shape[0]
    if n < 1:
        raise DimensionError("need at least one sample")
    phi = feature_map.feature_matrix(X)
    theta = phi.T @ phi / n
    theta = (theta + theta.T) / 2.0
    decomp = sym_eig(theta)
    cov_eig = sym_eig(feature_covariance(phi)).eigenvalues
    r = min(int(_kept(decomp.eigenvalues).sum()), int(_kept(cov_eig).sum()))
    top = max(decomp.eigenvalues[0], 1e-300)
    gap = np.abs(decomp.eigenvalues[:r] - cov_eig[:r]) / np.maximum(decomp.eigenvalues[:r], top * PINV_REL_TOL)
    err = float(gap.max()) if r else 0.0
    Y = None if Y is None else _as_targets(Y, n)
    return NtkSystem(theta, decomp, X, Y, feature_map, phi, err)


def _feature_heads(system: NtkSystem, Y, rel_tol: float = PINV_REL_TOL) -> np.ndarray:
    """Weights ``B_i = Phi v_i v_i^T Y / (n lam_i)``, shape (n, p, C); zero for dropped i."""
    lam, V = system.spectrum.eigenvalues, system.spectrum.eigenvectors
    keep = _kept(lam, rel_tol)
    coef = np.zeros((lam.shape[0], Y.shape[1]))
    coef[keep] = (V[:, keep].T @ Y) / lam[keep, None]
    PV = system.phi @ V / system.n  # (p, n)
    return np.einsum("pi,ic->ipc", PV, coef)


def ntk_features(system: NtkSystem, x, Y=None) -> np.ndarray:
    """NTK features ``lam_i^{-1} Theta(x, X)^T v_i v_i^T Y``.

    Returns shape (n, C) for one input or (n, m, C) for a batch. Features
    whose eigenvalue falls below ``1e-10 * lam_max`` are zero.
    """
    Y = system.Y if Y is None else _as_targets(Y, system.n)
    if Y is None:
        raise ValueError("targets are required for NTK features")
    lam, V = system.spectrum.eigenvalues, system.spectrum.eigenvectors
    keep = _kept(lam)
    k = system.kernel_vector(x)  # (n,) or (n, m)
    proj = V.T @ k  # (n,) or (n, m)
    coef = np.zeros((lam.shape[0], Y.shape[1]))
    coef[keep] = (V[:, keep].T @ Y) / lam[keep, None]
    if proj.ndim == 1:
        return proj[:, None] * coef
    return proj[:, :, None] * coef[:, None, :]


def kernel_regression(system: NtkSystem, x, Y=None) -> np.ndarray:
    """``Theta(x, X)^T Theta^+ Y`` with the same pseudo-inverse threshold."""
    Y = system.Y if Y is None else _as_targets(Y, system.n)
    pinv = scipy.linalg.pinvh(system.theta, atol=0.0, rtol=PINV_REL_TOL)
    return system.kernel_vector(x).T @ pinv @ Y


def network_features(cov_spectrum: Spectrum, beta_tilde, x, feature_map: FeatureMap) -> np.ndarray:
    """Network features ``phi(x)^T u_i u_i^T beta``: shape (p, C), or (p, m, C) for a batch."""
    beta = np.asarray(beta_tilde, dtype=np.float64)
    if beta.ndim == 1:
        beta = beta[:, None]
    U = cov_spectrum.eigenvectors
    if beta.shape[0] != U.shape[0]:
        raise DimensionError("weights do not match the covariance dimension")
    proj = U.T @ feature_map(x).T  # (p,) or (p, m)
    coef = U.T @ beta  # (p, C)
    if proj.ndim == 1:
        return proj[:, None] * coef
    return proj[:, :, None] * coef[:, None, :]


@dataclass(frozen=True)
class CorrespondenceReport:
    """NTK versus network features at matched eigen-indices.

    ``noiseless_max_deviation`` compares features built from noise-free
    targets. ``mean_deviation`` and ``std_error`` (probe x index x class) are
    over the noise draws; ``z_scores`` is their ratio where the error is nonzero.
    """

    matched: int
    noiseless_max_deviation: float
    mean_deviation: np.ndarray
    std_error: np.ndarray
    n_draws: int

    @property
    def z_scores(self) -> np.ndarray:
        z = np.zeros_like(self.mean_deviation)
        nz = self.std_error > 0
        z[nz] = self.mean_deviation[nz] / self.std_error[nz]
        return z

    @property
    def max_deviation(self) -> float:
        return float(np.max(np.abs(self.mean_deviation))) if self.mean_deviation.size else 0.0


def correspondence_check(system: NtkSystem, cov_spectrum: Spectrum, beta_tilde, sigma: float,
                         n_noise_draws: int, probes, seed: int = 0) -> CorrespondenceReport:
    """Compare NTK features of targets ``Phi^T beta + noise`` with network features.

    Features are paired by index among the nonzero eigenvalues, which the two
    spectra share; a mismatch beyond 1e-8 relative raises.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    beta = np.asarray(beta_tilde, dtype=np.float64)
    if beta.ndim == 1:
        beta = beta[:, None]
    lam = system.spectrum.eigenvalues
    mu = cov_spectrum.eigenvalues
    r = min(int(_kept(lam).sum()), int(_kept(mu).sum()))
    gap = np.abs(lam[:r] - mu[:r]) / lam[:r] if r else np.zeros(0)
    if r and gap.max() > DUALITY_TOL:
        raise ValueError(f"gram and covariance spectra disagree (relative gap {gap.max():.3e})")
    probes = np.atleast_2d(np.asarray(probes, dtype=np.float64))
    clean = system.phi.T @ beta  # (n, C)
    net = network_features(cov_spectrum, beta, probes, system.feature_map)[:r]  # (r, m, C)
    ker0 = ntk_features(system, probes, clean)[:r]
    noiseless = float(np.max(np.abs(ker0 - net))) if r else 0.0

    # NTK features are linear in the targets, so each draw only adds the noise term
    V = system.spectrum.eigenvectors[:, :r]
    kv = V.T @ system.kernel_vector(probes) / lam[:r, None]  # (r, m)
    rng = substream(seed, "noise", 1)
    total = np.zeros_like(net)
    total_sq = np.zeros_like(net)
    for _ in range(int(n_noise_draws)):
        eps = sigma * rng.standard_normal(clean.shape)
        dev = ker0 - net + kv[:, :, None] * (V.T @ eps)[:, None, :]
        total += dev
        total_sq += dev * dev
    k = int(n_noise_draws)
    if k < 1:
        raise ValueError("need at least one noise draw")
    mean = total / k
    var = np.maximum(total_sq / k - mean * mean, 0.0) * (k / (k - 1) if k > 1 else 0.0)
    se = np.sqrt(var / k)
    # (r, m, C) -> (m, r, C)
    return CorrespondenceReport(r, noiseless, mean.transpose(1, 0, 2), se.transpose(1, 0, 2), k)


def gd_coefficients(eta: float, t, eig) -> np.ndarray:
    """``1 - (1 - eta * eig)^t``; shape (len(t), len(eig)) for a time grid."""
    eig = np.asarray(eig, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    base = 1.0 - eta * eig
    if t.ndim == 0:
        return 1.0 - base ** t
    return 1.0 - base[None, :] ** t[:, None]


@dataclass(frozen=True)
class ClosedFormResult:
    prediction: np.ndarray
    coefficients: np.ndarray
    diverging: bool


def gd_closed_form(eta: float, t, cov_spectrum: Spectrum, beta_tilde, x, feature_map: FeatureMap) -> ClosedFormResult:
    """Prediction of gradient descent from zero weights after t steps.

    ``f_t(x) = sum_j (1 - (1 - eta eig_j)^t) phi(x)^T u_j u_j^T beta``.
    ``diverging`` flags any ``eta * eig_j >= 2``.
    """
    if np.any(np.asarray(t) < 0):
        raise ValueError("t must be >= 0")
    eig = np.clip(cov_spectrum.eigenvalues, 0.0, None)
    coef = gd_coefficients(eta, t, eig)
    feats = network_features(cov_spectrum, beta_tilde, x, feature_map)
    pred = np.tensordot(coef, feats, axes=(0, 0))
    return ClosedFormResult(pred, coef, bool(np.any(eta * eig >= 2.0)))


@dataclass(frozen=True)
class DynamicsTrace:
    """Recorded gradient-descent run.

    ``coefficients[t, j]`` is the progress of the weights along ``u_j`` toward
    the least-squares fit (NaN where the fit has no component along u_j);
    ``predictions[t]`` holds the outputs at the probes (m x C).
    """

    times: np.ndarray
    coefficients: np.ndarray
    predictions: np.ndarray
    weights: np.ndarray
    losses: np.ndarray
    diverged: bool


def gd_simulate(eta: float, T: int, phi, Y, probes, feature_map: FeatureMap) -> DynamicsTrace:
    """Explicit gradient descent on ``(1/2n) ||Y - Phi^T beta||^2`` from ``beta = 0``.

    Stops early and sets ``diverged`` once the loss exceeds 10x its initial value.
    """
    if not np.isfinite(eta):
        raise ValueError("eta must be finite")
    if T < 0:
        raise ValueError("T must be >= 0")
    phi = np.asarray(phi, dtype=np.float64)
    p, n = phi.shape
    Y = _as_targets(Y, n)
    probe_feats = feature_map(np.atleast_2d(probes))
    cov = feature_covariance(phi)
    rhs = phi @ Y / n
    decomp = sym_eig(cov)
    target = fit_least_squares(phi, Y)
    U = decomp.eigenvectors
    tproj = U.T @ target  # (p, C)
    tnorm = np.sum(tproj * tproj, axis=1)
    scale = max(float(tnorm.max()), 0.0)
    has = tnorm > 1e-20 * scale if scale > 0 else np.zeros(p, bool)

    def loss(b):
        r = Y - phi.T @ b
        return float(np.sum(r * r) / (2 * n))

    beta = np.zeros((p, Y.shape[1]))
    loss0 = loss(beta)
    weights, preds, losses = [beta.copy()], [probe_feats @ beta], [loss0]
    diverged = False
    for _ in range(T):
        beta = beta - eta * (cov @ beta - rhs)
        cur = loss(beta)
        if not np.isfinite(cur) or (loss0 > 0 and cur > DIVERGENCE_FACTOR * loss0):
            diverged = True
            break
        weights.append(beta.copy())
        preds.append(probe_feats @ beta)
        losses.append(cur)
    weights = np.array(weights)
    coefs = np.full((weights.shape[0], p), np.nan)
    proj = np.einsum("pj,tpc->tjc", U, weights)
    coefs[:, has] = np.sum(proj[:, has] * tproj[None, has], axis=2) / tnorm[has]
    return DynamicsTrace(np.arange(weights.shape[0]), coefs, np.array(preds), weights,
                         np.array(losses), diverged)


def simulation_deviation(trace: DynamicsTrace, eta: float, phi, Y, probes, feature_map: FeatureMap) -> float:
    """Largest relative gap between a simulated trace and the closed form.

    The closed form uses the empirical covariance spectrum and the
    least-squares fit as target; per step the gap is measured in max-norm
    relative to the closed-form prediction.
    """
    phi = np.asarray(phi, dtype=np.float64)
    decomp = sym_eig(feature_covariance(phi))
    target = fit_least_squares(phi, Y)
    worst = 0.0
    for t, sim in zip(trace.times, trace.predictions):
        cf = gd_closed_form(eta, int(t), decomp, target, probes, feature_map).prediction
        diff = float(np.max(np.abs(sim - cf)))
        ref = float(np.max(np.abs(cf)))
        if diff == 0.0:
            continue
        worst = max(worst, diff / ref if ref > 0 else np.inf)
    return worst


@dataclass(frozen=True)
class KernelFlowResult:
    spectral: np.ndarray
    matrix: np.ndarray
    coefficients: np.ndarray

    @property
    def route_gap(self) -> float:
        return float(np.max(np.abs(self.spectral - self.matrix)))


def kernel_flow(gamma: float, t: float, system: NtkSystem, x, Y=None) -> KernelFlowResult:
    """Gradient-flow prediction ``Theta(x,X)^T Theta^+ (I - exp(-gamma t Theta)) Y``.

    Evaluated twice: as the spectral sum ``sum_i f_i(x) (1 - exp(-gamma t lam_i))``
    over NTK features, and with a dense matrix exponential and pseudo-inverse.
    """
    if t < 0 or gamma < 0:
        raise ValueError("gamma and t must be >= 0")
    Y = system.Y if Y is None else _as_targets(Y, system.n)
    lam = np.clip(system.spectrum.eigenvalues, 0.0, None)
    coef = np.where(_kept(lam), -np.expm1(-gamma * t * lam), 0.0)
    feats = ntk_features(system, x, Y)
    spectral = np.tensordot(coef, feats, axes=(0, 0))
    decay = np.eye(system.n) - scipy.linalg.expm(-gamma * t * system.theta)
    pinv = scipy.linalg.pinvh(system.theta, atol=0.0, rtol=PINV_REL_TOL)
    matrix = system.kernel_vector(x).T @ (pinv @ (decay @ Y))
    return KernelFlowResult(spectral, matrix, coef)


def _projected_weights(cov_spectrum: Spectrum, beta_tilde) -> np.ndarray:
    beta = np.asarray(beta_tilde, dtype=np.float64).ravel()
    if beta.shape[0] != cov_spectrum.size:
        raise DimensionError("weights do not match the covariance dimension")
    return cov_spectrum.eigenvectors.T @ beta


def usefulness_robustness_profile(j: int, t, eta: float, cov_spectrum: Spectrum, beta_tilde,
                                  delta: float, sigma: float):
    """Usefulness and robustness of the j-th gradient-descent feature at step t.

    With ``b = U^T beta`` and ``c_j = 1 - (1 - eta eig_j)^t``::

        usefulness = c_j b_j^2 eig_j
        robustness = c_j (b_j^2 eig_j - delta |b_j| sqrt((2/pi)(sigma^2 + sum_k b_k^2 eig_k)))
    """
    if not 0 <= j < cov_spectrum.size:
        raise DimensionError(f"feature index {j} out of range")
    if delta < 0 or sigma < 0:
        raise ValueError("delta and sigma must be >= 0")
    b = _projected_weights(cov_spectrum, beta_tilde)
    eig = np.clip(cov_spectrum.eigenvalues, 0.0, None)
    c = gd_coefficients(eta, t, eig[j:j + 1])[..., 0]
    signal = b[j] ** 2 * eig[j]
    spread = np.sqrt((2.0 / np.pi) * (sigma ** 2 + np.sum(b * b * eig)))
    return c * signal, c * (signal - delta * abs(b[j]) * spread)


@dataclass(frozen=True)
class RiskProfile:
    """Per-index share of the test risk and the total ``sigma^2 + sum``.

    Below ``threshold_descending`` the shares decrease with the index; above
    ``threshold_ascending`` they increase (for unit weight components).
    """

    per_index: np.ndarray
    total: float
    threshold_descending: float
    threshold_ascending: float


def risk_thresholds(eta: float, eig) -> tuple:
    eig = np.asarray(eig, dtype=np.float64)
    return 0.5 * (1.0 / (eta * eig[0]) - 1.0), 0.5 * (1.0 / (eta * eig[-1]) - 1.0)


def risk_profile(t, eta: float, cov_spectrum: Spectrum, beta_tilde, sigma: float) -> RiskProfile:
    """``share_j = b_j^2 eig_j (1 - eta eig_j)^{2t}`` with ``b = U^T beta``."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    b = _projected_weights(cov_spectrum, beta_tilde)
    eig = np.clip(cov_spectrum.eigenvalues, 0.0, None)
    share = b * b * eig * (1.0 - eta * eig) ** (2 * np.asarray(t, dtype=np.float64))
    lo, hi = risk_thresholds(eta, eig) if eig[-1] > 0 else (risk_thresholds(eta, eig[:1])[0], np.inf)
    return RiskProfile(share, float(sigma ** 2 + share.sum()), float(lo), float(hi))


@dataclass(frozen=True)
class PerturbationConfig:
    """Spiked-covariance NTK stability experiment.

    Inputs ``x ~ N(0, diag(1 + sqrt(d/n), 1, ..., 1))``; targets from the
    one-layer teacher ``y = (w/d)^T x + sigma * noise`` with ``w ~ N(0, I)``.
    For each NTK feature the perturbation is found by l2 PGD that pushes the
    feature value up and, separately, down; the larger change is kept.
    """

    d: int = 100
    n: int = 1000
    deltas: Sequence[float] = (0.01, 0.05, 0.1)
    sigma: float = 1.0
    n_probes: int = 1
    pgd_iterations: int = 50
    seed: int = 0
    feature_kind: str = "linear"
    feature_dim: Optional[int] = None
    eig_rel_tol: float = PINV_REL_TOL


@dataclass(frozen=True)
class PerturbationResult:
    """``deviations[k, i]``: mean change of feature i under radius ``deltas[k]``."""

    deltas: np.ndarray
    eigenvalues: np.ndarray
    deviations: np.ndarray
    spearman: np.ndarray
    full_spectrum: np.ndarray
    method: str = "per-feature l2 PGD, both signs, best kept"

    def rows(self):
        for k, delta in enumerate(self.deltas):
            for i, lam in enumerate(self.eigenvalues):
                yield float(delta), i, float(lam), float(self.deviations[k, i])


def perturbation_experiment(config: PerturbationConfig = PerturbationConfig(), backend=None) -> PerturbationResult:
    d, n = config.d, config.n
    if d < 1 or n < 2:
        raise ValueError("need d >= 1 and n >= 2")
    if any(delta < 0 for delta in config.deltas):
        raise ValueError("radii must be >= 0")
    var = np.ones(d)
    var[0] = 1.0 + np.sqrt(d / n)
    X = substream(config.seed, "dataset", 0).standard_normal((n, d)) * np.sqrt(var)
    teacher = substream(config.seed, "teacher", 0).standard_normal(d) / d
    y = X @ teacher + config.sigma * substream(config.seed, "noise", 0).standard_normal(n)
    fm = FeatureMap.create(config.feature_kind, d, config.feature_dim, seed=config.seed)
    system = ntk_gram(fm, X, y)
    # a tolerance of 0 keeps every positive eigenvalue, null-space round-off included
    idx = np.flatnonzero(_kept(system.spectrum.eigenvalues, config.eig_rel_tol))
    probes = substream(config.seed, "probe", 0).standard_normal((config.n_probes, d)) * np.sqrt(var)
    heads = _feature_heads(system, system.Y, config.eig_rel_tol)  # (n, p, 1)
    deltas = np.asarray(config.deltas, dtype=np.float64)
    dev = np.zeros((deltas.shape[0], idx.shape[0]))
    m = probes.shape[0]
    for k, delta in enumerate(deltas):
        if delta == 0:
            continue
        cfg = AttackConfig("l2", delta, iterations=config.pgd_iterations,
                           loss="inner-product-minimization")
        for col, i in enumerate(idx):
            head = GamModel(fm, heads[i])
            base = head.logits(probes)
            best = np.zeros(m)
            for sign in (1.0, -1.0):
                xadv = pgd_batch(head, probes, np.zeros(m), cfg,
                                 combination=np.full((m, 1), sign), backend=backend)[0]
                moved = np.linalg.norm(head.logits(xadv) - base, axis=1)
                best = np.maximum(best, moved)
            dev[k, col] = best.mean()
    lam = system.spectrum.eigenvalues[idx]
    rho = np.array([spearmanr(lam, row).statistic if np.ptp(row) > 0 else np.nan for row in dev])
    return PerturbationResult(deltas, lam, dev, rho, system.spectrum.eigenvalues.copy())
