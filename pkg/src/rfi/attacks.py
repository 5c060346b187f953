"""FGSM and PGD attacks on GAM predictors, plus a robust-accuracy harness.

Gradients are analytic (the feature maps expose their Jacobians), and the
inner loops run in the compiled kernel when it is available. Losses:

* ``cross-entropy`` and ``margin`` on the logits, for C >= 2 classes;
* ``inner-product-minimization``: maximize ``-w . z``, i.e. drive the
  combination ``w . z`` down. With a class label ``l`` the combination is
  ``e_l``; callers may pass an explicit combination instead.

Single-output models (C = 1) are binary with labels in {-1, +1} and
prediction ``sign(z)`` (0 counts as -1). All three losses then reduce to
``-y z``, which has the same sign steps, the same normalized l2 steps and
the same best-iterate ordering as the logistic loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .linalg import DimensionError
from .models import GamModel
from .rng import substream

NORMS = ("linf", "l2")
LOSSES = {"cross-entropy": 0, "margin": 1, "inner-product-minimization": 2}

# defaults of the standard evaluation protocol
DEFAULT_EPSILON = {"linf": 8.0 / 255.0, "l2": 0.5}
DEFAULT_STEP_DIVISOR = {"linf": 4.0, "l2": 5.0}
DEFAULT_ITERATIONS = {"linf": 40, "l2": 100}


@dataclass(frozen=True)
class AttackConfig:
    """Attack settings; unset epsilon / step / iterations take the norm's defaults.

    The default step is ``epsilon / 4`` (linf) or ``epsilon / 5`` (l2). With
    ``epsilon = 0`` the step is irrelevant and defaults to 1.
    """

    norm: str = "linf"
    epsilon: Optional[float] = None
    step_size: Optional[float] = None
    iterations: Optional[int] = None
    loss: str = "cross-entropy"
    random_start: bool = False
    seed: int = 0
    clip: Optional[tuple] = None

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {sorted(LOSSES)}, got {self.loss!r}")
        eps = DEFAULT_EPSILON[self.norm] if self.epsilon is None else float(self.epsilon)
        if not np.isfinite(eps) or eps < 0:
            raise ValueError("epsilon must be finite and >= 0")
        step = self.step_size
        if step is None:
            step = eps / DEFAULT_STEP_DIVISOR[self.norm] if eps > 0 else 1.0
        step = float(step)
        if not np.isfinite(step) or step <= 0:
            raise ValueError("step_size must be > 0")
        iters = DEFAULT_ITERATIONS[self.norm] if self.iterations is None else int(self.iterations)
        if iters < 1:
            raise ValueError("iterations must be >= 1")
        if self.clip is not None:
            lo, hi = map(float, self.clip)
            if not lo <= hi:
                raise ValueError("clip bounds must satisfy lo <= hi")
            object.__setattr__(self, "clip", (lo, hi))
        object.__setattr__(self, "epsilon", eps)
        object.__setattr__(self, "step_size", step)
        object.__setattr__(self, "iterations", iters)

    @property
    def loss_kind(self) -> int:
        return LOSSES[self.loss]


@dataclass(frozen=True)
class AttackResult:
    x_adv: np.ndarray
    success: bool
    loss_trace: np.ndarray
    reason: str = ""
    loss: float = field(default=np.nan)


def _model_arrays(model: GamModel):
    fm = model.feature_map
    return (np.ascontiguousarray(fm.W, dtype=np.float64),
            np.ascontiguousarray(fm.b, dtype=np.float64),
            bool(fm.relu),
            np.ascontiguousarray(model.weights, dtype=np.float64))


def predict_labels(model: GamModel, X) -> np.ndarray:
    """Argmax labels (lowest index on ties); signs in {-1, +1} for C = 1."""
    z = model.logits(np.atleast_2d(X))
    if model.n_outputs == 1:
        return np.where(z[:, 0] > 0.0, 1, -1)
    return np.argmax(z, axis=1)


def class_labels(Y, n_outputs: int) -> np.ndarray:
    """Labels from a one-hot / score matrix, an integer vector, or signs (C = 1)."""
    Y = np.asarray(Y)
    if n_outputs == 1:
        y = Y.reshape(-1).astype(np.float64)
        return np.where(y > 0.0, 1, -1)
    if Y.ndim == 2:
        if Y.shape[1] != n_outputs:
            raise DimensionError(f"labels have {Y.shape[1]} columns, model has {n_outputs} outputs")
        return np.argmax(Y, axis=1)
    y = Y.astype(np.int64)
    if np.any((y < 0) | (y >= n_outputs)):
        raise DimensionError("class label out of range")
    return y


def _kernel_inputs(model: GamModel, labels, loss: str, combination=None):
    """Per-sample (labels, combination rows, kernel loss kind)."""
    m = labels.shape[0]
    C = model.n_outputs
    if combination is not None:
        lin_w = np.array(np.broadcast_to(np.asarray(combination, dtype=np.float64), (m, C)))
        return np.zeros(m, dtype=np.int64), lin_w, 2
    if C == 1:
        lin_w = np.ascontiguousarray(labels.reshape(m, 1).astype(np.float64))
        return np.zeros(m, dtype=np.int64), lin_w, 2
    kind = LOSSES[loss]
    lab = np.ascontiguousarray(labels, dtype=np.int64)
    lin_w = np.zeros((m, C))
    if kind == 2:
        lin_w[np.arange(m), lab] = 1.0
    return lab, lin_w, kind


def _random_starts(config: AttackConfig, m: int, d: int, offset: int = 0) -> np.ndarray:
    delta = np.zeros((m, d))
    if not config.random_start or config.epsilon == 0:
        return delta
    eps = config.epsilon
    for i in range(m):
        rng = substream(config.seed, "attack", offset + i)
        if config.norm == "linf":
            delta[i] = rng.uniform(-eps, eps, d)
        else:
            g = rng.standard_normal(d)
            nrm = np.linalg.norm(g)
            delta[i] = g / nrm * eps * rng.uniform() ** (1.0 / d) if nrm > 0 else 0.0
    return delta


def loss_and_gradient(model: GamModel, X, labels, loss: str = "cross-entropy", combination=None, backend=None):
    """Per-sample attack loss and its input-gradient for a batch."""
    X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
    labels = np.asarray(labels).reshape(-1)
    lab, lin_w, kind = _kernel_inputs(model, labels, loss, combination)
    W, b, relu, beta = _model_arrays(model)
    return kernels.get_backend(backend).loss_and_grad(X, W, b, relu, beta, kind, lab, lin_w)


def pgd_batch(model: GamModel, X, labels, config: AttackConfig, combination=None,
              backend=None, index_offset: int = 0):
    """Run PGD on every row of X. Returns (x_adv, best_loss, loss_trace, zero_gradient).

    ``loss_trace[i, t]`` is the best loss seen up to iterate t, so it never
    decreases. Sample i draws its random start from the ``attack`` stream at
    key ``index_offset + i``, so results do not depend on batching.
    """
    X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
    if X.shape[1] != model.feature_map.input_dim:
        raise DimensionError(f"inputs have dim {X.shape[1]}, model expects {model.feature_map.input_dim}")
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if not np.all(np.isfinite(X)):
        raise ValueError("inputs have non-finite entries")
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != X.shape[0]:
        raise DimensionError("one label per input row is required")
    lab, lin_w, kind = _kernel_inputs(model, labels, config.loss, combination)
    W, b, relu, beta = _model_arrays(model)
    delta0 = _random_starts(config, X.shape[0], X.shape[1], index_offset)
    lo, hi = config.clip if config.clip is not None else (0.0, 0.0)
    kern = kernels.get_backend(backend)
    return kern.pgd(X, delta0, W, b, relu, beta, kind, lab, lin_w,
                    config.epsilon, config.step_size, config.iterations,
                    0 if config.norm == "linf" else 1,
                    config.clip is not None, lo, hi, kernels.n_threads())


def _single_label(model: GamModel, y_true):
    if model.n_outputs == 1:
        y = float(np.asarray(y_true).reshape(-1)[0])
        if y not in (-1.0, 1.0):
            raise ValueError("binary labels must be -1 or +1")
        return np.array([int(y)])
    y = int(y_true)
    if not 0 <= y < model.n_outputs:
        raise DimensionError(f"label {y} out of range")
    return np.array([y])


def _flipped(model: GamModel, x_adv, label) -> bool:
    return bool(predict_labels(model, x_adv[None, :])[0] != label)


def pgd(model: GamModel, x, y_true, config: AttackConfig, combination=None, backend=None) -> AttackResult:
    """Projected gradient ascent on the loss within the epsilon ball; best iterate returned."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    lab = _single_label(model, y_true)
    xadv, best, trace, zero = pgd_batch(model, x, lab, config, combination, backend)
    reason = "zero-gradient" if zero[0] else ""
    return AttackResult(xadv[0], _flipped(model, xadv[0], lab[0]), trace[0], reason, float(best[0]))


def fgsm(model: GamModel, x, y_true, epsilon: float, loss: str = "cross-entropy",
         clip: Optional[tuple] = None, combination=None, backend=None) -> AttackResult:
    """One signed-gradient step of size epsilon: ``x + epsilon * sign(grad)``."""
    if not np.isfinite(epsilon) or epsilon < 0:
        raise ValueError("epsilon must be finite and >= 0")
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    if not np.all(np.isfinite(x)):
        raise ValueError("input has non-finite entries")
    lab = _single_label(model, y_true)
    loss0, grad = loss_and_gradient(model, x, lab, loss, combination, backend)
    if not np.any(grad):
        return AttackResult(x[0].copy(), False, np.array([loss0[0]]), "zero-gradient", float(loss0[0]))
    x_adv = x + epsilon * np.sign(grad)
    if clip is not None:
        x_adv = np.clip(x_adv, clip[0], clip[1])
    loss1, _ = loss_and_gradient(model, x_adv, lab, loss, combination, backend)
    return AttackResult(x_adv[0], _flipped(model, x_adv[0], lab[0]),
                        np.array([loss0[0], loss1[0]]), "", float(loss1[0]))


def robust_accuracy(model: GamModel, X, Y, config: AttackConfig, projector=None, backend=None) -> float:
    """Fraction of samples still classified correctly after the attack.

    With ``projector`` the defended model (projected weights) is attacked
    and evaluated; gradients flow through the projection.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("empty dataset")
    target = projector.as_model(model) if projector is not None else model
    labels = class_labels(Y, target.n_outputs)
    if labels.shape[0] != X.shape[0]:
        raise DimensionError("one label per input row is required")
    if config.epsilon == 0:
        x_adv = X
    else:
        x_adv = pgd_batch(target, X, labels, config, backend=backend)[0]
    return float(np.mean(predict_labels(target, x_adv) == labels))


def clean_accuracy(model: GamModel, X, Y, projector=None) -> float:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("empty dataset")
    target = projector.as_model(model) if projector is not None else model
    return float(np.mean(predict_labels(target, X) == class_labels(Y, target.n_outputs)))
