import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rfi.attacks import (AttackConfig, class_labels, clean_accuracy, fgsm, loss_and_gradient, pgd, pgd_batch,
                         predict_labels, robust_accuracy)
from rfi.core import fit_rfi
from rfi.linalg import DimensionError
from rfi.models import FeatureMap, GamModel


def _relu_model(seed, d=5, p=12, C=3):
    fm = FeatureMap.create("random-affine-relu", d, p, seed=seed)
    return GamModel(fm, np.random.default_rng(seed).standard_normal((p, C)))


def _ball_gap(x_adv, x, norm, eps):
    diff = x_adv - x
    size = np.max(np.abs(diff), axis=-1) if norm == "linf" else np.linalg.norm(diff, axis=-1)
    return np.max(size - eps)


def test_config_defaults():
    a = AttackConfig("linf")
    assert (a.epsilon, a.step_size, a.iterations) == (8 / 255, 8 / 255 / 4, 40)
    b = AttackConfig("l2")
    assert (b.epsilon, b.step_size, b.iterations) == (0.5, 0.1, 100)
    assert AttackConfig("l2", 0.0).step_size == 1.0


@pytest.mark.parametrize("kwargs", [dict(norm="l1"), dict(epsilon=-1), dict(step_size=0), dict(iterations=0),
                                    dict(loss="hinge"), dict(clip=(1, 0)), dict(epsilon=np.inf)])
def test_config_rejects(kwargs):
    with pytest.raises(ValueError):
        AttackConfig(**kwargs)


def test_labels():
    assert list(class_labels(np.eye(3)[[2, 0]], 3)) == [2, 0]
    assert list(class_labels([0.5, -2.0, 0.0], 1)) == [1, -1, -1]
    with pytest.raises(DimensionError):
        class_labels([3], 3)
    with pytest.raises(DimensionError):
        class_labels(np.eye(2), 3)
    model = GamModel(FeatureMap.create("linear", 2), np.zeros((2, 3)))
    assert list(predict_labels(model, np.ones((2, 2)))) == [0, 0]  # ties go to the lowest class


def test_fgsm_linear_binary_step(backend):
    beta = np.array([1.5, -0.5, 0.0, 2.0])
    model = GamModel(FeatureMap.create("linear", 4), beta)
    x = np.array([0.3, -1.0, 0.2, 0.5])
    for y in (1, -1):
        res = fgsm(model, x, y, 0.1, backend=backend)
        np.testing.assert_array_equal(res.x_adv, x - 0.1 * y * np.sign(beta))


def test_fgsm_zero_radius_and_zero_gradient():
    model = _relu_model(0)
    x = np.random.default_rng(0).standard_normal(5)
    assert np.array_equal(fgsm(model, x, 1, 0.0).x_adv, x)
    dead = GamModel(FeatureMap.create("linear", 3), np.zeros((3, 2)))
    res = fgsm(dead, np.ones(3), 0, 0.5)
    assert res.reason == "zero-gradient" and not res.success and np.array_equal(res.x_adv, np.ones(3))


def test_fgsm_errors():
    model = _relu_model(0)
    with pytest.raises(ValueError):
        fgsm(model, np.full(5, np.nan), 0, 0.1)
    with pytest.raises(ValueError):
        fgsm(model, np.zeros(5), 0, -0.1)
    with pytest.raises(DimensionError):
        fgsm(model, np.zeros(5), 7, 0.1)


def test_fgsm_statistical_sanity():
    model = _relu_model(1)
    r = np.random.default_rng(1)
    gains = 0
    for _ in range(1000):
        x = r.standard_normal(5)
        y = int(r.integers(3))
        res = fgsm(model, x, y, 0.05)
        assert np.max(np.abs(res.x_adv - x)) <= 0.05 + 1e-9
        gains += res.loss_trace[-1] >= res.loss_trace[0]
    assert gains >= 950


@pytest.mark.parametrize("kind", ["linear", "random-linear"])
@pytest.mark.parametrize("loss", ["cross-entropy", "margin", "inner-product-minimization"])
def test_one_step_pgd_equals_fgsm(kind, loss, backend):
    r = np.random.default_rng(2)
    fm = FeatureMap.create(kind, 6, 6 if kind == "linear" else 10, seed=2)
    model = GamModel(fm, r.standard_normal((fm.feature_dim, 3)))
    eps = 0.2
    cfg = AttackConfig("linf", eps, step_size=eps, iterations=1, loss=loss)
    for _ in range(50):
        x, y = r.standard_normal(6), int(r.integers(3))
        a = fgsm(model, x, y, eps, loss=loss, backend=backend)
        b = pgd(model, x, y, cfg, backend=backend)
        assert np.array_equal(a.x_adv, b.x_adv)


def test_pgd_l2_reaches_analytic_optimum(backend):
    r = np.random.default_rng(3)
    beta = r.standard_normal(7)
    model = GamModel(FeatureMap.create("linear", 7), beta)
    cfg = AttackConfig("l2", 0.4, loss="inner-product-minimization")
    for y in (1, -1):
        x = r.standard_normal(7)
        res = pgd(model, x, y, cfg, backend=backend)
        np.testing.assert_allclose(res.x_adv, x - 0.4 * y * beta / np.linalg.norm(beta), atol=1e-6)


@pytest.mark.parametrize("norm", ["linf", "l2"])
@pytest.mark.parametrize("random_start", [False, True])
def test_ball_feasibility_and_trace(norm, random_start, backend):
    model = _relu_model(4)
    r = np.random.default_rng(4)
    X = r.standard_normal((40, 5))
    eps = 0.3
    cfg = AttackConfig(norm, eps, random_start=random_start, seed=9)
    labels = predict_labels(model, X)
    xadv, best, trace, _ = pgd_batch(model, X, labels, cfg, backend=backend)
    assert _ball_gap(xadv, X, norm, eps) <= 1e-9
    assert trace.shape == (40, cfg.iterations + 1)
    assert np.all(np.diff(trace, axis=1) >= 0)
    np.testing.assert_array_equal(trace[:, -1], best)
    loss_adv, _ = loss_and_gradient(model, xadv, labels, backend=backend)
    np.testing.assert_allclose(loss_adv, best, rtol=1e-12, atol=1e-12)
    if not random_start:
        loss0, _ = loss_and_gradient(model, X, labels, backend=backend)
        assert np.all(best >= loss0)


def test_clip_flag():
    model = _relu_model(5)
    X = np.random.default_rng(5).uniform(0, 1, (10, 5))
    cfg = AttackConfig("linf", 0.3, clip=(0.0, 1.0))
    xadv = pgd_batch(model, X, predict_labels(model, X), cfg)[0]
    assert xadv.min() >= 0 and xadv.max() <= 1


def test_determinism_and_batch_independence():
    model = _relu_model(6)
    X = np.random.default_rng(6).standard_normal((12, 5))
    cfg = AttackConfig("l2", 0.5, random_start=True, seed=3)
    labels = predict_labels(model, X)
    a = pgd_batch(model, X, labels, cfg)
    b = pgd_batch(model, X, labels, cfg)
    assert all(np.array_equal(u, v) for u, v in zip(a, b))
    tail = pgd_batch(model, X[5:], labels[5:], cfg, index_offset=5)
    np.testing.assert_array_equal(tail[0], a[0][5:])
    r1, r2 = pgd(model, X[0], labels[0], cfg), pgd(model, X[0], labels[0], cfg)
    assert np.array_equal(r1.x_adv, r2.x_adv) and np.array_equal(r1.loss_trace, r2.loss_trace)


def test_pgd_zero_gradient_flag():
    dead = GamModel(FeatureMap.create("linear", 3), np.zeros((3, 2)))
    res = pgd(dead, np.ones(3), 1, AttackConfig("l2", 0.5))
    assert res.reason == "zero-gradient" and np.array_equal(res.x_adv, np.ones(3))


def test_robust_accuracy_zero_radius_equals_clean():
    model = _relu_model(7)
    r = np.random.default_rng(7)
    X, y = r.standard_normal((50, 5)), r.integers(0, 3, 50)
    assert robust_accuracy(model, X, y, AttackConfig("linf", 0.0)) == clean_accuracy(model, X, y)


def test_constant_model_accuracy_is_prior():
    model = GamModel(FeatureMap.create("random-affine-relu", 4, 6, seed=0), np.zeros((6, 3)))
    y = np.array([0, 0, 1, 2, 0, 1, 2, 2])
    X = np.random.default_rng(0).standard_normal((8, 4))
    assert robust_accuracy(model, X, y, AttackConfig("l2", 1.0)) == 3 / 8 == clean_accuracy(model, X, y)


def test_attack_only_hurts(backend):
    model = _relu_model(8)
    X = np.random.default_rng(8).standard_normal((100, 5))
    y = predict_labels(model, X + 0.3 * np.random.default_rng(9).standard_normal((100, 5)))
    cfg = AttackConfig("linf")
    assert robust_accuracy(model, X, y, cfg, backend=backend) <= clean_accuracy(model, X, y)


def test_projector_defended_accuracy_at_full_basis():
    model = _relu_model(9)
    X = np.random.default_rng(9).standard_normal((60, 5))
    y = predict_labels(model, X)
    proj = fit_rfi(model.feature_map.feature_matrix(X), model.weights, K=12)
    cfg = AttackConfig("l2", 0.5)
    assert robust_accuracy(model, X, y, cfg, projector=proj) == robust_accuracy(model, X, y, cfg)


def test_harness_errors():
    model = _relu_model(0)
    with pytest.raises(ValueError):
        robust_accuracy(model, np.zeros((0, 5)), [], AttackConfig())
    with pytest.raises(DimensionError):
        robust_accuracy(model, np.zeros((3, 5)), [0, 1], AttackConfig())
    with pytest.raises(DimensionError):
        pgd_batch(model, np.zeros((3, 4)), [0, 1, 2], AttackConfig())


@settings(max_examples=25)
@given(st.sampled_from(["linf", "l2"]), st.floats(0.0, 2.0), st.integers(1, 8), st.integers(0, 500),
       st.sampled_from(["cross-entropy", "margin", "inner-product-minimization"]))
def test_property_feasible_and_monotone(norm, eps, iters, seed, loss):
    model = _relu_model(seed % 7)
    X = np.random.default_rng(seed).standard_normal((6, 5))
    cfg = AttackConfig(norm, eps, iterations=iters, loss=loss)
    labels = predict_labels(model, X)
    xadv, best, trace, _ = pgd_batch(model, X, labels, cfg)
    assert _ball_gap(xadv, X, norm, eps) <= 1e-9
    assert np.all(np.diff(trace, axis=1) >= 0)
