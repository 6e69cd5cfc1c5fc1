import math

import numpy as np
import pytest

from flamefl import models as M
from flamefl.datasets import orthogonal_design, synth_linreg


def _fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for k in range(len(x)):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def _toy(kind, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((12, 3))
    if kind == "linreg":
        return M.make_model("linreg", X, rng.standard_normal(12))
    return M.make_model(kind, X, rng.integers(0, 3, 12), num_classes=3, hidden=(5, 4))


def test_linreg_hand_values():
    mod = M.LinReg(np.array([[1.0], [1.0]]), np.array([0.0, 2.0]))
    assert mod.loss(np.zeros(1)) == pytest.approx(1.0)
    c = synth_linreg(1, 6, 2, 1.0, 0.0, [[0.3, -0.2]], 0)[0]
    assert M.LinReg(c.X, c.y).loss(c.true_theta) == pytest.approx(0.0, abs=1e-24)


def test_linreg_grad_zero_at_estimate():
    c = synth_linreg(1, 9, 3, 1.0, 0.5, {"kind": "gaussian"}, 2)[0]
    g = M.LinReg(c.X, c.y).grad(c.theta_hat)
    assert np.max(np.abs(g)) < 1e-10


def test_logistic_uniform_loss():
    mod = _toy("logistic")
    assert mod.loss(np.zeros(mod.dim)) == pytest.approx(math.log(3))


def test_logistic_single_sample_grad():
    x = np.array([[0.5, -2.0]])
    mod = M.MultinomialLogistic(x, np.array([1]), 2)
    g = mod.grad(np.zeros(mod.dim))
    p_minus_onehot = np.array([0.5, -0.5])
    np.testing.assert_allclose(g[:4].reshape(2, 2), np.outer(p_minus_onehot, x[0]))
    np.testing.assert_allclose(g[4:], p_minus_onehot)


@pytest.mark.parametrize("kind", ["linreg", "logistic", "mlp"])
def test_finite_differences(kind):
    mod = _toy(kind)
    rng = np.random.default_rng(1)
    for _ in range(10):
        th = 0.5 * rng.standard_normal(mod.dim)
        np.testing.assert_allclose(mod.grad(th), _fd_grad(mod.loss, th), atol=1e-6, rtol=1e-5)


def test_minibatch_grad_matches_subset():
    mod = _toy("logistic")
    th = np.random.default_rng(2).standard_normal(mod.dim)
    batch = np.array([0, 3, 7])
    sub = mod.rebind(mod.X[batch], mod.y[batch])
    np.testing.assert_allclose(mod.grad(th, batch), sub.grad(th))


def test_mlp_init_deterministic_and_bounded():
    mod = _toy("mlp")
    a, b = mod.init_params(5), mod.init_params(5)
    assert np.array_equal(a, b)
    assert np.max(np.abs(a)) <= 1 / math.sqrt(3) + 1e-12
    assert math.isnan(mod.smoothness())


def test_shape_check():
    with pytest.raises(ValueError):
        _toy("linreg").loss(np.zeros(7))


def _iso_model(b=1.0, seed=0, N=8, d=3):
    rng = np.random.default_rng(seed)
    X = orthogonal_design(N, d, b, rng)
    y = X @ rng.standard_normal(d) + 0.3 * rng.standard_normal(N)
    return M.LinReg(X, y), np.linalg.solve(X.T @ X, X.T @ y)


def test_prox_closed_form():
    b, lam = 1.0, 2.0
    mod, th_hat = _iso_model(b)
    anchor = np.array([1.0, -1.0, 0.5])
    res = M.prox_solve(mod, anchor, lam, eta=0.05, H_max=2000, eps_target=0.0)
    np.testing.assert_allclose(res.theta, (b * th_hat + lam * anchor) / (b + lam), atol=1e-6)
    # step 1/(b+lam) solves the isotropic problem in one pass
    one = M.prox_solve(mod, anchor, lam, eta=1 / (b + lam), H_max=1, eps_target=1e-20)
    np.testing.assert_allclose(one.theta, (b * th_hat + lam * anchor) / (b + lam), atol=1e-12)


def test_prox_large_lambda():
    mod, _ = _iso_model()
    anchor = np.array([2.0, 0.0, -1.0])
    res = M.prox_solve(mod, anchor, 1e6, eta=1 / (1 + 1e6), H_max=5, eps_target=0.0)
    assert np.linalg.norm(res.theta - anchor) <= 1e-4 * np.linalg.norm(anchor)


def test_prox_huge_tolerance_stops_after_first_check():
    mod, _ = _iso_model()
    res = M.prox_solve(mod, np.zeros(3), 1.0, eta=0.1, H_max=50, eps_target=1e9)
    assert res.met_tolerance and res.iters_used == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_prox_divergence():
    mod, _ = _iso_model()
    with pytest.raises(M.ProxDivergence):
        M.prox_solve(mod, np.zeros(3), 1.0, eta=1e200, H_max=5, eps_target=0.0, theta0=np.ones(3))


def test_prox_minibatch_seeded():
    mod = _toy("logistic")
    kw = dict(anchor=np.zeros(mod.dim), lam=0.5, eta=0.1, H_max=3, eps_target=0.0, batch_size=4)
    a = M.prox_solve(mod, seed=[1, 2], **kw)
    b = M.prox_solve(mod, seed=[1, 2], **kw)
    assert np.array_equal(a.theta, b.theta)


def test_moreau_grad_closed_form():
    b, lam = 1.0, 1.5
    mod, th_hat = _iso_model(b)
    kw = dict(eta=1 / (b + lam), H_max=1, eps_target=0.0)
    w = np.array([0.3, 0.1, -0.7])
    np.testing.assert_allclose(M.moreau_grad(mod, w, lam, **kw), lam * b / (b + lam) * (w - th_hat), atol=1e-12)
    assert np.max(np.abs(M.moreau_grad(mod, th_hat, lam, **kw))) < 1e-12


def test_moreau_grad_finite_difference():
    mod = _toy("logistic")
    lam = 2.0
    kw = dict(eta=0.2, H_max=3000, eps_target=1e-24)
    rng = np.random.default_rng(4)
    for _ in range(5):
        w = 0.3 * rng.standard_normal(mod.dim)
        fd = _fd_grad(lambda v: M.moreau_value(mod, v, lam, **kw), w, h=1e-4)
        np.testing.assert_allclose(M.moreau_grad(mod, w, lam, **kw), fd, atol=1e-3)


def test_accuracy():
    X = np.eye(3)
    y = np.array([0, 1, 2])
    mod = M.MultinomialLogistic(X, y, 3)
    perfect = np.concatenate([(5 * np.eye(3)).ravel(), np.zeros(3)])
    assert M.accuracy(mod, perfect) == 1.0
    rng = np.random.default_rng(0)
    big = M.MultinomialLogistic(rng.standard_normal((3000, 2)), rng.integers(0, 3, 3000), 3)
    const = np.concatenate([np.zeros(6), [0.0, 0.0, 1.0]])
    assert abs(M.accuracy(big, const) - 1 / 3) < 3 * math.sqrt(2 / 9 / 3000)
    with pytest.raises(ValueError):
        M.accuracy(mod, perfect, indices=np.array([], dtype=int))
    with pytest.raises(TypeError):
        M.accuracy(_toy("linreg"), np.zeros(3))
