import dataclasses
import math

import numpy as np
import pytest

from flamefl import oracle as O


def _world(m_a=0, **kw):
    base = dict(m=10, N=5, d=20, b=1.0, sigma=1.0, lam=1.0, rho=0.1, gamma=0.1, m_a=m_a, seed=0)
    base.update(kw)
    return O.make_world(**base)


def test_exact_solution_hand_case():
    w, th = O.exact_solution(np.array([[0.0], [2.0]]), 1.0, 1.0)
    assert w[0] == pytest.approx(1.0)
    np.testing.assert_allclose(th[:, 0], [0.5, 1.5])


def test_exact_solution_limits():
    th_hat = np.random.default_rng(0).standard_normal((4, 3))
    _, th = O.exact_solution(th_hat, 1.0, 1e-12)
    np.testing.assert_allclose(th, th_hat, atol=1e-10)
    w, th = O.exact_solution(th_hat, 1.0, 1e12)
    np.testing.assert_allclose(th, np.tile(w, (4, 1)), atol=1e-10)


def test_general_solution_matches_isotropic():
    from _util import linreg_world
    cl, _ = linreg_world(m=4, N=8, d=3, sigma=0.5, seed=3)
    Xs, ys = [c.X for c in cl], [c.y for c in cl]
    w, th = O.general_solution(Xs, ys, 0.7)
    w2, th2 = O.exact_solution(np.vstack([c.theta_hat for c in cl]), 1.0, 0.7)
    np.testing.assert_allclose(w, w2, atol=1e-12)
    np.testing.assert_allclose(th, th2, atol=1e-12)
    assert O.optimality_residual(Xs, ys, 0.7, w, th) <= 1e-12


def test_clean_losses_degenerate_cases():
    thetas = np.tile([0.5, -1.0], (5, 1))
    world = O.LinRegWorld(5, 4, 2, 1.0, 0.0, 1.0, 0.1, 0.1, thetas)
    assert O.expected_losses(world) == (0.0, 0.0)
    gm, pm = O.expected_losses(dataclasses.replace(_world(), lam=1e9))
    assert pm == pytest.approx(gm, rel=1e-6)


def test_clean_losses_monte_carlo():
    world = _world(N=6, d=4, m=5)
    rng = np.random.default_rng(1)
    trials = 10_000
    th = O.draw_theta_hats(world, rng, trials)
    gm_vals, pm_vals = np.empty(trials), np.empty(trials)
    for k in range(trials):
        w, thetas = O.exact_solution(th[k], world.b, world.lam)
        gm_vals[k] = np.mean([O.client_test_loss(world, w, i) for i in range(world.m)])
        pm_vals[k] = np.mean([O.client_test_loss(world, thetas[i], i) for i in range(world.m)])
    gm, pm = O.expected_losses(world)
    for val, ref in ((gm_vals, gm), (pm_vals, pm)):
        assert abs(val.mean() - ref) <= 3 * val.std(ddof=1) / math.sqrt(trials)


def test_equal_parameters_give_half_shrinkage():
    world = _world(rho=0.1, lam=1.0, b=1.0)
    assert world.q == pytest.approx(0.5)
    th = O.draw_theta_hats(world, np.random.default_rng(0))
    w, _ = O.one_round_protocol(world, th)
    np.testing.assert_allclose(w, 0.5 * th.mean(axis=0))


def test_same_value_zero_gamma_messages():
    world = _world(m_a=3, gamma=0.0)
    th = O.draw_theta_hats(world, np.random.default_rng(0))
    w, _ = O.one_round_protocol(world, th, "same_value", np.random.default_rng(1))
    np.testing.assert_allclose(w, world.q * th[world.benign].sum(axis=0) / world.m)


@pytest.mark.parametrize("kind", ["same_value", "sign_flip", "gaussian"])
def test_attack_monte_carlo(kind):
    world = _world(m_a=2)
    mc = O.monte_carlo(world, kind, 4000, seed=5)
    gm, pm = O.attack_losses(world, kind)
    q = world.q
    for tag, poly in (("GM", gm), ("PM", pm)):
        mean, se = mc[tag]
        assert abs(mean - poly(q)) <= 3 * se


def test_no_malicious_reduces_to_clean():
    world = _world(m_a=0)
    ref = O.attack_losses(world, None)
    for kind in ("same_value", "sign_flip", "gaussian"):
        got = O.attack_losses(world, kind)
        for a, b in zip(got, ref):
            assert (a.a2, a.a1, a.a0) == pytest.approx((b.a2, b.a1, b.a0), rel=1e-14)


def test_reference_losses_at_q_one():
    world = _world(m_a=2)
    gm, pm = O.attack_losses(world, "same_value")
    g1, p1 = O.ditto_pfedme_losses(world, "same_value")
    assert abs(gm(1.0) - g1) <= 1e-12 and abs(pm(1.0) - p1) <= 1e-12


def test_derivative_nonnegative_above_threshold():
    world = _world(m_a=2)
    gm, _ = O.attack_losses(world, "same_value")
    thr = gm.vertex
    h = 1e-6
    for q in np.linspace(max(thr, 0.0) + 1e-3, max(thr, 0.0) + 1.0, 7):
        assert (gm(q + h) - gm(q - h)) / (2 * h) >= -1e-9
    # the closed-form threshold agrees with the polynomial vertex
    assert O.value_attack_thresholds(world)[0] == pytest.approx(thr, rel=1e-10)
    assert O.value_attack_thresholds(world)[1] == pytest.approx(O.attack_losses(world, "same_value")[1].vertex, rel=1e-10)


def test_zero_gamma_attack_differs_from_clean():
    world = _world(m_a=3, gamma=0.0)
    a, _ = O.attack_losses(world, "same_value")
    b, _ = O.attack_losses(world, None)
    assert abs(a(world.q) - b(world.q)) > 1e-6


def test_shrinkage_report_shape():
    rep = O.shrinkage_check(_world(m_a=2), "gaussian")
    for tag in ("GM", "PM"):
        assert set(rep[tag]) >= {"loss_q", "loss_ref", "threshold", "threshold_holds", "flame_not_worse"}
        if rep[tag]["threshold_holds"]:
            assert rep[tag]["flame_not_worse"]


# ------------------------------------------------------------------ fairness


def _equal_norm(seed, m=10, d=20):
    v = np.random.default_rng(seed).standard_normal((m, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_spread_variance_routes_agree():
    th = np.random.default_rng(0).standard_normal((7, 4))
    for q in (0.0, 0.3, 1.0, 1.7):
        assert O.spread_variance(th, q) == pytest.approx(O.spread_variance_pairwise(th, q), rel=1e-12, abs=1e-15)
        h = 1e-6
        fd = (O.spread_variance(th, q + h) - O.spread_variance(th, q - h)) / (2 * h)
        assert O.spread_variance_deriv(th, q) == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_fairness_equal_models():
    th = np.tile([1.0, 2.0], (5, 1))
    for q in (0.1, 0.5, 1.0):
        assert O.fairness_variances(th, q, 1.0, 1.0) == (0.0, 0.0)


def test_fairness_equal_norm_monotone():
    for seed in range(5):
        th = _equal_norm(seed)
        assert O.spread_variance_deriv(th, 1.0) >= 0
        ref = O.fairness_variances(th, 1.0, 1.0, 1.0)
        for q in np.arange(1, 10) / 10:
            got = O.fairness_variances(th, q, 1.0, 1.0)
            assert got[0] <= ref[0] and got[1] <= ref[1]


def test_model_var_flag():
    w = _world(m_a=2)
    assert w.model_var == pytest.approx(1.0 / 5)
    assert dataclasses.replace(w, noise_denom="bm").model_var == pytest.approx(1.0 / 10)
    with pytest.raises(ValueError):
        dataclasses.replace(w, noise_denom="xx")
