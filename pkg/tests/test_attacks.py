import math

import numpy as np
import pytest

from flamefl import attacks as A
from flamefl import engine as E
from flamefl.models import LinReg
from _util import linreg_world, logistic_models


def _rng(s=0):
    return np.random.default_rng(s)


def test_zero_gamma_gives_zero():
    u = np.array([1.0, -2.0, 0.5])
    assert not A.corrupt_message("same_value", u, 0.0, _rng()).any()
    assert not A.corrupt_message("sign_flip", u, 0.0, _rng()).any()
    assert not A.corrupt_message("gaussian", u, 0.0, _rng()).any()


def test_same_value_is_constant():
    out = A.corrupt_message("same_value", np.zeros(5), 0.3, _rng(2))
    assert np.all(out == out[0])


def test_sign_flip_mean():
    u = np.array([1.0, -0.5, 2.0])
    gamma, n = 0.7, 100_000
    rng = _rng(1)
    draws = np.array([A.corrupt_message("sign_flip", u, gamma, rng) for _ in range(n)])
    mean = draws.mean(axis=0)
    se = draws.std(axis=0, ddof=1) / math.sqrt(n)
    assert np.all(np.abs(mean + math.sqrt(2 / math.pi) * gamma * u) <= 3 * se)


def test_label_flip_twice_identity_and_uniform():
    y = _rng().integers(0, 2, 50)
    idx = np.arange(50)
    once = A.poison_labels(y, idx, 2, "flip", 0)
    assert np.all(once != y)
    assert np.array_equal(A.poison_labels(once, idx, 2, "flip", 0), y)
    C, n = 5, 20_000
    y = _rng().integers(0, C, n)
    new = A.poison_labels(y, np.arange(n), C, "uniform", 3)
    frac = np.mean(new == y)
    assert abs(frac - 1 / C) <= 3 * math.sqrt(1 / C * (1 - 1 / C) / n)
    with pytest.raises(ValueError):
        A.poison_labels(y, idx, 3, "flip", 0)


def test_malicious_counts():
    assert len(A.malicious_set(10, 0.2, 0)) == 2
    assert len(A.malicious_set(10, 0.5, 3)) == 5
    assert A.malicious_count(5, 0.5) == 3
    assert A.malicious_set(10, 0.2, 4) == A.malicious_set(10, 0.2, 4)
    with pytest.raises(ValueError):
        A.AttackConfig("same_value", fraction=1.5)


def test_fraction_zero_is_clean():
    _, models = linreg_world(m=4, N=10, d=3, sigma=0.5)
    hp = E.HyperParams(lam=1.0, rho=0.1, eta=0.5, T=5, batch_size=None)
    setup = A.apply_attack(A.AttackConfig("same_value", 0.1, 0.0), models, 0)
    assert setup.upload_hook is None and setup.malicious == []
    a = E.Engine(hp, setup.models, 0, override=True).run()
    b = E.Engine(hp, models, 0, override=True).run()
    for x, y in zip(a, b):
        assert np.array_equal(x.w, y.w)


def test_byzantine_attack_factors_through_uploads():
    # benign states cannot depend on what the malicious clients hold locally
    cl, models = linreg_world(m=5, N=10, d=3, sigma=0.5)
    cfg = A.AttackConfig("same_value", 0.2, malicious=[1, 3])
    hp = E.HyperParams(lam=1.0, rho=0.1, eta=0.5, T=6, batch_size=None)
    setup = A.apply_attack(cfg, models, 7)
    assert setup.models == list(models)
    other = list(models)
    for i in (1, 3):
        other[i] = LinReg(models[i].X, -3.0 * models[i].y)
    setup2 = A.apply_attack(cfg, other, 7)
    a = E.Engine(hp, setup.models, 7, override=True, upload_hook=setup.upload_hook).run()
    b = E.Engine(hp, setup2.models, 7, override=True, upload_hook=setup2.upload_hook).run()
    for x, y in zip(a, b):
        assert np.array_equal(x.w, y.w)
        for i in (0, 2, 4):
            assert np.array_equal(x.theta[i], y.theta[i])


def test_label_poison_touches_data_only():
    models = logistic_models(m=4, C=3)
    setup = A.apply_attack(A.AttackConfig("label_poison", fraction=0.5, poison_mode="uniform"), models, 1)
    assert setup.upload_hook is None
    for i, (old, new) in enumerate(zip(models, setup.models)):
        assert np.array_equal(old.X, new.X)
        if i in setup.malicious:
            assert not np.array_equal(old.y, new.y)
        else:
            assert new is old
