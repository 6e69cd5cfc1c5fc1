"""Shared builders for the test suite."""

import numpy as np

from flamefl.datasets import linreg_federated, synth_linreg
from flamefl.models import LinReg, MultinomialLogistic


def linreg_world(m=10, N=50, d=10, b=1.0, sigma=0.1, seed=0, theta_gen=None):
    """Isotropic regression clients; returns (client data, training models)."""
    theta_gen = theta_gen or {"kind": "gaussian", "scale": 1.0}
    cl = synth_linreg(m, N, d, b, sigma, theta_gen, seed)
    return cl, [LinReg(c.X, c.y) for c in cl]


def linreg_split(m=10, N=20, d=10, b=1.0, sigma=1.0, seed=0, theta_gen=None):
    cl, train = linreg_world(m, N, d, b, sigma, seed, theta_gen)
    fed = linreg_federated(cl, seed)
    test = [LinReg(*fed.client_test(i)) for i in range(m)]
    return cl, train, test


def logistic_models(m=4, n=30, d=3, C=3, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(m):
        X = rng.standard_normal((n, d)) + i * 0.3
        y = rng.integers(0, C, n)
        out.append(MultinomialLogistic(X, y, C))
    return out


def pooled_least_squares(clients):
    X = np.vstack([c.X for c in clients])
    y = np.concatenate([c.y for c in clients])
    return np.linalg.solve(X.T @ X, X.T @ y)
