"""Loss models with exact gradients, and the inexact proximal (Moreau envelope) solver."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np


class ProxDivergence(FloatingPointError):
    """Inner gradient loop produced a non-finite iterate (step size too large)."""


def _take(X, y, batch):
    if batch is None:
        return X, y
    return X[batch], y[batch]


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


class LossModel:
    """Common interface. Subclasses are frozen dataclasses bound to (X, y)."""

    kind = "base"
    is_classifier = True

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def _check(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise ValueError(f"{self.kind}: expected parameter vector of length {self.dim}, got {theta.shape}")
        return theta

    def rebind(self, X, y):
        return dataclasses.replace(self, X=X, y=y)

    def init_params(self, seed=None) -> np.ndarray:
        return np.zeros(self.dim)


@dataclass(frozen=True)
class LinReg(LossModel):
    """f(theta) = 1/(2N) ||X theta - y||^2."""

    X: np.ndarray
    y: np.ndarray
    kind = "linreg"
    is_classifier = False

    @property
    def dim(self):
        return self.X.shape[1]

    def loss(self, theta, batch=None):
        theta = self._check(theta)
        X, y = _take(self.X, self.y, batch)
        r = X @ theta - y
        return 0.5 * float(r @ r) / len(y)

    def grad(self, theta, batch=None):
        theta = self._check(theta)
        X, y = _take(self.X, self.y, batch)
        return X.T @ (X @ theta - y) / len(y)

    def smoothness(self):
        return float(np.linalg.eigvalsh(self.X.T @ self.X / self.n).max())

    def predict(self, theta):
        return self.X @ self._check(theta)


@dataclass(frozen=True)
class MultinomialLogistic(LossModel):
    """Softmax regression. Parameter layout: W (C x d, row-major) followed by bias (C)."""

    X: np.ndarray
    y: np.ndarray
    num_classes: int
    kind = "logistic"

    @property
    def dim(self):
        return self.num_classes * (self.X.shape[1] + 1)

    def _unpack(self, theta):
        C, d = self.num_classes, self.X.shape[1]
        return theta[: C * d].reshape(C, d), theta[C * d:]

    def logits(self, theta, X=None):
        W, c = self._unpack(self._check(theta))
        return (self.X if X is None else X) @ W.T + c

    def loss(self, theta, batch=None):
        X, y = _take(self.X, self.y, batch)
        lp = _log_softmax(self.logits(theta, X))
        return -float(lp[np.arange(len(y)), y].mean())

    def grad(self, theta, batch=None):
        X, y = _take(self.X, self.y, batch)
        p = np.exp(_log_softmax(self.logits(theta, X)))
        p[np.arange(len(y)), y] -= 1.0
        p /= len(y)
        return np.concatenate([(p.T @ X).ravel(), p.sum(axis=0)])

    def smoothness(self):
        Xt = np.hstack([self.X, np.ones((self.n, 1))])
        return 0.5 * float(np.linalg.eigvalsh(Xt.T @ Xt).max()) / self.n

    def predict(self, theta):
        return np.argmax(self.logits(theta), axis=1)


@dataclass(frozen=True)
class MLP(LossModel):
    """Two ReLU hidden layers and a softmax output.

    Layout: W1 (h1 x d), b1, W2 (h2 x h1), b2, W3 (C x h2), b3, each row-major.
    """

    X: np.ndarray
    y: np.ndarray
    num_classes: int
    hidden: tuple = (64, 32)
    kind = "mlp"

    @property
    def _shapes(self):
        d = self.X.shape[1]
        h1, h2 = self.hidden
        return [(h1, d), (h1,), (h2, h1), (h2,), (self.num_classes, h2), (self.num_classes,)]

    @property
    def dim(self):
        return sum(int(np.prod(s)) for s in self._shapes)

    def _unpack(self, theta):
        out, k = [], 0
        for s in self._shapes:
            size = int(np.prod(s))
            out.append(theta[k:k + size].reshape(s))
            k += size
        return out

    def init_params(self, seed=None):
        rng = np.random.default_rng(seed)
        parts = []
        fan_in = 1
        for s in self._shapes:
            if len(s) == 2:
                fan_in = s[1]  # biases reuse the fan-in of the weight before them
            bound = 1.0 / np.sqrt(fan_in)
            parts.append(rng.uniform(-bound, bound, size=int(np.prod(s))))
        return np.concatenate(parts)

    def _forward(self, theta, X):
        W1, b1, W2, b2, W3, b3 = self._unpack(self._check(theta))
        z1 = X @ W1.T + b1
        a1 = np.maximum(z1, 0.0)
        z2 = a1 @ W2.T + b2
        a2 = np.maximum(z2, 0.0)
        out = a2 @ W3.T + b3
        return (z1, a1, z2, a2), out

    def loss(self, theta, batch=None):
        X, y = _take(self.X, self.y, batch)
        _, out = self._forward(theta, X)
        lp = _log_softmax(out)
        return -float(lp[np.arange(len(y)), y].mean())

    def grad(self, theta, batch=None):
        X, y = _take(self.X, self.y, batch)
        W1, b1, W2, b2, W3, b3 = self._unpack(self._check(theta))
        (z1, a1, z2, a2), out = self._forward(theta, X)
        g = np.exp(_log_softmax(out))
        g[np.arange(len(y)), y] -= 1.0
        g /= len(y)
        dW3 = g.T @ a2
        db3 = g.sum(axis=0)
        d2 = (g @ W3) * (z2 > 0)
        dW2 = d2.T @ a1
        db2 = d2.sum(axis=0)
        d1 = (d2 @ W2) * (z1 > 0)
        dW1 = d1.T @ X
        db1 = d1.sum(axis=0)
        return np.concatenate([a.ravel() for a in (dW1, db1, dW2, db2, dW3, db3)])

    def smoothness(self):
        return float("nan")  # no global bound for ReLU networks

    def predict(self, theta):
        _, out = self._forward(theta, self.X)
        return np.argmax(out, axis=1)


def make_model(kind: str, X, y, num_classes: int = 0, hidden=(64, 32)) -> LossModel:
    if kind == "linreg":
        return LinReg(X, y)
    if kind == "logistic":
        return MultinomialLogistic(X, y, num_classes)
    if kind == "mlp":
        return MLP(X, y, num_classes, tuple(hidden))
    raise ValueError(f"unknown model kind {kind!r}")


def accuracy(model: LossModel, theta, indices=None) -> float:
    """Top-1 accuracy; argmax ties go to the lowest class index."""
    if not model.is_classifier:
        raise TypeError("accuracy is undefined for a regression model")
    if indices is not None:
        model = model.rebind(model.X[indices], model.y[indices])
    if model.n == 0:
        raise ValueError("empty evaluation set")
    return float(np.mean(model.predict(theta) == model.y))


# ---------------------------------------------------------------------- prox


@dataclass
class ProxResult:
    theta: np.ndarray
    residual_sq: float
    iters_used: int
    met_tolerance: bool


def prox_residual(model, theta, anchor, lam, alpha=1.0, P=None, full_grad=None):
    g = model.grad(theta) if full_grad is None else full_grad
    if P is None:
        r = g + lam * (theta - anchor)
    else:
        r = g + lam * (P.T @ (P @ theta - anchor))
    r = alpha * r
    return float(r @ r)


def prox_solve(model: LossModel, anchor, lam: float, eta: float, H_max: int, eps_target: float,
               batch_size=None, seed=None, theta0=None, alpha: float = 1.0, P=None) -> ProxResult:
    """Inexact minimization of f(theta) + lam/2 ||P theta - anchor||^2 (P = I if omitted).

    Each pass is one epoch of mini-batch gradient steps in a seeded shuffled
    order. After every pass the full-batch residual ||alpha * grad||^2 is
    compared with ``eps_target``.
    """
    if eta <= 0 or lam < 0 or H_max < 1:
        raise ValueError("need eta > 0, lam >= 0 and H_max >= 1")
    anchor = np.asarray(anchor, dtype=float)
    theta = np.zeros(model.dim) if theta0 is None else np.array(theta0, dtype=float)
    n = model.n
    full = batch_size is None or batch_size >= n
    rng = np.random.default_rng(seed)

    def pen(th):
        if P is None:
            return lam * (th - anchor)
        return lam * (P.T @ (P @ th - anchor))

    g_full = None
    res = np.inf
    h = 0
    for h in range(1, H_max + 1):
        if full:
            g = model.grad(theta) if g_full is None else g_full
            theta = theta - eta * (g + pen(theta))
        else:
            order = rng.permutation(n)
            for start in range(0, n, batch_size):
                batch = order[start:start + batch_size]
                theta = theta - eta * (model.grad(theta, batch) + pen(theta))
        if not np.all(np.isfinite(theta)):
            raise ProxDivergence(f"non-finite iterate after pass {h} (eta={eta})")
        g_full = model.grad(theta)
        res = prox_residual(model, theta, anchor, lam, alpha, P, full_grad=g_full)
        if res <= eps_target:
            return ProxResult(theta, res, h, True)
    return ProxResult(theta, res, h, False)


def moreau_value(model, w, lam, **prox_kw):
    theta = prox_solve(model, w, lam, **prox_kw).theta
    return model.loss(theta) + 0.5 * lam * float((theta - w) @ (theta - w))


def moreau_grad(model, w, lam, **prox_kw):
    """lam * (w - prox(w))."""
    w = np.asarray(w, dtype=float)
    return lam * (w - prox_solve(model, w, lam, **prox_kw).theta)
