"""Evaluation (personal / global / hybrid models), fairness variance and the
Lyapunov-based convergence diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import accuracy


def fairness_variance(values) -> float:
    """Population variance of per-client metrics."""
    v = np.asarray(values, dtype=float)
    return float(np.mean((v - v.mean()) ** 2))


def benign_mean(values, benign=None) -> float:
    v = np.asarray(values, dtype=float)
    if benign is None:
        return float(v.mean())
    return float(v[np.asarray(benign, dtype=bool)].mean())


# ------------------------------------------------------------------ evaluate


@dataclass
class EvalResult:
    loss: dict       # model tag -> per-client test loss
    acc: dict        # model tag -> per-client test accuracy (nan for regression)
    val: dict        # model tag -> per-client validation metric used for selection
    hm_choice: list  # "PM" or "GM" per client
    benign: np.ndarray

    def summary(self) -> dict:
        out = {}
        for tag in ("PM", "GM", "HM"):
            out[f"{tag}_loss_mean"] = benign_mean(self.loss[tag])
            out[f"{tag}_acc_mean"] = benign_mean(self.acc[tag])
            out[f"{tag}_loss_var"] = fairness_variance(self.loss[tag])
            out[f"{tag}_acc_var"] = fairness_variance(self.acc[tag])
            out[f"{tag}_benign_loss"] = benign_mean(self.loss[tag], self.benign)
            out[f"{tag}_benign_acc"] = benign_mean(self.acc[tag], self.benign)
        return out


def _score(model, theta):
    """Higher is better: accuracy for classifiers, negative loss for regression."""
    if model.n == 0:
        return float("nan")
    if model.is_classifier:
        return accuracy(model, theta)
    return -model.loss(theta)


def evaluate(thetas, w, test_models, val_models=None, benign=None) -> EvalResult:
    """Per-client metrics for the personal models, the global model and the
    hybrid choice. The hybrid picks whichever of the two scores better on the
    client's validation data; ties and missing validation data go to PM."""
    m = len(test_models)
    benign = np.ones(m, dtype=bool) if benign is None else np.asarray(benign, dtype=bool)
    loss = {"PM": [], "GM": [], "HM": []}
    acc = {"PM": [], "GM": [], "HM": []}
    val = {"PM": [], "GM": [], "HM": []}
    choice = []
    for i, tm in enumerate(test_models):
        if tm.n == 0:
            raise ValueError(f"client {i} has an empty test set")
        cands = {"PM": thetas[i], "GM": w if w is not None else thetas[i]}
        for tag, th in cands.items():
            loss[tag].append(tm.loss(th))
            acc[tag].append(accuracy(tm, th) if tm.is_classifier else float("nan"))
            val[tag].append(_score(val_models[i], th) if val_models is not None else float("nan"))
        pv, gv = val["PM"][-1], val["GM"][-1]
        pick = "GM" if (np.isfinite(gv) and np.isfinite(pv) and gv > pv) else "PM"
        choice.append(pick)
        loss["HM"].append(loss[pick][-1])
        acc["HM"].append(acc[pick][-1])
        val["HM"].append(max(pv, gv) if np.isfinite(pv) and np.isfinite(gv) else pv)
    arr = lambda d: {k: np.asarray(v, dtype=float) for k, v in d.items()}
    return EvalResult(arr(loss), arr(acc), arr(val), choice, benign)


# ------------------------------------------------------------- Lyapunov terms


def _proj(c, P):
    return c.theta if P is None else P @ c.theta


def lagrangian(clients, w, lam, rho, P=None) -> float:
    total = 0.0
    for c in clients:
        dth = _proj(c, P) - c.w_local
        dw = c.w_local - w
        total += c.alpha * (c.model.loss(c.theta) + 0.5 * lam * float(dth @ dth))
        total += float(c.pi @ dw) + 0.5 * rho * float(dw @ dw)
    return total


def lyapunov(clients, w, lam, rho, iota, P=None) -> float:
    """Augmented Lagrangian plus sum_i iota_i * eps_i."""
    iota = np.broadcast_to(np.asarray(iota, dtype=float), (len(clients),))
    return lagrangian(clients, w, lam, rho, P) + float(sum(k * c.eps for k, c in zip(iota, clients)))


def grad_blocks(clients, w, lam, rho, P=None) -> dict:
    """Closed-form partial gradients of the augmented Lagrangian."""
    g_theta, g_wloc, g_pi = [], [], []
    g_w = np.zeros_like(np.asarray(w, dtype=float))
    for c in clients:
        diff = _proj(c, P) - c.w_local
        pen = lam * diff if P is None else lam * (P.T @ diff)
        g_theta.append(c.alpha * (c.model.grad(c.theta) + pen))
        g_wloc.append(-c.alpha * lam * diff + c.pi + rho * (c.w_local - w))
        g_pi.append(c.w_local - w)
        g_w -= c.pi + rho * (c.w_local - w)
    return {"theta": g_theta, "w_local": g_wloc, "pi": g_pi, "w": g_w}


def grad_norm_sq(blocks) -> float:
    s = sum(float(g @ g) for key in ("theta", "w_local", "pi") for g in blocks[key])
    return s + float(blocks["w"] @ blocks["w"])


def delta_gamma(prev, cur) -> float:
    """sum_i (||dw||^2 + ||dw_i||^2 + ||dtheta_i||^2) between two snapshots."""
    m = len(cur.theta)
    dw = cur.w - prev.w
    return float(m * (dw @ dw) + np.sum((cur.w_local - prev.w_local) ** 2) + np.sum((cur.theta - prev.theta) ** 2))


def descent_check(lyap_t, lyap_next, D1, dgamma) -> float:
    return (lyap_t - lyap_next) - D1 * dgamma


def relerr_check(grad_sq_t, D2, dgamma, eps_next_sum) -> float:
    return D2 * (dgamma + eps_next_sum) - grad_sq_t


def rate_fit(values, floor: float = 0.0, start: int = 1, stop: int | None = None) -> float:
    """Least-squares slope of log(running mean of values - floor) against log T.

    ``values[k]`` is the quantity at round k+1; the fit uses rounds start..stop.
    """
    v = np.asarray(values, dtype=float)
    if len(v) < 20:
        raise ValueError("rate fit needs at least 20 rounds")
    T = np.arange(1, len(v) + 1)
    avg = np.cumsum(v) / T - floor
    stop = len(v) if stop is None else stop
    sl = slice(start - 1, stop)
    if np.any(avg[sl] <= 0):
        raise ValueError("running average does not exceed the floor; log undefined")
    x, y = np.log(T[sl]), np.log(avg[sl])
    return float(np.polyfit(x, y, 1)[0])


# ------------------------------------------------------------------- tracker


@dataclass
class Diagnostics:
    """Hook that records Lyapunov values and the descent / relative-error gaps.

    Row t describes the state after round t. The gaps at row t+1 compare
    states t and t+1, so row 0 carries NaN gaps.
    """

    lam: float
    rho: float
    iota: list
    D1: float
    D2: float
    P: np.ndarray | None = None
    rows: list = field(default_factory=list)
    _prev: object = None

    def __call__(self, server, clients):
        from .engine import snapshot
        snap = snapshot(server, clients)
        lyap = lyapunov(clients, server.w, self.lam, self.rho, self.iota, self.P)
        blocks = grad_blocks(clients, server.w, self.lam, self.rho, self.P)
        row = {"round": server.round, "lyapunov": lyap, "mean_sq_grad": grad_norm_sq(blocks),
               "w_grad_norm": float(np.linalg.norm(blocks["w"])),
               "descent_gap": float("nan"), "relerr_gap": float("nan"),
               "eps_sum": float(snap.eps.sum()), "delta_gamma": float("nan")}
        if self._prev is not None:
            prev_snap, prev_row = self._prev
            dg = delta_gamma(prev_snap, snap)
            row["delta_gamma"] = dg
            row["descent_gap"] = descent_check(prev_row["lyapunov"], lyap, self.D1, dg)
            row["relerr_gap"] = relerr_check(prev_row["mean_sq_grad"], self.D2, dg, row["eps_sum"])
        self.rows.append(row)
        self._prev = (snap, row)

    def column(self, key):
        return np.array([r[key] for r in self.rows])
