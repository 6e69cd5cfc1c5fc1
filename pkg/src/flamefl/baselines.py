"""Reference implementations: a standalone pFedMe loop, Ditto, and multi-Krum."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import HyperParams, Snapshot, client_alphas, select_clients
from .models import prox_solve


def pfedme_run(hp: HyperParams, models, seed: int, upload_hook=None, T=None):
    """Alternating minimization with the dual pinned at zero.

    Written against plain arrays so it can cross-check the engine's pfedme mode.
    """
    m = len(models)
    T = hp.T if T is None else T
    alphas = client_alphas(models, hp.alpha_scheme)
    d = models[0].dim
    base = models[0].init_params(seed) if models[0].kind == "mlp" else np.zeros(d)
    theta = np.tile(base, (m, 1))
    w_loc = theta.copy()
    msgs = w_loc.copy()
    eps = np.full(m, float(hp.eps0))
    w = base.copy()
    zeros = np.zeros((m, d))
    traj = [Snapshot(0, w.copy(), theta.copy(), w_loc.copy(), zeros.copy(), w_loc.copy(), eps.copy(), list(range(m)))]
    for t in range(1, T + 1):
        sel = select_clients(m, hp.s or m, t, seed)
        for i in sel:
            eps[i] *= hp.v_of(i)
            la = hp.lam * alphas[i]
            res = prox_solve(models[i], w_loc[i], hp.lam, hp.eta, hp.H, eps[i], batch_size=hp.batch_size,
                             seed=[seed, i, t], theta0=theta[i], alpha=alphas[i])
            theta[i] = res.theta
            w_loc[i] = (la * theta[i] + hp.rho * w) / (la + hp.rho)
            msgs[i] = w_loc[i] if upload_hook is None else upload_hook(i, w_loc[i].copy(), t)
        acc = np.zeros(d)
        for i in range(m):
            acc += msgs[i]
        w = acc / m
        traj.append(Snapshot(t, w.copy(), theta.copy(), w_loc.copy(), zeros.copy(), w_loc.copy(), eps.copy(), sel))
    return traj


@dataclass
class DittoState:
    global_w: np.ndarray
    personal: np.ndarray  # one row per client
    history: list = field(default_factory=list)


def ditto_run(hp: HyperParams, models, seed: int, upload_hook=None, T=None, personal_passes=None) -> DittoState:
    """FedAvg on the global model plus a regularized personal model per client.

    Each round a selected client runs H passes of local SGD from the current
    global model (the upload) and ``personal_passes`` (default H) passes on
    f_i(v) + lam/2 ||v - w||^2 for its personal model, with the same step size.
    The global model is the mean of the uploads of the selected clients.
    """
    m = len(models)
    T = hp.T if T is None else T
    H_pers = hp.H if personal_passes is None else personal_passes
    d = models[0].dim
    w = models[0].init_params(seed) if models[0].kind == "mlp" else np.zeros(d)
    personal = np.tile(w, (m, 1))
    state = DittoState(w.copy(), personal, [(0, w.copy(), personal.copy())])
    for t in range(1, T + 1):
        sel = select_clients(m, hp.s or m, t, seed)
        uploads = []
        for i in sel:
            loc = prox_solve(models[i], w, 0.0, hp.eta, hp.H, 0.0, batch_size=hp.batch_size,
                             seed=[seed, i, t], theta0=w).theta
            uploads.append(loc if upload_hook is None else np.asarray(upload_hook(i, loc.copy(), t), dtype=float))
            # lam = 0 leaves plain local training
            personal[i] = prox_solve(models[i], w, hp.lam, hp.eta, H_pers, 0.0, batch_size=hp.batch_size,
                                     seed=[seed, i, t, 1], theta0=personal[i]).theta
        acc = np.zeros(d)
        for u in uploads:
            acc += u
        w = acc / len(uploads)
        state.history.append((t, w.copy(), personal.copy()))
    state.global_w = w
    state.personal = personal
    return state


def krum_scores(updates, f: int) -> np.ndarray:
    U = np.vstack([np.asarray(u, dtype=float) for u in updates])
    m = len(U)
    nb = m - f - 2
    if nb < 1:
        raise ValueError(f"multi-Krum needs m - f - 2 >= 1 (m={m}, f={f})")
    sq = ((U[:, None, :] - U[None, :, :]) ** 2).sum(axis=2)
    scores = np.empty(m)
    for i in range(m):
        others = np.delete(sq[i], i)
        scores[i] = np.sort(others)[:nb].sum()
    return scores


def multi_krum(updates, f: int, k: int, return_selected=False):
    """Average of the k updates with the smallest sum of squared distances
    to their m-f-2 nearest neighbours."""
    m = len(updates)
    if not 1 <= k <= m:
        raise ValueError(f"k must lie in [1, {m}]")
    scores = krum_scores(updates, f)
    chosen = np.sort(np.argsort(scores, kind="stable")[:k])
    acc = np.zeros_like(np.asarray(updates[0], dtype=float))
    for i in chosen:
        acc += updates[i]
    out = acc / k
    return (out, chosen.tolist()) if return_selected else out
