"""ADMM orchestration for personalized FL: client updates, dual ascent, aggregation,
client sampling, tolerance schedule, degenerate modes and the projected variant."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .models import LossModel, ProxDivergence, prox_solve

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class Mode(str, Enum):
    FLAME = "flame"
    PFEDME = "pfedme"
    FEDADMM = "fedadmm"
    FEDAVG = "fedavg"
    LP_PROJ2 = "lp_proj2"


class InfeasibleHyperparams(ValueError):
    pass


class RunDiverged(RuntimeError):
    def __init__(self, round_idx, msg=""):
        super().__init__(f"run diverged at round {round_idx}: {msg}")
        self.round = round_idx


@dataclass
class HyperParams:
    lam: float = 1.0
    rho: float = 0.1
    eta: float = 0.01
    H: int = 1
    T: int = 10
    s: int | None = None          # clients per round, None means all
    v: float | list = 0.9         # tolerance contraction per client
    eps0: float = 1.0
    batch_size: int | None = 100  # None means full batch
    alpha_scheme: str = "uniform"  # or "proportional"
    mode: str = "flame"
    d_sub: int | None = None      # projected variant only
    proj_seed: int = 0
    L_estimate: float | None = None
    weighted_agg: bool = False
    aggregator: str = "mean"      # or "multi_krum"
    krum_f: int | None = None
    krum_k: int | None = None

    def __post_init__(self):
        self.mode = Mode(self.mode).value
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.lam <= 0 and self.mode != Mode.FEDAVG.value:
            raise ValueError("lambda must be positive")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.H < 1:
            raise ValueError("H must be at least 1")
        if self.T < 0:
            raise ValueError("T must be nonnegative")
        if self.alpha_scheme not in ("uniform", "proportional"):
            raise ValueError(f"unknown alpha scheme {self.alpha_scheme!r}")
        if self.aggregator not in ("mean", "multi_krum"):
            raise ValueError(f"unknown aggregator {self.aggregator!r}")
        if self.mode == Mode.LP_PROJ2.value and not self.d_sub:
            raise ValueError("lp_proj2 needs d_sub")

    def v_of(self, i):
        return self.v[i] if isinstance(self.v, (list, tuple, np.ndarray)) else self.v

    def to_dict(self):
        d = dataclasses.asdict(self)
        if isinstance(d["v"], np.ndarray):
            d["v"] = d["v"].tolist()
        return d


@dataclass
class ClientState:
    cid: int
    theta: np.ndarray
    w_local: np.ndarray
    pi: np.ndarray
    u: np.ndarray
    eps: float
    alpha: float
    v: float
    model: LossModel = field(repr=False)
    residual_sq: float = float("nan")
    inner_iters: int = 0
    met_tolerance: bool = True

    def copy(self):
        return dataclasses.replace(self, theta=self.theta.copy(), w_local=self.w_local.copy(),
                                   pi=self.pi.copy(), u=self.u.copy())


@dataclass
class ServerState:
    w: np.ndarray
    round: int
    seed: int
    selected: list
    received: np.ndarray  # last message from every client, one row each


# ------------------------------------------------------------------ feasibility


@dataclass
class FeasibilityReport:
    cond1: list
    cond2: list
    cond3_L: list
    cond3_lam: list
    iota: list
    iota_positive: list
    D1: float
    D2: float
    L: float

    @property
    def feasible(self) -> bool:
        return all(self.cond1) and all(self.cond2) and all(self.cond3_L)

    def as_dict(self):
        return dataclasses.asdict(self) | {"feasible": self.feasible}


def check_feasibility(lam, rho, alphas, L, v=0.9) -> FeasibilityReport:
    """Evaluate the sufficient-descent conditions and derived constants per client."""
    alphas = np.atleast_1d(np.asarray(alphas, dtype=float))
    vs = np.broadcast_to(np.asarray(v, dtype=float), alphas.shape)
    c1, c2, c3L, c3l, iota, d1_terms, d2_terms = [], [], [], [], [], [], []
    for a, vi in zip(alphas, vs):
        la = lam * a
        c1.append(bool(la**2 * (1 + rho) / rho**2 - (la + rho) / 2 < 0))
        c2.append(bool(rho >= la))
        c3L.append(bool((1 - rho**2) / rho**2 * la**2 - (L * a + rho) / 2 > 0))
        c3l.append(bool((1 - rho**2) / rho**2 * la**2 - (la + rho) / 2 > 0))
        denom = ((1 / rho**2 - 1) * la**2 - (L * a + rho) / 2) * (1 - vi)
        iota.append(float(a**2 / denom) if denom != 0 else float("inf"))
        d1_terms.append((la + rho) / 2 - la**2 * (1 + rho) / rho**2)
        d2_terms.append(4 * la**2 * (1 + 1 / rho**2) + 2 * a**2 * (L**2 + 2 * lam**2) + 2 * rho**2 + 2)
    D1 = float(min(rho / 2, min(d1_terms)))
    D2 = float(max(d2_terms))
    return FeasibilityReport(c1, c2, c3L, c3l, iota, [x > 0 for x in iota], D1, D2, float(L))


def client_alphas(models, scheme="uniform"):
    m = len(models)
    if scheme == "uniform":
        return np.full(m, 1.0 / m)
    n = np.array([mod.n for mod in models], dtype=float)
    return n / n.sum()


def smoothness_estimate(models) -> float:
    vals = [mod.smoothness() for mod in models]
    return float(max(vals)) if vals else float("nan")


def feasibility_for(hp: HyperParams, models) -> FeasibilityReport:
    L = hp.L_estimate if hp.L_estimate is not None else smoothness_estimate(models)
    alphas = client_alphas(models, hp.alpha_scheme)
    return check_feasibility(hp.lam, hp.rho, alphas, L, [hp.v_of(i) for i in range(len(models))])


# --------------------------------------------------------------- projection


def projection_matrix(d_sub: int, d: int, seed: int, strict: bool = True) -> np.ndarray:
    """Seeded Gaussian d_sub x d matrix scaled by 1/sqrt(d_sub)."""
    if strict and d_sub >= d:
        raise ValueError(f"projection must reduce dimension (d_sub={d_sub}, d={d})")
    return np.random.default_rng([seed, 0xB0]).standard_normal((d_sub, d)) / np.sqrt(d_sub)


# ---------------------------------------------------------------------- init


def init_run(hp: HyperParams, models: list, seed: int, override: bool = False,
             init: dict | None = None, P: np.ndarray | None = None):
    """Build the round-0 server and client states.

    Linear models start from zero; the MLP starts every client from a common
    seeded random point. ``init`` may supply explicit per-client arrays
    (keys theta, w_local, pi); the dual identity is enforced on them.
    """
    m = len(models)
    if m < 1:
        raise ValueError("need at least one client")
    if hp.rho <= 0:
        raise ValueError("rho must be positive")
    mode = Mode(hp.mode)
    if not override and mode in (Mode.FLAME, Mode.LP_PROJ2):
        rep = feasibility_for(hp, models)
        if not rep.feasible:
            raise InfeasibleHyperparams(
                f"hyperparameters fail the descent conditions (cond1={rep.cond1[0]}, "
                f"cond2={rep.cond2[0]}, cond3={rep.cond3_L[0]}); pass override to run anyway")
    alphas = client_alphas(models, hp.alpha_scheme)
    d = models[0].dim
    if mode == Mode.LP_PROJ2 and P is None:
        P = projection_matrix(hp.d_sub, d, hp.proj_seed)
    d_msg = P.shape[0] if mode == Mode.LP_PROJ2 else d

    base = models[0].init_params(seed) if models[0].kind == "mlp" else np.zeros(d)
    clients = []
    for i, mod in enumerate(models):
        theta = np.array(init["theta"][i], dtype=float) if init else base.copy()
        if init:
            w_local = np.array(init["w_local"][i], dtype=float)
            pi = np.array(init["pi"][i], dtype=float)
        else:
            w_local = P @ theta if mode == Mode.LP_PROJ2 else theta.copy()
            pi = np.zeros(d_msg)
        if mode in (Mode.FLAME, Mode.LP_PROJ2):
            lhs = (P @ theta if mode == Mode.LP_PROJ2 else theta) - w_local
            expect = hp.lam * alphas[i] * lhs
            if np.linalg.norm(pi - expect) > 1e-12 * (1 + np.linalg.norm(pi)):
                raise ValueError(f"client {i}: initial dual does not satisfy pi = lam*alpha*(theta - w_i)")
        elif np.any(pi != 0):
            raise ValueError(f"client {i}: mode {mode.value} needs a zero initial dual")
        u = w_local + pi / hp.rho
        clients.append(ClientState(i, theta, w_local, pi, u, float(hp.eps0), float(alphas[i]),
                                   float(hp.v_of(i)), mod))
    received = np.vstack([c.u for c in clients])
    w0 = aggregate(received, hp, alphas) if init else (P @ base if mode == Mode.LP_PROJ2 else base.copy())
    server = ServerState(w0, 0, seed, list(range(m)), received)
    return server, clients, P


# ------------------------------------------------------------------- updates


def client_update(client: ClientState, w_global, hp: HyperParams, round_idx: int, seed: int,
                  P: np.ndarray | None = None) -> ClientState:
    """One local round for a selected client; returns a new state."""
    mode = Mode(hp.mode)
    rho, lam, a = hp.rho, hp.lam, client.alpha
    eps = client.v * client.eps
    rng_seed = [seed, client.cid, round_idx]
    kw = dict(eta=hp.eta, H_max=hp.H, eps_target=eps, batch_size=hp.batch_size, seed=rng_seed)
    w_global = np.asarray(w_global, dtype=float)

    if mode == Mode.FLAME or mode == Mode.PFEDME:
        res = prox_solve(client.model, client.w_local, lam, theta0=client.theta, alpha=a, **kw)
        theta = res.theta
        pi_prev = client.pi if mode == Mode.FLAME else 0.0
        w_local = (lam * a * theta + rho * w_global - pi_prev) / (lam * a + rho)
        if mode == Mode.FLAME:
            pi = client.pi + rho * (w_local - w_global)
        else:
            pi = np.zeros_like(client.pi)
        u = w_local + pi / rho
    elif mode == Mode.FEDADMM:
        # alpha f + <pi, theta - w> + rho/2 ||theta - w||^2, i.e. a prox with weight rho/alpha
        anchor = w_global - client.pi / rho
        res = prox_solve(client.model, anchor, rho / a, theta0=client.theta, alpha=a, **kw)
        theta = res.theta
        w_local = theta.copy()
        pi = client.pi + rho * (theta - w_global)
        u = theta + pi / rho
    elif mode == Mode.FEDAVG:
        kw["eps_target"] = 0.0
        res = prox_solve(client.model, w_global, 0.0, theta0=w_global, **kw)
        theta = res.theta
        w_local = theta.copy()
        pi = np.zeros_like(client.pi)
        u = theta.copy()
    else:
        return lp_proj2_round(client, w_global, P, hp, round_idx, seed)

    return dataclasses.replace(client, theta=theta, w_local=w_local, pi=pi, u=u, eps=eps,
                               residual_sq=res.residual_sq, inner_iters=res.iters_used,
                               met_tolerance=res.met_tolerance)


def lp_proj2_round(client: ClientState, w_global, P, hp: HyperParams, round_idx: int, seed: int) -> ClientState:
    """Projected variant: theta lives in R^d, the consensus variables in R^d_sub."""
    if P is None:
        raise ValueError("projected round needs a projection matrix")
    rho, lam, a = hp.rho, hp.lam, client.alpha
    eps = client.v * client.eps
    res = prox_solve(client.model, client.w_local, lam, hp.eta, hp.H, eps, batch_size=hp.batch_size,
                     seed=[seed, client.cid, round_idx], theta0=client.theta, alpha=a, P=P)
    theta = res.theta
    w_local = (lam * a * (P @ theta) + rho * w_global - client.pi) / (lam * a + rho)
    pi = client.pi + rho * (w_local - w_global)
    u = w_local + pi / rho
    return dataclasses.replace(client, theta=theta, w_local=w_local, pi=pi, u=u, eps=eps,
                               residual_sq=res.residual_sq, inner_iters=res.iters_used,
                               met_tolerance=res.met_tolerance)


def server_aggregate(messages, weights=None) -> np.ndarray:
    """Mean of client messages accumulated in ascending client order."""
    messages = [np.asarray(u, dtype=float) for u in messages]
    if not messages:
        raise ValueError("no messages to aggregate")
    shape = messages[0].shape
    if any(u.shape != shape for u in messages):
        raise ValueError("message dimension mismatch")
    acc = np.zeros(shape)
    if weights is None:
        for u in messages:
            acc += u
        return acc / len(messages)
    weights = np.asarray(weights, dtype=float)
    for wt, u in zip(weights, messages):
        acc += wt * u
    return acc / weights.sum()


def aggregate(received, hp: HyperParams, alphas=None):
    if hp.aggregator == "multi_krum":
        from .baselines import multi_krum
        m = len(received)
        f = hp.krum_f if hp.krum_f is not None else 0
        k = hp.krum_k if hp.krum_k is not None else m - f
        return multi_krum(list(received), f, k)
    return server_aggregate(received, alphas if hp.weighted_agg else None)


def select_clients(m: int, s: int, round_idx: int, seed: int) -> list:
    if not 1 <= s <= m:
        raise ValueError(f"need 1 <= s <= m (s={s}, m={m})")
    if s == m:
        return list(range(m))
    rng = np.random.default_rng([seed, round_idx])
    return sorted(int(i) for i in rng.choice(m, size=s, replace=False))


def effective_rules(hp: HyperParams) -> dict:
    """Describe which update rules a mode actually uses."""
    mode = Mode(hp.mode)
    rules = {
        Mode.FLAME: {"prox_weight": "lambda", "dual_update": True, "theta_equals_w_local": False},
        Mode.PFEDME: {"prox_weight": "lambda", "dual_update": False, "theta_equals_w_local": False},
        Mode.FEDADMM: {"prox_weight": "rho/alpha", "dual_update": True, "theta_equals_w_local": True},
        Mode.FEDAVG: {"prox_weight": "none", "dual_update": False, "theta_equals_w_local": True},
        Mode.LP_PROJ2: {"prox_weight": "lambda (projected)", "dual_update": True, "theta_equals_w_local": False},
    }
    return {"mode": mode.value, **rules[mode]}


# ----------------------------------------------------------------- residuals


def stationarity_residual(clients, w_global, hp: HyperParams, P=None) -> dict:
    """Norms of the first-order system for the split problem and for the original problem."""
    lam = hp.lam
    per = []
    pi_sum = np.zeros_like(clients[0].pi)
    for c in clients:
        g = c.model.grad(c.theta)
        proj = c.theta if P is None else P @ c.theta
        pen = lam * (c.theta - c.w_local) if P is None else lam * (P.T @ (proj - c.w_local))
        per.append({
            "grad": float(np.linalg.norm(g + pen)),
            "dual": float(np.linalg.norm(c.alpha * lam * (c.w_local - proj) + c.pi)),
            "consensus": float(np.linalg.norm(c.w_local - w_global)),
            # original problem: grad f + lam (theta - w)
            "grad_global": float(np.linalg.norm(g + lam * (c.theta - w_global))) if P is None else float("nan"),
        })
        pi_sum += c.pi
    mean_theta = sum(c.alpha * c.theta for c in clients) if P is None else None
    return {
        "clients": per,
        "dual_sum": float(np.linalg.norm(pi_sum)),
        "w_vs_theta_avg": float(np.linalg.norm(w_global - mean_theta)) if P is None else float("nan"),
        "max": max(max(r["grad"], r["dual"], r["consensus"]) for r in per),
    }


# ----------------------------------------------------------------------- run


@dataclass
class Snapshot:
    round: int
    w: np.ndarray
    theta: np.ndarray
    w_local: np.ndarray
    pi: np.ndarray
    u: np.ndarray
    eps: np.ndarray
    selected: list


def snapshot(server: ServerState, clients) -> Snapshot:
    return Snapshot(server.round, server.w.copy(), np.vstack([c.theta for c in clients]),
                    np.vstack([c.w_local for c in clients]), np.vstack([c.pi for c in clients]),
                    np.vstack([c.u for c in clients]), np.array([c.eps for c in clients]),
                    list(server.selected))


class Engine:
    """Stateful driver around the pure update functions.

    ``upload_hook(cid, u, round)`` may replace a selected client's message
    before it reaches the server; the client keeps its honest state.
    """

    def __init__(self, hp: HyperParams, models, seed: int, *, override=False, upload_hook=None,
                 threads: int = 1, init=None, P=None):
        self.hp = hp
        self.seed = int(seed)
        self.upload_hook = upload_hook
        self.threads = max(1, int(threads))
        self.server, self.clients, self.P = init_run(hp, models, seed, override=override, init=init, P=P)
        self.alphas = np.array([c.alpha for c in self.clients])

    @property
    def m(self):
        return len(self.clients)

    def step(self):
        hp, server = self.hp, self.server
        t = server.round + 1
        s = hp.s or self.m
        selected = select_clients(self.m, s, t, self.seed)
        w = server.w

        def work(i):
            return client_update(self.clients[i], w, hp, t, self.seed, self.P)

        try:
            if self.threads > 1 and len(selected) > 1:
                with ThreadPoolExecutor(self.threads) as ex:
                    new = list(ex.map(work, selected))
            else:
                new = [work(i) for i in selected]
        except ProxDivergence as exc:
            raise RunDiverged(t, str(exc)) from exc

        received = server.received.copy()
        for i, st in zip(selected, new):
            self.clients[i] = st
            msg = st.u
            if self.upload_hook is not None:
                msg = np.asarray(self.upload_hook(i, st.u.copy(), t), dtype=float)
            received[i] = msg
        w_new = aggregate(received, hp, self.alphas)
        if not np.all(np.isfinite(w_new)):
            raise RunDiverged(t, "non-finite global model")
        self.server = ServerState(w_new, t, self.seed, selected, received)
        return self.server

    def run(self, T=None, hooks=(), history=True):
        """Advance T rounds (default hp.T minus rounds already done)."""
        T = self.hp.T - self.server.round if T is None else T
        traj = [snapshot(self.server, self.clients)] if history else []
        for h in hooks:
            h(self.server, self.clients)
        for _ in range(T):
            self.step()
            if history:
                traj.append(snapshot(self.server, self.clients))
            for h in hooks:
                h(self.server, self.clients)
        return traj

    # -- checkpoints

    def hp_hash(self):
        return hashlib.sha256(json.dumps(self.hp.to_dict(), sort_keys=True).encode()).hexdigest()

    def save_checkpoint(self, path):
        arrays = {
            "w": self.server.w,
            "received": self.server.received,
            "theta": np.vstack([c.theta for c in self.clients]),
            "w_local": np.vstack([c.w_local for c in self.clients]),
            "pi": np.vstack([c.pi for c in self.clients]),
            "u": np.vstack([c.u for c in self.clients]),
            "eps": np.array([c.eps for c in self.clients]),
            "selected": np.array(self.server.selected, dtype=np.int64),
        }
        if self.P is not None:
            arrays["P"] = self.P
        header = {"version": CHECKPOINT_VERSION, "round": self.server.round, "seed": self.seed,
                  "hp_hash": self.hp_hash()}
        with open(path, "wb") as fh:
            np.savez(fh, header=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), **arrays)

    @classmethod
    def resume(cls, path, hp: HyperParams, models, *, upload_hook=None, threads=1):
        with np.load(Path(path)) as z:
            header = json.loads(bytes(z["header"]).decode())
            if header.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {header.get('version')}")
            data = {k: z[k] for k in z.files if k != "header"}
        eng = cls.__new__(cls)
        eng.hp, eng.seed, eng.upload_hook = hp, header["seed"], upload_hook
        eng.threads = max(1, int(threads))
        if eng.hp_hash() != header["hp_hash"]:
            raise ValueError("checkpoint was written with different hyperparameters")
        eng.P = data.get("P")
        alphas = client_alphas(models, hp.alpha_scheme)
        eng.clients = [
            ClientState(i, data["theta"][i].copy(), data["w_local"][i].copy(), data["pi"][i].copy(),
                        data["u"][i].copy(), float(data["eps"][i]), float(alphas[i]), float(hp.v_of(i)), mod)
            for i, mod in enumerate(models)
        ]
        eng.alphas = alphas
        eng.server = ServerState(data["w"].copy(), header["round"], eng.seed,
                                 data["selected"].tolist(), data["received"].copy())
        return eng


def run(hp: HyperParams, models, seed: int, hooks=(), **kw):
    """Convenience wrapper returning (engine, trajectory)."""
    eng = Engine(hp, models, seed, **kw)
    traj = eng.run(hooks=hooks)
    return eng, traj
