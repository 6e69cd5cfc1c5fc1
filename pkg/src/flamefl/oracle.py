"""Closed-form analysis of federated linear regression with an isotropic design
(X_i^T X_i = N b I): exact solutions, expected test losses, one-round attacked
protocol and fairness variances.

Every benign-average loss below is a quadratic polynomial in the message
shrinkage q, so losses are returned as ``Quadratic`` objects; derivatives and
monotonicity thresholds follow from the coefficients.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackKind

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class Quadratic:
    a2: float
    a1: float
    a0: float

    def __call__(self, q):
        return self.a2 * q * q + self.a1 * q + self.a0

    def deriv(self, q):
        return 2 * self.a2 * q + self.a1

    @property
    def vertex(self) -> float:
        """Point above which the derivative is nonnegative (a2 > 0)."""
        return -self.a1 / (2 * self.a2) if self.a2 != 0 else float("-inf")


@dataclass
class LinRegWorld:
    m: int
    N: int
    d: int
    b: float
    sigma: float
    lam: float
    rho: float
    gamma: float
    thetas: np.ndarray  # m x d true personal models
    malicious: list = field(default_factory=list)
    noise_denom: str = "bN"  # "bm" reproduces an alternative variance scaling, for comparison only

    def __post_init__(self):
        self.thetas = np.asarray(self.thetas, dtype=float)
        if self.thetas.shape != (self.m, self.d):
            raise ValueError(f"thetas must be {self.m} x {self.d}")
        self.malicious = sorted(int(i) for i in self.malicious)
        if self.noise_denom not in ("bN", "bm"):
            raise ValueError("noise_denom must be 'bN' or 'bm'")

    @property
    def alpha(self):
        return 1.0 / self.m

    @property
    def m_a(self):
        return len(self.malicious)

    @property
    def m_b(self):
        return self.m - self.m_a

    @property
    def benign(self):
        bad = set(self.malicious)
        return [i for i in range(self.m) if i not in bad]

    @property
    def q(self) -> float:
        la = self.lam * self.alpha
        return 2 * la / (la + self.rho) * self.b / (self.b + self.lam)

    @property
    def est_var(self) -> float:
        """Per-coordinate variance of the local least-squares estimate."""
        return self.sigma**2 / (self.b * self.N)

    @property
    def model_var(self) -> float:
        # variance scale used inside the sign-flip formulas
        return self.sigma**2 / (self.b * (self.N if self.noise_denom == "bN" else self.m))

    def V_trace(self, i) -> float:
        th = self.thetas[i]
        return (math.pi - 2) / math.pi * self.gamma**2 * float(th @ th) + self.gamma**2 * self.model_var * self.d

    def V(self, i) -> np.ndarray:
        th = self.thetas[i]
        return (math.pi - 2) / math.pi * self.gamma**2 * np.outer(th, th) + self.gamma**2 * self.model_var * np.eye(self.d)


def make_world(m, N, d, b, sigma, lam, rho, gamma, m_a=0, theta_gen=None, seed=0, **kw) -> LinRegWorld:
    """World with seeded true models; the malicious clients are the first m_a ids."""
    rng = np.random.default_rng(seed)
    if theta_gen is None:
        thetas = rng.standard_normal((m, d))
    elif isinstance(theta_gen, dict) and theta_gen.get("kind") == "equal_norm":
        v = rng.standard_normal((m, d))
        thetas = theta_gen.get("norm", 1.0) * v / np.linalg.norm(v, axis=1, keepdims=True)
    elif isinstance(theta_gen, dict) and theta_gen.get("kind") == "gaussian":
        thetas = np.asarray(theta_gen.get("mean", 0.0)) + theta_gen.get("scale", 1.0) * rng.standard_normal((m, d))
    else:
        thetas = np.asarray(theta_gen, dtype=float)
    return LinRegWorld(m, N, d, b, sigma, lam, rho, gamma, thetas, list(range(m_a)), **kw)


# -------------------------------------------------------------- exact solution


def exact_solution(theta_hats, b, lam):
    """Minimizer of the regularized federated objective for isotropic designs.

    ``b`` may be a scalar or one value per client.
    """
    th = np.asarray(theta_hats, dtype=float)
    bs = np.broadcast_to(np.asarray(b, dtype=float), (th.shape[0],))
    wts = bs / (bs + lam)
    w = (wts[:, None] * th).sum(axis=0) / wts.sum()
    thetas = (bs[:, None] * th + lam * w) / (bs + lam)[:, None]
    return w, thetas


def general_solution(Xs, ys, lam):
    """Exact solution for arbitrary designs with uniform client weights."""
    m = len(Xs)
    d = Xs[0].shape[1]
    A = np.eye(d)
    rhs = np.zeros(d)
    for X, y in zip(Xs, ys):
        N = X.shape[0]
        G = X.T @ X / N
        Ginv = np.linalg.inv(G + lam * np.eye(d))
        A -= lam * Ginv / m
        rhs += Ginv @ (X.T @ y / N) / m
    w = np.linalg.solve(A, rhs)
    thetas = np.vstack([np.linalg.solve(X.T @ X / X.shape[0] + lam * np.eye(d), X.T @ y / X.shape[0] + lam * w)
                        for X, y in zip(Xs, ys)])
    return w, thetas


def optimality_residual(Xs, ys, lam, w, thetas):
    """Max-norm of the first-order conditions of the regularized objective."""
    r = [np.abs(X.T @ (X @ t - y) / X.shape[0] + lam * (t - w)).max() for X, y, t in zip(Xs, ys, thetas)]
    r.append(np.abs(w - np.mean(thetas, axis=0)).max())
    return float(max(r))


def draw_theta_hats(world: LinRegWorld, rng, trials=None):
    shape = (world.m, world.d) if trials is None else (trials, world.m, world.d)
    return world.thetas + math.sqrt(world.est_var) * rng.standard_normal(shape)


# -------------------------------------------------------------- clean losses


def expected_losses(world: LinRegWorld):
    """Average test loss of the exact global and personal solutions (no attack)."""
    s2, d, m, N, b, lam = world.sigma**2, world.d, world.m, world.N, world.b, world.lam
    spread = float(np.sum((world.thetas.mean(axis=0) - world.thetas) ** 2))
    gm = s2 / 2 + s2 * d / (2 * m * N) + b / (2 * m) * spread
    pm = (s2 / 2 + (m * b**2 + 2 * b * lam + lam**2) / (m * (b + lam) ** 2) * s2 * d / (2 * N)
          + b * lam**2 / (2 * m * (b + lam) ** 2) * spread)
    return gm, pm


def client_test_loss(world: LinRegWorld, params, i):
    """Expected test loss of a fixed parameter on client i: sigma^2/2 + b/2 ||params - theta_i||^2."""
    diff = params - world.thetas[i]
    return world.sigma**2 / 2 + world.b / 2 * np.sum(diff * diff, axis=-1)


# ---------------------------------------------------------- one-round protocol


def one_round_protocol(world: LinRegWorld, theta_hats, kind=None, rng=None, q=None):
    """Messages u_i = q theta_hat_i, attack substitution, mean, personal solve.

    ``theta_hats`` may carry a leading trial axis.
    """
    q = world.q if q is None else q
    th = np.asarray(theta_hats, dtype=float)
    msgs = q * th
    if kind is not None and world.m_a:
        kind = AttackKind(kind)
        bad = world.malicious
        lead = th.shape[:-2]
        shape = lead + (len(bad),)
        if kind == AttackKind.SAME_VALUE:
            p = world.gamma * rng.standard_normal(shape)
            msgs[..., bad, :] = p[..., None]
        elif kind == AttackKind.SIGN_FLIP:
            p = world.gamma * rng.standard_normal(shape)
            msgs[..., bad, :] = -np.abs(p)[..., None] * msgs[..., bad, :]
        elif kind == AttackKind.GAUSSIAN:
            msgs[..., bad, :] = world.gamma * rng.standard_normal(lead + (len(bad), world.d))
        else:
            raise ValueError("label poisoning is not part of the message protocol")
    w = msgs.mean(axis=-2)
    thetas = (world.b * th + world.lam * w[..., None, :]) / (world.b + world.lam)
    return w, thetas


def monte_carlo(world: LinRegWorld, kind, trials: int, seed: int, q=None, batch=2000):
    """Benign-average GM and PM test losses over repeated protocol draws.

    Returns dict with per-model mean and standard error.
    """
    if trials < 2:
        raise ValueError("need at least two trials")
    world = _honest(world, kind)
    rng = np.random.default_rng(seed)
    ben = world.benign
    gm_vals, pm_vals = [], []
    done = 0
    while done < trials:
        k = min(batch, trials - done)
        th = draw_theta_hats(world, rng, k)
        w, thetas = one_round_protocol(world, th, kind, rng, q)
        gm = np.mean([client_test_loss(world, w, i) for i in ben], axis=0)
        pm = np.mean([client_test_loss(world, thetas[:, i, :], i) for i in ben], axis=0)
        gm_vals.append(gm)
        pm_vals.append(pm)
        done += k
    gm_vals = np.concatenate(gm_vals)
    pm_vals = np.concatenate(pm_vals)
    se = lambda v: float(v.std(ddof=1) / math.sqrt(len(v)))
    return {"GM": (float(gm_vals.mean()), se(gm_vals)), "PM": (float(pm_vals.mean()), se(pm_vals))}


# ------------------------------------------------------------- attack losses


def _honest(world, kind):
    # without an attack every client behaves honestly and counts as benign
    if kind is None and world.m_a:
        return dataclasses.replace(world, malicious=[])
    return world


def _bias_quadratic(direction, targets, scale):
    """(scale / n) * sum_i ||q * direction - target_i||^2 as a polynomial in q."""
    n = len(targets)
    a2 = scale * float(direction @ direction)
    a1 = -2 * scale * float(sum(t @ direction for t in targets)) / n
    a0 = scale * float(sum(t @ t for t in targets)) / n
    return a2, a1, a0


def attack_losses(world: LinRegWorld, kind=None):
    """Benign-average (GM, PM) test losses of the one-round protocol as quadratics in q.

    kind None means no attack. Same-value and Gaussian attacks share one form.
    """
    world = _honest(world, kind)
    m, m_b, d, N, b, lam = world.m, world.m_b, world.d, world.N, world.b, world.lam
    s2, g2 = world.sigma**2, world.gamma**2
    ben = [world.thetas[i] for i in world.benign]
    bad = world.malicious
    kind = AttackKind(kind) if kind is not None else None
    k = (b + lam) ** 2

    if kind == AttackKind.SIGN_FLIP and world.m_a:
        direction = (world.thetas[world.benign].sum(axis=0)
                     - SQRT_2_OVER_PI * world.gamma * world.thetas[bad].sum(axis=0)) / m
        trV = sum(world.V_trace(i) for i in bad)
        ben_var = world.model_var
        gm_noise_q2 = b / (2 * m**2) * (m_b * ben_var * d + trV)
        gm_const = 0.0
        pm_q0 = d / 2 * b**2 * ben_var * b / k
        pm_q1 = d / 2 * b * (2 * b * lam / m) * ben_var / k
        pm_q2 = b / 2 * (m_b * lam**2 / m**2 * ben_var * d + lam**2 / m**2 * trV) / k
    else:
        direction = world.thetas[world.benign].sum(axis=0) / m
        ben_var = world.est_var
        gm_noise_q2 = b * d / (2 * m**2) * m_b * ben_var
        gm_const = b * d / (2 * m**2) * world.m_a * g2
        pm_q0 = b * d / 2 * (b**2 * ben_var + world.m_a * lam**2 * g2 / m**2) / k
        pm_q1 = b * d / 2 * (2 * b * lam / m) * ben_var / k
        pm_q2 = b * d / 2 * (m_b * lam**2 / m**2) * ben_var / k

    a2, a1, a0 = _bias_quadratic(direction, ben, b / 2)
    gm = Quadratic(a2 + gm_noise_q2, a1, a0 + s2 / 2 + gm_const)
    r = lam**2 / k
    pm = Quadratic(r * a2 + pm_q2, r * a1 + pm_q1, r * a0 + s2 / 2 + pm_q0)
    return gm, pm


def ditto_pfedme_losses(world: LinRegWorld, kind=None):
    """Reference losses of the regularized baselines: the one-round forms at q = 1."""
    gm, pm = attack_losses(world, kind)
    return gm(1.0), pm(1.0)


def printed_thresholds(world: LinRegWorld, kind=None):
    """Monotonicity thresholds in the closed forms as usually printed.

    The global-model threshold under value attacks omits the squared norm
    of the benign mean in the denominator; kept for side-by-side reporting.
    """
    m, m_b, m_a, d, N, b, lam = world.m, world.m_b, world.m_a, world.d, world.N, world.b, world.lam
    s2 = world.sigma**2
    kind = AttackKind(kind) if kind is not None else None
    if kind == AttackKind.SIGN_FLIP and m_a:
        tm = (world.thetas[world.benign].sum(axis=0) - SQRT_2_OVER_PI * world.gamma * world.thetas[world.malicious].sum(axis=0)) / m
        cross = sum(float(world.thetas[i] @ tm) for i in world.malicious)
        trV = sum(world.V_trace(i) for i in world.malicious)
        gm = (cross / m_b) / (d / m**2 * (m_b * s2 / (b * m) + trV / d) + m_a / m_b * float(tm @ tm))
        pm = ((b * lam / m_b * cross - b * d * s2 / (m * N))
              / (d * s2 * m_b * lam / (m**2 * N) + b * lam * d / m**2 * trV / d + b * lam * m_a / m_b * float(tm @ tm)))
        return gm, pm
    tb = world.thetas[world.benign].mean(axis=0)
    nb = float(tb @ tb)
    gm = m * N * b * nb / (d * s2 + m_b * N * b)
    pm = m * b * (m_b * N * lam * nb - d * s2) / (d * s2 * m_b * lam + m_b**2 * N * b * lam * nb)
    return gm, pm


def value_attack_thresholds(world: LinRegWorld):
    """Closed-form monotonicity thresholds for the no-attack / same-value / Gaussian losses."""
    m, m_b, d, N, b, lam = world.m, world.m_b, world.d, world.N, world.b, world.lam
    s2 = world.sigma**2
    tb = world.thetas[world.benign].mean(axis=0)
    nb = float(tb @ tb)
    gm = m * N * b * nb / (d * s2 + m_b * N * b * nb)
    pm = m * b * (m_b * N * lam * nb - d * s2) / (d * s2 * m_b * lam + m_b**2 * N * b * lam * nb)
    return gm, pm


def shrinkage_check(world: LinRegWorld, kind=None, q=None) -> dict:
    """Compare the one-round losses at q with the q = 1 reference losses."""
    q = world.q if q is None else q
    gm, pm = attack_losses(world, kind)
    out = {"q": q}
    for tag, poly in (("GM", gm), ("PM", pm)):
        thr = poly.vertex
        out[tag] = {
            "loss_q": poly(q), "loss_ref": poly(1.0), "threshold": thr,
            "threshold_holds": bool(q >= thr), "flame_not_worse": bool(poly(q) <= poly(1.0) + 1e-15),
            "deriv_at_q": poly.deriv(q),
        }
    out["printed_thresholds"] = printed_thresholds(world, kind)
    return out


# ------------------------------------------------------------------ fairness


def _sq_dists(thetas, q):
    tbar = thetas.mean(axis=0)
    diff = q * tbar - thetas
    return np.sum(diff * diff, axis=1)


def spread_variance(thetas, q) -> float:
    """Population variance over clients of ||q * mean(theta) - theta_i||^2."""
    a = _sq_dists(np.asarray(thetas, dtype=float), q)
    return float(np.mean((a - a.mean()) ** 2))


def spread_variance_pairwise(thetas, q) -> float:
    """Same quantity through the ordered-pair sum (1/m^2) sum_{i != j} (a_i - a_j)^2 / 2."""
    thetas = np.asarray(thetas, dtype=float)
    a = _sq_dists(thetas, q)
    m = len(a)
    diff = a[:, None] - a[None, :]
    return float((diff**2).sum() / 2 / m**2)


def spread_variance_deriv(thetas, q) -> float:
    """Derivative in q via the ordered-pair sum."""
    thetas = np.asarray(thetas, dtype=float)
    m = len(thetas)
    tbar = thetas.mean(axis=0)
    a = _sq_dists(thetas, q)
    proj = thetas @ tbar
    # (theta_j - theta_i)^T tbar for every ordered pair
    dproj = proj[None, :] - proj[:, None]
    da = a[:, None] - a[None, :]
    return float(2.0 / m**2 * (da * dproj).sum())


def fairness_variances(world_or_thetas, q, b=None, lam=None):
    """Variance over clients of the GM and PM per-client test losses after one round."""
    if isinstance(world_or_thetas, LinRegWorld):
        thetas, b, lam = world_or_thetas.thetas, world_or_thetas.b, world_or_thetas.lam
    else:
        thetas = world_or_thetas
    base = spread_variance_pairwise(thetas, q)
    return b**2 / 4 * base, b**2 * lam**4 / (4 * (b + lam) ** 4) * base


def oracle_report(world: LinRegWorld) -> dict:
    """JSON-friendly summary of all closed forms for a world."""
    rep = {"world": {"m": world.m, "m_a": world.m_a, "N": world.N, "d": world.d, "b": world.b,
                     "sigma": world.sigma, "lambda": world.lam, "rho": world.rho, "gamma": world.gamma,
                     "q": world.q, "noise_denom": world.noise_denom}}
    gm, pm = expected_losses(world)
    rep["clean"] = {"GM": gm, "PM": pm}
    for kind in (AttackKind.SAME_VALUE, AttackKind.SIGN_FLIP, AttackKind.GAUSSIAN):
        rep[kind.value] = shrinkage_check(world, kind)
    vg, vp = fairness_variances(world, world.q)
    rg, rp = fairness_variances(world, 1.0)
    rep["fairness"] = {"GM": vg, "PM": vp, "GM_ref": rg, "PM_ref": rp}
    return rep
