"""Byzantine message attacks and label poisoning."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class AttackKind(str, Enum):
    SAME_VALUE = "same_value"
    SIGN_FLIP = "sign_flip"
    GAUSSIAN = "gaussian"
    LABEL_POISON = "label_poison"


BYZANTINE = (AttackKind.SAME_VALUE, AttackKind.SIGN_FLIP, AttackKind.GAUSSIAN)


def malicious_count(m: int, fraction: float) -> int:
    # round half up, so 0.5 * 5 clients gives 3
    return int(math.floor(fraction * m + 0.5))


def malicious_set(m: int, fraction: float, seed: int) -> list:
    k = malicious_count(m, fraction)
    if not 0 <= k <= m:
        raise ValueError("malicious fraction must lie in [0, 1]")
    rng = np.random.default_rng([seed, 0xA77])
    return sorted(int(i) for i in rng.choice(m, size=k, replace=False))


@dataclass
class AttackConfig:
    kind: str = "same_value"
    gamma: float = 0.1
    fraction: float = 0.0
    poison_mode: str = "uniform"  # label poisoning: "flip" (binary only) or "uniform"
    malicious: list | None = None  # explicit ids override the fraction

    def __post_init__(self):
        self.kind = AttackKind(self.kind).value
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("fraction must lie in [0, 1]")

    def resolve(self, m: int, seed: int) -> list:
        if self.malicious is not None:
            return sorted(int(i) for i in self.malicious)
        return malicious_set(m, self.fraction, seed)


def corrupt_message(kind, honest_u, gamma: float, rng: np.random.Generator) -> np.ndarray:
    """Replace an honest message according to a Byzantine attack kind."""
    kind = AttackKind(kind)
    honest_u = np.asarray(honest_u, dtype=float)
    if kind == AttackKind.SAME_VALUE:
        p = gamma * rng.standard_normal()
        return np.full_like(honest_u, p)
    if kind == AttackKind.SIGN_FLIP:
        p = gamma * rng.standard_normal()
        return -abs(p) * honest_u
    if kind == AttackKind.GAUSSIAN:
        return gamma * rng.standard_normal(honest_u.shape)
    raise ValueError("label poisoning does not act on messages")


def poison_labels(labels, indices, C: int, mode: str, seed: int) -> np.ndarray:
    """Return a copy of ``labels`` with the entries at ``indices`` corrupted."""
    out = np.array(labels, copy=True)
    idx = np.asarray(indices, dtype=np.int64)
    if mode == "flip":
        if C != 2:
            raise ValueError("flip poisoning needs a binary problem")
        out[idx] = 1 - out[idx]
    elif mode == "uniform":
        out[idx] = np.random.default_rng([seed, 0x1AB]).integers(0, C, size=len(idx))
    else:
        raise ValueError(f"unknown poison mode {mode!r}")
    return out


@dataclass
class AttackSetup:
    upload_hook: object
    models: list
    malicious: list
    benign: np.ndarray = field(repr=False)


def apply_attack(config: AttackConfig | None, models: list, seed: int) -> AttackSetup:
    """Instrument a run: message attacks act through the upload hook only,
    label poisoning rewrites the malicious clients' training labels once."""
    m = len(models)
    if config is None or config.fraction == 0 and config.malicious is None:
        return AttackSetup(None, list(models), [], np.ones(m, dtype=bool))
    bad = config.resolve(m, seed)
    benign = np.ones(m, dtype=bool)
    benign[bad] = False
    kind = AttackKind(config.kind)
    if kind == AttackKind.LABEL_POISON:
        new_models = list(models)
        for i in bad:
            mod = models[i]
            y = poison_labels(mod.y, np.arange(mod.n), mod.num_classes, config.poison_mode, seed + i)
            new_models[i] = mod.rebind(mod.X, y)
        return AttackSetup(None, new_models, bad, benign)

    bad_set = set(bad)

    def hook(cid, u, round_idx):
        if cid not in bad_set:
            return u
        return corrupt_message(kind, u, config.gamma, np.random.default_rng([seed, cid, round_idx, 0xA]))

    return AttackSetup(hook, list(models), bad, benign)
