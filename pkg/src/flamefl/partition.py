"""Non-IID partition schemes: shard label skew, Dirichlet label skew, quality,
quantity and hybrid skew."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .datasets import ClientSplit, FederatedDataset, LabeledDataset, hold_out, train_test_split

MAX_REDRAWS = 100


class PartitionError(ValueError):
    pass


@dataclass
class Partition:
    client_indices: list
    scheme: str
    seed: int
    params: dict = field(default_factory=dict)

    @property
    def m(self):
        return len(self.client_indices)

    def sizes(self):
        return np.array([len(ix) for ix in self.client_indices])

    def to_json(self) -> str:
        return json.dumps({
            "scheme": self.scheme,
            "seed": self.seed,
            "params": self.params,
            "client_indices": [np.asarray(ix).tolist() for ix in self.client_indices],
        })

    @classmethod
    def from_json(cls, text: str) -> "Partition":
        obj = json.loads(text)
        idx = [np.asarray(ix, dtype=np.int64) for ix in obj["client_indices"]]
        return cls(idx, obj["scheme"], obj["seed"], obj.get("params", {}))


def _labels_of(data) -> np.ndarray:
    if isinstance(data, LabeledDataset):
        return data.labels
    return np.asarray(data)


def check_partition(part: Partition, n: int) -> None:
    """Raise if the index lists overlap, fall outside [0, n) or leave a client empty."""
    allidx = np.concatenate([np.asarray(ix, dtype=np.int64) for ix in part.client_indices]) \
        if part.client_indices else np.zeros(0, np.int64)
    if len(np.unique(allidx)) != len(allidx):
        raise PartitionError("client index lists overlap")
    if len(allidx) and (allidx.min() < 0 or allidx.max() >= n):
        raise PartitionError("index out of range")
    if any(len(ix) == 0 for ix in part.client_indices):
        raise PartitionError("empty client")


def _split_by_proportions(indices: np.ndarray, props: np.ndarray) -> list[np.ndarray]:
    # deterministic proportional cut; avoids multinomial noise on top of the Dirichlet draw
    cuts = np.rint(np.cumsum(props)[:-1] * len(indices)).astype(np.int64)
    return np.split(indices, cuts)


# ------------------------------------------------------------------- schemes


def quantity_label(data, m: int, q: int, seed: int) -> Partition:
    """Sort by label, cut into q*m contiguous shards, deal q random shards to each client."""
    labels = _labels_of(data)
    n = len(labels)
    if m < 1 or q < 1:
        raise PartitionError("m and q must be positive")
    if q * m > n:
        raise PartitionError(f"{q * m} shards requested but only {n} samples")
    order = np.lexsort((np.arange(n), labels))  # stable by (label, index)
    shards = np.array_split(order, q * m)
    perm = np.random.default_rng(seed).permutation(q * m)
    out = []
    for i in range(m):
        ids = perm[i * q:(i + 1) * q]
        out.append(np.sort(np.concatenate([shards[s] for s in ids])))
    return Partition(out, "quantity_label", seed, {"q": q})


def dirichlet_label(data, m: int, beta: float, seed: int, proportions=None, min_size: int = 1) -> Partition:
    """Per class k, split its samples across clients by p_k ~ Dir(beta 1_m).

    Passing ``proportions`` (C x m) reuses an earlier draw, e.g. to partition a
    test set consistently with its training set.
    """
    if beta <= 0:
        raise PartitionError("beta must be positive")
    labels = _labels_of(data)
    classes = np.unique(labels) if proportions is None else np.arange(len(proportions))
    rng = np.random.default_rng(seed)
    fixed = proportions is not None
    for attempt in range(1 if fixed else MAX_REDRAWS):
        if fixed:
            props = np.asarray(proportions, dtype=float)
        else:
            props = rng.dirichlet(np.full(m, beta), size=len(classes))
        shuffle_rng = np.random.default_rng([seed, attempt])
        buckets = [[] for _ in range(m)]
        for row, k in enumerate(classes):
            idx = np.flatnonzero(labels == k)
            idx = idx[shuffle_rng.permutation(len(idx))]
            for i, part in enumerate(_split_by_proportions(idx, props[row])):
                buckets[i].append(part)
        out = [np.sort(np.concatenate(b)) if b else np.zeros(0, np.int64) for b in buckets]
        if all(len(ix) >= min_size for ix in out) or fixed:
            return Partition(out, "dirichlet_label", seed,
                             {"beta": beta, "proportions": props.tolist(), "attempts": attempt + 1})
    raise PartitionError(f"could not avoid undersized clients after {MAX_REDRAWS} draws")


def quantity_skew(data, m: int, beta: float, seed: int, proportions=None, sampler=None,
                  min_size: int = 1) -> Partition:
    """Client sizes from a single p ~ Dir(beta 1_m) over a shuffled index set.

    ``sampler(rng, m, beta)`` overrides the Dirichlet draw (used to force corner cases).
    """
    if beta <= 0:
        raise PartitionError("beta must be positive")
    n = len(_labels_of(data))
    rng = np.random.default_rng(seed)
    fixed = proportions is not None
    draw = sampler or (lambda r, k, a: r.dirichlet(np.full(k, a)))
    for attempt in range(1 if fixed else MAX_REDRAWS):
        p = np.asarray(proportions, dtype=float) if fixed else np.asarray(draw(rng, m, beta), dtype=float)
        idx = np.random.default_rng([seed, attempt]).permutation(n)
        out = [np.sort(ix) for ix in _split_by_proportions(idx, p)]
        if all(len(ix) >= min_size for ix in out) or fixed:
            return Partition(out, "quantity_skew", seed,
                             {"beta": beta, "proportions": p.tolist(), "attempts": attempt + 1})
    raise PartitionError(f"could not avoid undersized clients after {MAX_REDRAWS} draws")


def equal_split(data, m: int, seed: int) -> Partition:
    n = len(_labels_of(data))
    if m > n:
        raise PartitionError("more clients than samples")
    perm = np.random.default_rng(seed).permutation(n)
    return Partition([np.sort(ix) for ix in np.array_split(perm, m)], "iid", seed, {})


def quality_noise_variance(i: int, m: int, sigma: float) -> float:
    """Noise variance for 1-based client index i."""
    return sigma * i / m


def add_quality_noise(features: np.ndarray, part: Partition, sigma: float, seed: int, stream: int = 0) -> np.ndarray:
    noisy = features.copy()
    if sigma == 0:
        return noisy
    m = part.m
    for i, ix in enumerate(part.client_indices):
        var = quality_noise_variance(i + 1, m, sigma)
        rng = np.random.default_rng([seed, stream, i])
        noisy[ix] += math.sqrt(var) * rng.standard_normal((len(ix), features.shape[1]))
    return noisy


def quality_skew(dataset: LabeledDataset, m: int, sigma: float, seed: int):
    """Equal random split, then Gaussian feature noise with variance sigma*i/m on client i (1-based)."""
    if sigma < 0:
        raise PartitionError("sigma must be nonnegative")
    part = equal_split(dataset, m, seed)
    part = Partition(part.client_indices, "quality", seed, {"sigma": sigma})
    noisy = add_quality_noise(dataset.features, part, sigma, seed)
    return part, LabeledDataset(noisy, dataset.labels.copy(), dataset.num_classes)


def _stratified_halves(labels, seed):
    # halve every class separately so both halves keep the full label mix
    rng = np.random.default_rng([seed, 7])
    a, b = [], []
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        idx = idx[rng.permutation(len(idx))]
        a.append(idx[: len(idx) // 2])
        b.append(idx[len(idx) // 2:])
    return np.sort(np.concatenate(a)), np.sort(np.concatenate(b))


def hybrid_skew(data, m: int, q: int, beta: float, seed: int, proportions=None, min_size: int = 1) -> Partition:
    """First ceil(m/2) clients take shard label skew on one half of the data,
    the rest take quantity skew on the other half."""
    labels = _labels_of(data)
    n = len(labels)
    m_label = math.ceil(m / 2)
    m_qty = m - m_label
    if m_qty == 0:
        half_a, half_b = np.arange(n), np.zeros(0, np.int64)
    else:
        half_a, half_b = _stratified_halves(labels, seed)
    pa = quantity_label(labels[half_a], m_label, q, seed)
    out = [half_a[ix] for ix in pa.client_indices]
    params = {"q": q, "beta": beta, "m_label": m_label}
    if m_qty:
        pb = quantity_skew(labels[half_b], m_qty, beta, seed + 1, proportions=proportions, min_size=min_size)
        out += [half_b[ix] for ix in pb.client_indices]
        params["proportions"] = pb.params["proportions"]
    return Partition([np.sort(ix) for ix in out], "hybrid", seed, params)


# ------------------------------------------------------------ federated build


def partition_by_spec(data, m: int, spec: dict, seed: int, reuse: Partition | None = None,
                      min_size: int = 1) -> Partition:
    kind = spec["scheme"]
    props = reuse.params.get("proportions") if reuse is not None else None
    if kind == "quantity_label":
        return quantity_label(data, m, spec["q"], seed)
    if kind == "dirichlet_label":
        return dirichlet_label(data, m, spec["beta"], seed, proportions=props, min_size=min_size)
    if kind == "quantity_skew":
        return quantity_skew(data, m, spec["beta"], seed, proportions=props, min_size=min_size)
    if kind == "hybrid":
        return hybrid_skew(data, m, spec["q"], spec["beta"], seed, proportions=props, min_size=min_size)
    if kind in ("iid", "quality"):
        return equal_split(data, m, seed)
    raise PartitionError(f"unknown partition scheme {kind!r}")


def _fill_empty(part: Partition) -> Partition:
    # reused proportions can starve a client on a small test split; borrow from the largest one
    idx = [np.asarray(ix) for ix in part.client_indices]
    for i in range(len(idx)):
        if len(idx[i]) == 0:
            j = int(np.argmax([len(ix) for ix in idx]))
            if len(idx[j]) < 2:
                raise PartitionError("not enough samples to give every client one")
            idx[i], idx[j] = idx[j][-1:], idx[j][:-1]
    return Partition(idx, part.scheme, part.seed, part.params)


def federate(dataset: LabeledDataset, m: int, spec: dict, seed: int,
             test_fraction: float = 0.2, val_fraction: float = 0.1) -> FederatedDataset:
    """Global train/test split, then partition both halves with the same scheme and seed.

    Each client's validation set is carved out of its training indices.
    """
    tr, te = train_test_split(len(dataset), test_fraction, seed)
    train, test = dataset.subset(tr), dataset.subset(te)
    # a client needs two training samples to give one up for validation
    p_train = partition_by_spec(train, m, spec, seed, min_size=2 if val_fraction > 0 else 1)
    p_test = _fill_empty(partition_by_spec(test, m, spec, seed, reuse=p_train))

    train_x, test_x = train.features, test.features
    if spec["scheme"] == "quality":
        train_x = add_quality_noise(train_x, p_train, spec["sigma"], seed, stream=0)
        test_x = add_quality_noise(test_x, p_test, spec["sigma"], seed, stream=1)

    rng = np.random.default_rng([seed, 11])
    clients = []
    for i in range(m):
        keep, val = hold_out(p_train.client_indices[i], val_fraction, rng)
        clients.append(ClientSplit(train=keep, val=val, test=np.asarray(p_test.client_indices[i])))
    return FederatedDataset(train_x, train.labels, test_x, test.labels, dataset.num_classes, clients,
                            meta={"kind": "classification", "partition": spec, "seed": seed})
