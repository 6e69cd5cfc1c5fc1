import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flamefl import partition as P
from flamefl.datasets import LabeledDataset, synth_classification


def _cover(part, n):
    allidx = np.sort(np.concatenate(part.client_indices))
    return np.array_equal(allidx, np.arange(n))


def _labels(n, C, seed=0):
    return np.random.default_rng(seed).integers(0, C, n)


def test_shards_arithmetic():
    labels = np.repeat(np.arange(4), 10)
    part = P.quantity_label(labels, 2, 2, seed=0)
    assert list(part.sizes()) == [20, 20]
    for ix in part.client_indices:
        # each shard of 10 is a single label here
        vals, counts = np.unique(labels[ix], return_counts=True)
        assert set(counts) == {10}
    assert _cover(part, 40)


def test_single_client_gets_everything():
    labels = _labels(57, 3)
    for part in (P.quantity_label(labels, 1, 2, 0), P.dirichlet_label(labels, 1, 0.3, 0),
                 P.quantity_skew(labels, 1, 0.3, 0)):
        assert part.m == 1 and len(part.client_indices[0]) == 57


def test_shard_label_count_bound():
    labels = np.repeat(np.arange(10), 600)
    for seed in range(5):
        part = P.quantity_label(labels, 10, 2, seed)
        assert max(len(np.unique(labels[ix])) for ix in part.client_indices) <= 3


def test_dirichlet_concentrates():
    labels = np.repeat(np.arange(10), 1000)
    part = P.dirichlet_label(labels, 10, 1e6, seed=1)
    for ix in part.client_indices:
        frac = np.bincount(labels[ix], minlength=10) / len(ix)
        assert np.all(np.abs(frac - 0.1) <= 0.05 * 0.1 + 1e-12)


def _herfindahl(labels, part, C):
    h = []
    for ix in part.client_indices:
        p = np.bincount(labels[ix], minlength=C) / len(ix)
        h.append(np.sum(p**2))
    return np.mean(h)


def test_dirichlet_skew_is_more_concentrated():
    labels = np.repeat(np.arange(10), 100)
    wins = 0
    for seed in range(100):
        skew = _herfindahl(labels, P.dirichlet_label(labels, 10, 0.5, seed), 10)
        flat = _herfindahl(labels, P.dirichlet_label(labels, 10, 1e6, seed), 10)
        wins += skew > flat
    assert wins >= 95


def test_quality_zero_noise_is_identity():
    ds = synth_classification(4, 25, 3, 2, 1.0, 0)
    part, noisy = P.quality_skew(ds, 4, 0.0, 0)
    assert np.array_equal(noisy.features, ds.features)
    assert _cover(part, len(ds))


def test_quality_noise_variances():
    m, sigma = 10, 0.1
    ds = LabeledDataset(np.zeros((10 * 500, 20)), np.zeros(5000, dtype=np.int64), 1)
    part, noisy = P.quality_skew(ds, m, sigma, seed=3)
    noise10 = noisy.features[part.client_indices[9]].ravel()
    noise5 = noisy.features[part.client_indices[4]].ravel()
    n = noise10.size
    v10, v5 = noise10.var(), noise5.var()
    assert abs(v10 - 0.1) <= 3 * 0.1 * np.sqrt(2 / (n - 1))
    # ratio of two sample variances: relative se about sqrt(2/n) each
    assert abs(v10 / v5 - 2.0) <= 3 * 2.0 * np.sqrt(4 / n)
    assert P.quality_noise_variance(5, 10, 0.1) == pytest.approx(0.05)


def test_quantity_skew_concentrates():
    part = P.quantity_skew(np.zeros(10_000), 10, 1e6, seed=2)
    assert np.all(np.abs(part.sizes() - 1000) <= 50)
    assert part.sizes().sum() == 10_000


def test_quantity_skew_redraws_empty_corner():
    calls = []

    def sampler(rng, m, beta):
        calls.append(1)
        return np.array([1.0, 0.0]) if len(calls) == 1 else np.array([0.5, 0.5])

    part = P.quantity_skew(np.zeros(20), 2, 1.0, seed=0, sampler=sampler)
    assert len(calls) == 2
    assert part.params["attempts"] == 2
    assert all(part.sizes() > 0)


def test_quantity_skew_gives_up():
    with pytest.raises(P.PartitionError):
        P.quantity_skew(np.zeros(20), 2, 1.0, seed=0, sampler=lambda r, m, b: np.array([1.0, 0.0]))


def test_hybrid_two_clients():
    labels = _labels(200, 4)
    part = P.hybrid_skew(labels, 2, 2, 0.5, seed=0)
    assert part.params["m_label"] == 1
    assert _cover(part, 200)


def _shard_label_counts(labels, m, q, seed):
    # independent enumeration: sort labels, cut into q*m equal shards, deal by the seeded permutation
    sorted_labels = np.sort(labels, kind="stable")
    shards = np.array_split(sorted_labels, q * m)
    perm = np.random.default_rng(seed).permutation(q * m)
    return [len(np.unique(np.concatenate([shards[s] for s in perm[i * q:(i + 1) * q]]))) for i in range(m)]


def test_hybrid_label_half():
    labels = np.repeat(np.arange(10), 300)
    for seed in range(5):
        part = P.hybrid_skew(labels, 10, 2, 0.5, seed=seed)
        assert _cover(part, len(labels))
        half = np.sort(np.concatenate([ix for ix in part.client_indices[:5]]))
        assert np.array_equal(np.bincount(labels[half]), np.full(10, 150))
        expect = _shard_label_counts(labels[half], 5, 2, seed)
        got = [len(np.unique(labels[ix])) for ix in part.client_indices[:5]]
        assert got == expect
        assert max(got) <= 3


def test_json_roundtrip():
    part = P.dirichlet_label(_labels(100, 5), 4, 0.5, 9)
    back = P.Partition.from_json(part.to_json())
    assert back.scheme == part.scheme and back.seed == 9
    for a, b in zip(part.client_indices, back.client_indices):
        assert np.array_equal(a, b)


def test_check_partition_rejects_overlap():
    bad = P.Partition([np.array([0, 1]), np.array([1, 2])], "x", 0)
    with pytest.raises(P.PartitionError):
        P.check_partition(bad, 3)


def test_federate_splits():
    ds = synth_classification(5, 80, 4, 3, 2.0, 0)
    fed = P.federate(ds, 5, {"scheme": "dirichlet_label", "beta": 0.5}, seed=1)
    assert len(fed.test_targets) == 80
    seen = []
    for c in fed.clients:
        assert len(c.test) > 0 and len(c.val) > 0
        assert not set(c.train) & set(c.val)
        seen += list(c.train) + list(c.val)
    assert sorted(seen) == list(range(len(fed.train_targets)))


SCHEMES = [
    {"scheme": "quantity_label", "q": 2},
    {"scheme": "dirichlet_label", "beta": 0.5},
    {"scheme": "quantity_skew", "beta": 0.5},
    {"scheme": "hybrid", "q": 2, "beta": 0.5},
    {"scheme": "iid"},
]


@settings(max_examples=40, deadline=None)
@given(n=st.integers(60, 400), m=st.integers(1, 8), C=st.integers(2, 6),
       seed=st.integers(0, 10_000), which=st.integers(0, len(SCHEMES) - 1))
def test_disjoint_cover_and_determinism(n, m, C, seed, which):
    labels = _labels(n, C, seed)
    spec = SCHEMES[which]
    a = P.partition_by_spec(labels, m, spec, seed)
    b = P.partition_by_spec(labels, m, spec, seed)
    assert _cover(a, n)
    P.check_partition(a, n)
    for x, y in zip(a.client_indices, b.client_indices):
        assert np.array_equal(x, y)
