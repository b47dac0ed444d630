import itertools
import math

import numpy as np
import pytest
from sklearn.metrics import adjusted_rand_score, normalized_mutual_info_score

from sscc.metrics import (
    DegenerateGeometry,
    clustering_metrics,
    divergence_score,
    hungarian_match,
    matched_count,
)


def brute_force_best(pred, truth, c):
    return max(sum(perm[p] == t for p, t in zip(pred, truth)) for perm in itertools.permutations(range(c)))


def optimal_count(pred, truth, c):
    scores = [sum(perm[p] == t for p, t in zip(pred, truth)) for perm in itertools.permutations(range(c))]
    return scores.count(max(scores))


def random_instance(rng, c_max=6, n_max=60):
    c = int(rng.integers(2, c_max + 1))
    n = int(rng.integers(1, n_max))
    return rng.integers(0, c, n), rng.integers(0, c, n), c


# loop-based oracles, independent of the vectorised implementation


def kappa_oracle(pred_mapped, truth, c):
    n = len(truth)
    agree = sum(p == t for p, t in zip(pred_mapped, truth)) / n
    chance = sum((list(pred_mapped).count(k) / n) * (list(truth).count(k) / n) for k in range(c))
    return (agree - chance) / (1 - chance)


def purity_oracle(pred, truth):
    total = 0
    for k in set(pred):
        members = [t for p, t in zip(pred, truth) if p == k]
        total += max(members.count(v) for v in set(members))
    return total / len(pred)


def nmi_oracle(pred, truth):
    n = len(pred)
    pairs = {}
    for p, t in zip(pred, truth):
        pairs[(p, t)] = pairs.get((p, t), 0) + 1
    pc = {k: list(pred).count(k) for k in set(pred)}
    tc = {k: list(truth).count(k) for k in set(truth)}
    mi = sum(v / n * math.log(v * n / (pc[p] * tc[t])) for (p, t), v in pairs.items())
    hp = -sum(v / n * math.log(v / n) for v in pc.values())
    ht = -sum(v / n * math.log(v / n) for v in tc.values())
    return mi / math.sqrt(hp * ht)


def ari_oracle(pred, truth):
    comb = lambda x: x * (x - 1) / 2  # noqa: E731
    n = len(pred)
    pairs = {}
    for p, t in zip(pred, truth):
        pairs[(p, t)] = pairs.get((p, t), 0) + 1
    index = sum(comb(v) for v in pairs.values())
    a = sum(comb(list(pred).count(k)) for k in set(pred))
    b = sum(comb(list(truth).count(k)) for k in set(truth))
    expected = a * b / comb(n)
    return (index - expected) / ((a + b) / 2 - expected)


class TestHungarian:
    def test_swap(self):
        perm = hungarian_match([0, 0, 1, 1], [1, 1, 0, 0], 2)
        assert list(perm) == [1, 0]
        assert matched_count([0, 0, 1, 1], [1, 1, 0, 0], perm) == 4

    def test_identity(self):
        labels = [0, 1, 2, 2, 1, 0, 3]
        assert list(hungarian_match(labels, labels, 4)) == [0, 1, 2, 3]

    def test_lexicographic_tie(self):
        # every permutation matches nothing -> identity is the smallest optimum
        assert list(hungarian_match([0, 0], [0, 0], 3)) == [0, 1, 2]
        # only predicted label 0 occurs, matching true 2 is forced; rest smallest
        assert list(hungarian_match([0, 0], [2, 2], 3)) == [2, 0, 1]

    def test_against_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            pred, truth, c = random_instance(rng)
            perm = hungarian_match(pred, truth, c)
            assert sorted(perm) == list(range(c))
            assert matched_count(pred, truth, perm) == brute_force_best(pred, truth, c)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            hungarian_match([0, 3], [0, 1], 3)

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length"):
            clustering_metrics([0, 1], [0, 1, 1], 2)


class TestClusteringMetrics:
    def test_perfect(self):
        labels = [0, 1, 2, 0, 1, 2, 2]
        r = clustering_metrics(labels, labels, 3)
        assert (r.acc, r.kappa, r.nmi, r.ari, r.purity) == pytest.approx((1, 1, 1, 1, 1))

    def test_permuted_prediction(self):
        truth = np.array([0, 1, 2, 0, 1, 2, 2])
        r = clustering_metrics((truth + 1) % 3, truth, 3)
        assert (r.acc, r.kappa, r.nmi, r.ari, r.purity) == pytest.approx((1, 1, 1, 1, 1))

    def test_small_example(self):
        r = clustering_metrics([0, 0, 1, 1], [0, 1, 1, 1], 2)
        assert r.purity == pytest.approx(0.75)
        assert r.acc == pytest.approx(0.75)
        assert list(r.matching) == [0, 1]
        np.testing.assert_allclose(r.per_class_acc, [1.0, 2 / 3])

    def test_against_oracles(self):
        rng = np.random.default_rng(1)
        checked = 0
        while checked < 50:
            pred, truth, c = random_instance(rng, c_max=4, n_max=40)
            if len(set(pred)) < 2 or len(set(truth)) < 2 or len(pred) < 4:
                continue
            r = clustering_metrics(pred, truth, c)
            mapped = r.matching[pred]
            assert r.nmi == pytest.approx(nmi_oracle(pred, truth), abs=1e-9)
            assert r.nmi == pytest.approx(normalized_mutual_info_score(truth, pred, average_method="geometric"),
                                          abs=1e-9)
            assert r.ari == pytest.approx(ari_oracle(pred, truth), abs=1e-9)
            assert r.ari == pytest.approx(adjusted_rand_score(truth, pred), abs=1e-9)
            assert r.kappa == pytest.approx(kappa_oracle(mapped, truth, c), abs=1e-9)
            assert r.purity == pytest.approx(purity_oracle(pred, truth), abs=1e-12)
            checked += 1

    def test_ranges(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            pred, truth, c = random_instance(rng, n_max=30)
            r = clustering_metrics(pred, truth, c)
            assert 0 <= r.acc <= 1 and 0 <= r.nmi <= 1 and 0 <= r.purity <= 1
            assert -1 <= r.kappa <= 1 and -1 <= r.ari <= 1

    def test_relabel_invariance(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            pred, truth, c = random_instance(rng)
            relabel = rng.permutation(c)
            a = clustering_metrics(pred, truth, c)
            b = clustering_metrics(relabel[pred], truth, c)
            names = ["acc", "nmi", "ari", "purity"]
            # Kappa depends on which optimal matching is chosen; only compare unique optima
            if optimal_count(pred, truth, c) == 1:
                names.append("kappa")
            for name in names:
                assert getattr(a, name) == pytest.approx(getattr(b, name), abs=1e-12)

    def test_sample_order_invariance(self):
        rng = np.random.default_rng(4)
        pred, truth, c = rng.integers(0, 4, 50), rng.integers(0, 4, 50), 4
        perm = rng.permutation(50)
        a, b = clustering_metrics(pred, truth, c), clustering_metrics(pred[perm], truth[perm], c)
        for name in ("acc", "kappa", "nmi", "ari", "purity"):
            assert getattr(a, name) == pytest.approx(getattr(b, name), abs=1e-12)

    def test_matching_beats_identity(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            pred, truth, c = random_instance(rng)
            r = clustering_metrics(pred, truth, c)
            assert r.acc >= np.mean(pred == truth) - 1e-12
            assert r.purity >= r.acc - 1e-12

    def test_single_cluster_conventions(self):
        r = clustering_metrics([0, 0, 0], [0, 0, 0], 2)
        assert r.nmi == 0.0 and r.ari == 1.0 and r.acc == 1.0
        r = clustering_metrics([0, 0, 0, 0], [0, 1, 0, 1], 2)
        assert r.nmi == 0.0


class TestDivergence:
    def test_two_class_example(self):
        y = np.array([[1.0, 0.0]] * 3 + [[0.0, 1.0]] * 3)
        truth = [0, 0, 0, 1, 1, 1]
        assert divergence_score(y, truth) == pytest.approx(math.sqrt(2), abs=1e-12)

    def test_collapsed(self):
        y = np.tile([0.2, 0.5, 0.3], (9, 1))
        assert divergence_score(y, [0, 1, 2] * 3) == pytest.approx(1.0, abs=1e-12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(6)
        y = rng.random((30, 4))
        truth = np.arange(30) % 4
        assert divergence_score(3.5 * y, truth) == pytest.approx(divergence_score(y, truth), rel=1e-12)

    def test_empty_class(self):
        with pytest.raises(ValueError):
            divergence_score(np.ones((3, 3)), [0, 0, 2])

    def test_zero_representation(self):
        with pytest.raises(DegenerateGeometry):
            divergence_score(np.zeros((4, 2)), [0, 1, 0, 1])
