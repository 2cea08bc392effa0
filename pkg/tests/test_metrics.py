import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blcl.metrics import (
    MetricsReport,
    accuracy,
    average_accuracy,
    build_report,
    calinski_harabasz,
    confusion_matrix,
    davies_bouldin,
    f_beta,
    read_embeddings_csv,
    write_embeddings_csv,
)


def db_oracle(x, labels):
    """Textbook Davies-Bouldin with explicit loops."""
    classes = sorted(set(labels))
    pts = {c: [x[i] for i in range(len(x)) if labels[i] == c] for c in classes}
    cent = {c: np.mean(pts[c], axis=0) for c in classes}
    s = {c: np.mean([math.dist(p, cent[c]) for p in pts[c]]) for c in classes}
    total = 0.0
    for i in classes:
        total += max((s[i] + s[j]) / math.dist(cent[i], cent[j]) for j in classes if j != i)
    return total / len(classes)


def ch_oracle(x, labels):
    classes = sorted(set(labels))
    n, k = len(x), len(classes)
    mean = np.mean(x, axis=0)
    b = w = 0.0
    for c in classes:
        pts = [x[i] for i in range(n) if labels[i] == c]
        cent = np.mean(pts, axis=0)
        b += len(pts) * sum((cent - mean) ** 2)
        w += sum(sum((p - cent) ** 2) for p in pts)
    return (b / (k - 1)) / (w / (n - k))


def random_instance(rng, n_max=30, k_max=5, dim=4):
    k = int(rng.integers(2, k_max + 1))
    n = int(rng.integers(k + 1, n_max + 1))
    labels = np.concatenate([np.arange(k), rng.integers(0, k, n - k)])
    x = rng.normal(size=(n, dim)) + 3 * rng.normal(size=(k, dim))[labels]
    return x, labels


class TestConfusion:
    def test_all_correct(self):
        c = confusion_matrix([0, 1, 2, 2], [0, 1, 2, 2], 3)
        assert (c == np.diag([1, 1, 2])).all()

    def test_hand_count(self):
        assert confusion_matrix([1, 1], [0, 1], 2).tolist() == [[0, 1], [0, 1]]

    def test_tally_oracle(self):
        rng = np.random.default_rng(0)
        preds, labels = rng.integers(0, 5, 100), rng.integers(0, 5, 100)
        oracle = np.zeros((5, 5), dtype=int)
        for p, y in zip(preds, labels):
            oracle[y][p] += 1
        c = confusion_matrix(preds, labels, 5)
        assert (c == oracle).all()
        assert (c.sum(1) == np.bincount(labels, minlength=5)).all()
        assert accuracy(c) == pytest.approx(100 * np.mean(preds == labels))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            confusion_matrix([0, 3], [0, 1], 3)


class TestAccuracy:
    def test_diagonal(self):
        assert accuracy(np.diag([3, 4, 5])) == 100.0

    def test_average_of_reported_row(self):
        assert average_accuracy([95.20, 32.08, 24.80, 19.80]) == pytest.approx(42.97)

    def test_empty(self):
        with pytest.raises(ValueError):
            accuracy(np.zeros((2, 2)))
        with pytest.raises(ValueError):
            average_accuracy([])

    def test_uniform_random_predictions(self):
        rng = np.random.default_rng(0)
        k = 4
        labels = rng.integers(0, k, 200_000)
        preds = rng.integers(0, k, 200_000)
        assert accuracy(confusion_matrix(preds, labels, k)) == pytest.approx(100 / k, abs=0.5)


def f_oracle(preds, labels, k, beta):
    scores = []
    for c in range(k):
        tp = sum(1 for p, y in zip(preds, labels) if p == c and y == c)
        fp = sum(1 for p, y in zip(preds, labels) if p == c and y != c)
        fn = sum(1 for p, y in zip(preds, labels) if p != c and y == c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        d = beta ** 2 * prec + rec
        scores.append((1 + beta ** 2) * prec * rec / d if d else 0.0)
    return sum(scores) / k


class TestFBeta:
    def test_perfect(self):
        assert f_beta(np.diag([5, 3, 2]), 1) == 1.0
        assert f_beta(np.diag([5, 3, 2]), 2) == 1.0

    def test_missed_class_scores_zero(self):
        c = confusion_matrix([0, 0, 1, 1], [0, 0, 1, 2], 3)
        # class 2 never predicted correctly: its term is 0
        assert f_beta(c, 1) == pytest.approx((1 + 2 / 3 + 0) / 3)

    @pytest.mark.parametrize("beta", [1.0, 2.0, 0.5])
    def test_random_oracle(self, beta):
        rng = np.random.default_rng(int(beta * 10))
        preds, labels = rng.integers(0, 3, 60).tolist(), rng.integers(0, 3, 60).tolist()
        assert f_beta(confusion_matrix(preds, labels, 3), beta) == pytest.approx(f_oracle(preds, labels, 3, beta), abs=1e-9)

    def test_relabel_invariant(self):
        rng = np.random.default_rng(5)
        preds, labels = rng.integers(0, 4, 80), rng.integers(0, 4, 80)
        perm = np.array([2, 0, 3, 1])
        a = f_beta(confusion_matrix(preds, labels, 4), 2)
        b = f_beta(confusion_matrix(perm[preds], perm[labels], 4), 2)
        assert a == pytest.approx(b, abs=1e-12)

    def test_rejects_bad_beta(self):
        with pytest.raises(ValueError):
            f_beta(np.eye(2), 0)


class TestDaviesBouldin:
    def test_singletons(self):
        assert davies_bouldin(np.array([[0.0, 0.0], [1.0, 1.0]]), [0, 1]) == 0.0

    def test_separation_monotone(self):
        rng = np.random.default_rng(0)
        blob = rng.normal(scale=0.1, size=(10, 3))
        labels = [0] * 10 + [1] * 10
        far = davies_bouldin(np.vstack([blob, blob + 10]), labels)
        near = davies_bouldin(np.vstack([blob, blob + 1]), labels)
        assert far < near

    def test_twelve_points_oracle(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(12, 5))
        labels = [0, 1, 2] * 4
        assert davies_bouldin(x, labels) == pytest.approx(db_oracle(x, labels), abs=1e-9)

    def test_coincident_centroids(self):
        x = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        assert davies_bouldin(x, [0, 0, 1, 1]) == math.inf

    def test_needs_two_clusters(self):
        with pytest.raises(ValueError):
            davies_bouldin(np.zeros((3, 2)), [0, 0, 0])


class TestCalinskiHarabasz:
    def test_points_on_centroids(self):
        x = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0], [1.0, 1.0]])
        assert calinski_harabasz(x, [0, 0, 1, 1]) == math.inf

    def test_k_equals_n(self):
        assert calinski_harabasz(np.eye(3), [0, 1, 2]) == math.inf

    def test_tighter_is_higher(self):
        rng = np.random.default_rng(1)
        noise = rng.normal(size=(20, 2))
        centers = np.repeat(np.array([[0.0, 0.0], [5.0, 5.0]]), 10, axis=0)
        labels = [0] * 10 + [1] * 10
        assert calinski_harabasz(centers + 0.5 * noise, labels) > calinski_harabasz(centers + noise, labels)

    def test_twelve_points_oracle(self):
        rng = np.random.default_rng(21)
        x = rng.normal(size=(12, 4))
        labels = [0, 1, 2] * 4
        assert calinski_harabasz(x, labels) == pytest.approx(ch_oracle(x, labels), abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_cluster_indices_invariances(seed):
    rng = np.random.default_rng(seed)
    x, labels = random_instance(rng)
    shift = rng.normal(size=x.shape[1]) * 10
    q, _ = np.linalg.qr(rng.normal(size=(x.shape[1], x.shape[1])))
    db, ch = davies_bouldin(x, labels), calinski_harabasz(x, labels)
    assert davies_bouldin(x + shift, labels) == pytest.approx(db, rel=1e-9)
    assert calinski_harabasz(x + shift, labels) == pytest.approx(ch, rel=1e-9)
    assert davies_bouldin(x @ q, labels) == pytest.approx(db, rel=1e-9)
    assert calinski_harabasz(x @ q, labels) == pytest.approx(ch, rel=1e-9)


def test_matches_sklearn():
    skm = pytest.importorskip("sklearn.metrics")
    calinski_harabasz_score, davies_bouldin_score = skm.calinski_harabasz_score, skm.davies_bouldin_score

    rng = np.random.default_rng(4)
    x, labels = random_instance(rng)
    assert davies_bouldin(x, labels) == pytest.approx(davies_bouldin_score(x, labels), rel=1e-9)
    assert calinski_harabasz(x, labels) == pytest.approx(calinski_harabasz_score(x, labels), rel=1e-9)


def test_embedding_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(15, 512)).astype(np.float32)
    labels = np.arange(15) % 3
    write_embeddings_csv([f"s{i}" for i in range(15)], labels, x, tmp_path / "e.csv")
    ids, lab, back = read_embeddings_csv(tmp_path / "e.csv")
    assert ids[0] == "s0" and back.shape == (15, 512)
    assert davies_bouldin(back, lab) == davies_bouldin(x, labels)


def test_report_flags_infinity():
    x = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0], [1.0, 1.0]])
    report = build_report([100.0], [0, 0, 1, 1], [0, 0, 1, 1], [0, 1], x)
    d = report.to_dict()
    assert d["db_score"] == {"value": 0.0, "infinite": False}
    assert d["ch_score"]["infinite"] is True and d["ch_score"]["largest_finite"] > 0
    assert isinstance(report, MetricsReport)
