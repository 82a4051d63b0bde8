import json
import unittest
from unittest import mock

import numpy as np
import pandas as pd
import pytest
from sklearn.metrics import normalized_mutual_info_score

from rffcl import FormatError, InputShapeError, StorageError, batch, poolmap
from rffcl.stats import confusion_frame
from rffcl.stats.metrics import (
    FeatureMatrix,
    accuracy,
    average_nmi,
    clustering_nmi,
    confusion,
    export_features,
    kmeans,
    nmi,
    per_class_accuracy,
    write_metrics,
)
from rffcl.utils import PhaseTimer
from rffcl.utils.io import canonical_json, config_hash, read_container, read_json, save_csv, write_container


def blobs(n_per: int = 20, k: int = 3, seed: int = 0) -> FeatureMatrix:
    rng = np.random.default_rng(seed)
    centres = np.eye(k) * 10
    labels = np.repeat(np.arange(k), n_per)
    return FeatureMatrix(centres[labels] + rng.standard_normal((k * n_per, k)) * 0.1, labels)


class NmiTestCase(unittest.TestCase):
    def test_identical_partitions(self):
        self.assertEqual(nmi([0, 0, 1, 1, 2], [0, 0, 1, 1, 2]), 1.0)

    def test_label_permutation(self):
        self.assertEqual(nmi([0, 0, 1, 1, 2, 2], [2, 2, 0, 0, 1, 1]), 1.0)

    def test_single_clusters(self):
        self.assertEqual(nmi([0, 0, 0], [1, 1, 1]), 1.0)
        self.assertEqual(nmi([0, 0, 0, 0], [0, 1, 0, 1]), 0.0)

    def test_matches_sklearn_geometric(self):
        rng = np.random.default_rng(0)
        a, b = rng.integers(0, 4, 200), rng.integers(0, 3, 200)
        expected = normalized_mutual_info_score(a, b, average_method="geometric")
        self.assertAlmostEqual(nmi(a, b), expected, places=12)
        self.assertLess(nmi(a, b), 0.1)

    def test_lengths_checked(self):
        with self.assertRaises(InputShapeError):
            nmi([0, 1], [0])
        with self.assertRaises(InputShapeError):
            nmi([], [])

    def test_kmeans_recovers_blobs(self):
        matrix = blobs()
        partition = kmeans(matrix, 3, restarts=5, seed=0)
        self.assertEqual(partition.k, 3)
        self.assertEqual(nmi(partition, matrix.labels), 1.0)
        self.assertEqual(clustering_nmi(matrix, seed=1), 1.0)

    def test_kmeans_is_seeded(self):
        matrix = FeatureMatrix(np.random.default_rng(3).standard_normal((40, 4)), np.zeros(40, dtype=int))
        a = kmeans(matrix, 4, restarts=3, seed=7)
        b = kmeans(matrix, 4, restarts=3, seed=7)
        np.testing.assert_array_equal(a.assignments, b.assignments)

    def test_too_few_points(self):
        with self.assertRaises(InputShapeError):
            kmeans(np.zeros((2, 3)), 3)

    def test_average_window(self):
        self.assertAlmostEqual(average_nmi([0.1, 0.2, 0.3, 0.5], window=3), (0.2 + 0.3 + 0.5) / 3)
        self.assertAlmostEqual(average_nmi([0.4, float("nan")], window=10), 0.4)
        self.assertTrue(np.isnan(average_nmi([])))


class ClassificationMetricsTestCase(unittest.TestCase):
    def test_confusion(self):
        matrix = confusion([0, 1, 1, 2], [0, 1, 2, 2], n_classes=4)
        self.assertEqual(matrix.shape, (4, 4))
        self.assertEqual(matrix[2, 1], 1)
        self.assertEqual(matrix.sum(), 4)

    def test_per_class_accuracy(self):
        result = per_class_accuracy([0, 1, 1, 2], [0, 1, 2, 2], n_classes=4)
        np.testing.assert_allclose(result[:3], [1.0, 1.0, 0.5])
        self.assertTrue(np.isnan(result[3]))

    def test_accuracy(self):
        self.assertEqual(accuracy([1, 1], [1, 1]), 1.0)
        with self.assertRaises(InputShapeError):
            accuracy([1], [1, 0])

    def test_confusion_frame(self):
        df = confusion_frame(np.array([[3, 1], [0, 4]]), names=["a", "b"])
        self.assertEqual(df.index.tolist(), ["true_a", "true_b"])
        self.assertEqual(int(df.loc["true_a", "pred_b"]), 1)

    def test_confusion_totals(self):
        matrix = np.array([[3, 1, 0], [0, 4, 1], [2, 0, 5]])
        df = confusion_frame(matrix, totals=True)
        self.assertEqual(df.shape, (4, 4))
        self.assertEqual(df["support"].tolist(), [4, 5, 7, 16])
        self.assertEqual(df.loc["predicted"].tolist(), [5, 5, 6, 16])
        np.testing.assert_array_equal(df.iloc[:3, :3].to_numpy(), matrix)
        self.assertNotIn("support", confusion_frame(matrix).columns)


def test_feature_export(tmp_path):
    matrix = blobs(n_per=3, k=2)
    path = export_features(matrix, tmp_path / "features.csv", comment="config_hash=abc")
    assert path.read_text().startswith("# config_hash=abc\n")
    df = pd.read_csv(path, comment="#")
    assert list(df.columns) == ["f0", "f1", "label"]
    assert df["label"].tolist() == [0, 0, 0, 1, 1, 1]
    np.testing.assert_allclose(df[["f0", "f1"]].to_numpy(), matrix.features, rtol=1e-7)


def test_metrics_json(tmp_path):
    path = write_metrics(
        tmp_path / "metrics.json",
        {"nmi": float("nan"), "accuracy": np.float64(0.5), "per_class": np.array([1.0, np.nan]), "ok": np.bool_(True)},
        "0123456789abcdef",
    )
    doc = json.loads(path.read_text())
    assert doc["nmi"] is None
    assert doc["accuracy"] == 0.5
    assert doc["per_class"] == [1.0, None]
    assert doc["ok"] is True
    assert doc["config_hash"] == "0123456789abcdef"
    assert doc["nmi_convention"]["normalisation"] == "geometric"


class IoTestCase(unittest.TestCase):
    def test_hash_ignores_key_order(self):
        self.assertEqual(config_hash({"a": 1, "b": [1, 2]}), config_hash({"b": [1, 2], "a": 1}))
        self.assertNotEqual(config_hash({"a": 1}), config_hash({"a": 2}))
        self.assertEqual(canonical_json({"x": 1.0}), '{"x":1.0}')


def test_container_round_trip(tmp_path):
    path = write_container(tmp_path / "sub" / "x.bin", b"TESTMAG1", {"n": 3}, b"\x00\x01\x02")
    header, payload = read_container(path, b"TESTMAG1")
    assert header == {"n": 3}
    assert payload == b"\x00\x01\x02"
    with pytest.raises(FormatError):
        read_container(path, b"OTHERMG1")
    with pytest.raises(StorageError):
        read_container(tmp_path / "missing.bin", b"TESTMAG1")


def test_read_json_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(FormatError):
        read_json(bad)
    with pytest.raises(StorageError):
        read_json(tmp_path / "absent.json")


def test_csv_is_reproducible(tmp_path):
    df = pd.DataFrame({"a": [0.1, 1 / 3], "b": [1, 2]})
    first = save_csv(df, tmp_path / "a.csv").read_bytes()
    second = save_csv(df, tmp_path / "b.csv").read_bytes()
    assert first == second


class PoolTestCase(unittest.TestCase):
    def test_poolmap_matches_sequential(self):
        sequential = poolmap(lambda x, k: x * k, range(20), max_workers=1, k=3)
        threaded = poolmap(lambda x, k: x * k, range(20), max_workers=4, k=3)
        self.assertEqual(sequential, threaded)

    def test_thread_env(self):
        from rffcl import THREADS_ENV, worker_count

        with mock.patch.dict("os.environ", {THREADS_ENV: "3"}):
            self.assertEqual(worker_count(), 3)
        self.assertEqual(worker_count(2), 2)

    def test_batch(self):
        self.assertEqual([list(b) for b in batch(range(5), 2)], [[0, 1], [2, 3], [4]])

    def test_phase_timer_accumulates(self):
        timer = PhaseTimer()
        with timer.phase("a"):
            pass
        with timer.phase("a"):
            pass
        self.assertEqual(list(timer.durations), ["a"])
        self.assertGreaterEqual(timer.durations["a"], 0.0)
