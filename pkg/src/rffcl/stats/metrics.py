"""
Representation and classification metrics

Clustering quality is NMI between k-means clusters of encoder features and the true
device labels, with the geometric-mean normalisation; classification is accuracy,
per-device accuracy and the confusion matrix.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np
import pandas as pd
from sklearn.cluster import KMeans
from sklearn.metrics import accuracy_score, confusion_matrix, normalized_mutual_info_score

from .. import InputShapeError
from ..utils.io import PathLike, save_csv, write_json

logger = logging.getLogger(__name__)

NMI_NORMALISATION = "geometric"
NMI_WINDOW = 10
KMEANS_RESTARTS = 10


@dataclass(frozen=True)
class FeatureMatrix:
    """Features (N, D) with the true labels, the latter used only for evaluation"""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.features.ndim != 2:
            raise InputShapeError(f"features must be (N, D), got {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise InputShapeError(f"{self.labels.shape[0]} labels for {self.features.shape[0]} rows")

    def __len__(self):
        return self.features.shape[0]


@dataclass(frozen=True)
class Partition:
    assignments: np.ndarray
    k: int
    inertia: float = float("nan")

    def __post_init__(self):
        if self.assignments.size and (self.assignments.min() < 0 or self.assignments.max() >= self.k):
            raise InputShapeError(f"Cluster ids must lie in [0, {self.k})")


def _check_lengths(a: Sequence, b: Sequence):
    if len(a) != len(b):
        raise InputShapeError(f"Length mismatch: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise InputShapeError("Empty input")


def kmeans(features, k: int, restarts: int = KMEANS_RESTARTS, seed: int = 0) -> Partition:
    """Lloyd's k-means with k-means++ seeding, best of `restarts` by inertia

    >>> x = np.array([[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.1, 5.0]])
    >>> p = kmeans(x, 2, seed=0)
    >>> bool(p.assignments[0] == p.assignments[1] != p.assignments[2] == p.assignments[3])
    True
    """
    x = features.features if isinstance(features, FeatureMatrix) else np.asarray(features)
    if x.shape[0] < k:
        raise InputShapeError(f"Cannot form {k} clusters from {x.shape[0]} points")
    model = KMeans(n_clusters=k, init="k-means++", n_init=restarts, algorithm="lloyd", random_state=seed)
    labels = model.fit_predict(np.asarray(x, dtype=np.float64))
    return Partition(labels.astype(np.int64), k, float(model.inertia_))


def nmi(a, b) -> float:
    """I(a; b) / sqrt(H(a) H(b)), natural logs

    >>> nmi([0, 0, 1, 1], [0, 1, 0, 1])
    0.0
    >>> nmi([0, 0, 1, 1], [1, 1, 0, 0])
    1.0
    """
    a = a.assignments if isinstance(a, Partition) else np.asarray(a)
    b = b.assignments if isinstance(b, Partition) else np.asarray(b)
    _check_lengths(a, b)
    if len(np.unique(a)) == 1 and len(np.unique(b)) == 1:
        return 1.0
    value = normalized_mutual_info_score(a, b, average_method=NMI_NORMALISATION)
    return float(np.clip(round(value, 15), 0.0, 1.0)) + 0.0


def accuracy(predictions, labels) -> float:
    """
    >>> accuracy([0, 1, 2, 2], [0, 1, 2, 0])
    0.75
    """
    _check_lengths(predictions, labels)
    return float(accuracy_score(labels, predictions))


def confusion(predictions, labels, n_classes: Optional[int] = None) -> np.ndarray:
    """C x C counts, rows are the truth"""
    _check_lengths(predictions, labels)
    if n_classes is None:
        n_classes = int(max(np.max(predictions), np.max(labels))) + 1
    return confusion_matrix(labels, predictions, labels=list(range(n_classes)))


def per_class_accuracy(predictions, labels, n_classes: Optional[int] = None) -> np.ndarray:
    """Recall per device; NaN for a device with no samples"""
    matrix = confusion(predictions, labels, n_classes)
    totals = matrix.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(totals > 0, np.diag(matrix) / totals, np.nan)


def average_nmi(history: Sequence[float], window: int = NMI_WINDOW) -> float:
    """Mean NMI over the last `window` recorded epochs

    >>> average_nmi([0.1, 0.2, 0.4, 0.6], window=2)
    0.5
    """
    values = [v for v in history if v is not None and np.isfinite(v)]
    if not values:
        return float("nan")
    return float(np.mean(values[-window:]))


def clustering_nmi(
    matrix: FeatureMatrix, k: Optional[int] = None, restarts: int = KMEANS_RESTARTS, seed: int = 0
) -> float:
    """NMI between k-means clusters of the features and the true labels"""
    k = k or len(np.unique(matrix.labels))
    return nmi(kmeans(matrix, k, restarts, seed), matrix.labels)


def export_features(matrix: FeatureMatrix, path: PathLike, comment: Optional[str] = None) -> Path:
    """One row per packet: f0..f{D-1} then the label"""
    columns = [f"f{i}" for i in range(matrix.features.shape[1])]
    df = pd.DataFrame(matrix.features, columns=columns)
    df["label"] = matrix.labels.astype(np.int64)
    logger.info(f"Exporting {df.shape[0]} x {matrix.features.shape[1]} features to {path}")
    return save_csv(df, path, comment=comment)


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (np.floating, float)):
        return None if not np.isfinite(value) else float(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def write_metrics(path: PathLike, metrics: Dict, config_hash: str) -> Path:
    """Metrics JSON; NaN becomes null and the NMI conventions are recorded alongside"""
    doc = dict(metrics)
    doc["config_hash"] = config_hash
    doc["nmi_convention"] = {
        "normalisation": NMI_NORMALISATION,
        "clustering": "kmeans++/lloyd",
        "restarts": KMEANS_RESTARTS,
        "average_window": NMI_WINDOW,
    }
    return write_json(path, _jsonable(doc))
