"""Weighted k-nearest-neighbour accuracy of learned representations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._kernels import backend as _k
from .errors import InvalidArgumentError

DEFAULT_K = 15
DEFAULT_TAU = 0.1


@dataclass(frozen=True)
class LabeledEmbeddingSet:
    vectors: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        v = np.ascontiguousarray(self.vectors, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if v.ndim != 2 or y.shape != (v.shape[0],):
            raise InvalidArgumentError(f"{v.shape[0] if v.ndim else 0} vectors but labels of shape {y.shape}")
        if y.size and y.min() < 0:
            raise InvalidArgumentError("class ids must be non-negative")
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "labels", y)

    @classmethod
    def from_raw(cls, vectors: np.ndarray, labels: np.ndarray) -> LabeledEmbeddingSet:
        """Normalize rows to unit length first."""
        v = np.asarray(vectors, dtype=np.float64)
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        return cls(v / np.where(norms == 0, 1.0, norms), labels)

    def __len__(self) -> int:
        return self.labels.shape[0]


def knn_predict(
    train: LabeledEmbeddingSet, test_vectors: np.ndarray, k: int = DEFAULT_K, tau: float = DEFAULT_TAU
) -> np.ndarray:
    """Predicted class per test vector.

    Neighbours are the ``k`` most cosine-similar train vectors (equal
    similarities resolved by lower train index). Each neighbour votes
    ``exp(sim / tau)`` for its class; ties go to the lowest class id.
    """
    if len(train) == 0:
        raise InvalidArgumentError("empty train set")
    if not 1 <= k <= len(train):
        raise InvalidArgumentError(f"k must be in [1, {len(train)}], got {k}")
    if not tau > 0:
        raise InvalidArgumentError(f"tau must be > 0, got {tau}")
    test = np.ascontiguousarray(test_vectors, dtype=np.float64)
    n_classes = int(train.labels.max()) + 1
    return _k.knn_predict(train.vectors, train.labels, test, int(k), float(tau), n_classes)


def knn_accuracy(
    train: LabeledEmbeddingSet,
    test: LabeledEmbeddingSet,
    k: int = DEFAULT_K,
    tau: float = DEFAULT_TAU,
) -> float:
    """Percentage of test vectors whose weighted kNN vote matches their label."""
    if len(test) == 0:
        raise InvalidArgumentError("empty test set")
    pred = knn_predict(train, test.vectors, k, tau)
    return 100.0 * float(np.count_nonzero(pred == test.labels)) / len(test)
