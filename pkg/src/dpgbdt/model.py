"""Complete decision trees, ensembles, gradients and evaluation metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.special import expit

# Trees store the negated noisy mean so that adding eta * f_t lowers the loss.
LEAF_SIGN = -1.0


class UndefinedMetric(ValueError):
    pass


@dataclass
class Tree:
    """Complete binary tree of depth ``d`` stored in heap order.

    Internal node ``k`` has children ``2k+1`` (left) and ``2k+2`` (right).
    A row goes left when ``x[f] <= t`` for numerical splits and when
    ``x[f] == t`` for categorical ones.
    """

    features: np.ndarray
    thresholds: np.ndarray
    categorical: np.ndarray
    leaves: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.int64)
        self.thresholds = np.asarray(self.thresholds, dtype=float)
        self.categorical = np.asarray(self.categorical, dtype=bool)
        n_internal = self.features.shape[0]
        if n_internal < 1 or (n_internal + 1) & n_internal:
            raise ValueError("a complete tree needs 2**d - 1 internal nodes")
        if self.thresholds.shape != self.features.shape or self.categorical.shape != self.features.shape:
            raise ValueError("split arrays must have equal length")
        if self.leaves is None:
            self.leaves = np.zeros(n_internal + 1)
        self.leaves = np.asarray(self.leaves, dtype=float)
        if self.leaves.shape != (n_internal + 1,):
            raise ValueError(f"expected {n_internal + 1} leaves, got {self.leaves.shape}")

    @property
    def depth(self) -> int:
        return int(self.features.shape[0] + 1).bit_length() - 1

    @property
    def n_leaves(self) -> int:
        return self.leaves.shape[0]

    def leaf_index(self, X) -> np.ndarray:
        """Leaf index (0 .. 2**d - 1) reached by each row of ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        for _ in range(self.depth):
            f = self.features[node]
            v = X[rows, f]
            t = self.thresholds[node]
            left = np.where(self.categorical[node], v == t, v <= t)
            node = 2 * node + 1 + (~left)
        return node - self.features.shape[0]

    def predict(self, X) -> np.ndarray:
        return self.leaves[self.leaf_index(X)]

    def copy(self) -> "Tree":
        return Tree(self.features.copy(), self.thresholds.copy(), self.categorical.copy(),
                    self.leaves.copy())

    def same_structure(self, other: "Tree") -> bool:
        return (np.array_equal(self.features, other.features)
                and np.array_equal(self.thresholds, other.thresholds)
                and np.array_equal(self.categorical, other.categorical))

    def to_dict(self) -> dict:
        splits = [{"feature": int(f), "threshold": float(t), "op": "=" if c else "<="}
                  for f, t, c in zip(self.features, self.thresholds, self.categorical)]
        return {"depth": self.depth, "splits": splits, "leaves": [float(v) for v in self.leaves]}

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        s = d["splits"]
        return cls([x["feature"] for x in s], [x["threshold"] for x in s],
                   [x["op"] == "=" for x in s], d["leaves"])


@dataclass
class Ensemble:
    init_score: float
    eta: float
    loss: str = "mse"
    trees: List[Tree] = field(default_factory=list)
    n_features: Optional[int] = None

    def __post_init__(self):
        if self.loss not in ("mse", "logistic"):
            raise ValueError(f"unknown loss {self.loss!r}")

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if self.n_features is not None and X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        return X, single

    def raw_score(self, X) -> np.ndarray:
        X, single = self._check(X)
        out = np.full(X.shape[0], float(self.init_score))
        for tree in self.trees:
            out += self.eta * tree.predict(X)
        return out[0] if single else out

    def predict(self, X):
        """Regression value, or the 0/1 class label for logistic ensembles."""
        raw = self.raw_score(X)
        if self.loss == "logistic":
            return (expit(raw) >= 0.5).astype(float)
        return raw

    def to_dict(self) -> dict:
        return {"init_score": float(self.init_score), "eta": float(self.eta), "loss": self.loss,
                "n_features": self.n_features, "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, d: dict) -> "Ensemble":
        return cls(d["init_score"], d["eta"], d.get("loss", "mse"),
                   [Tree.from_dict(t) for t in d["trees"]], d.get("n_features"))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "Ensemble":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def predict(e: Ensemble, x):
    return e.predict(x)


def loss_for_task(task: str) -> str:
    return "logistic" if task == "classification" else "mse"


def gradient(loss: str, y, y_hat):
    """First derivative of the loss in the raw score."""
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if loss == "mse":
        return y_hat - y
    if loss == "logistic":
        return expit(y_hat) - y
    raise ValueError(f"unknown loss {loss!r}")


def r2_score(pred, labels) -> float:
    pred = np.asarray(pred, dtype=float)
    labels = np.asarray(labels, dtype=float)
    ss_tot = float(np.sum((labels - labels.mean()) ** 2))
    if ss_tot == 0.0:
        raise UndefinedMetric("R^2 is undefined for constant labels")
    return 1.0 - float(np.sum((labels - pred) ** 2)) / ss_tot


def misclassification_rate(pred, labels) -> float:
    return float(np.mean(np.asarray(pred) != np.asarray(labels)))


def metrics(pred, labels, task: str) -> dict:
    pred = np.asarray(pred, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if pred.shape != labels.shape or pred.size == 0:
        raise ValueError("predictions and labels must be nonempty and of equal length")
    if task == "classification":
        return {"test_error": misclassification_rate(pred, labels)}
    return {"r2": r2_score(pred, labels)}


def metric_name(task: str) -> str:
    return "test_error" if task == "classification" else "r2"
