"""Model contract shared by the samplers, the influence code and the metrics.

Every model is a posterior ``p(theta | S) ∝ p(theta) * prod_z p(z | theta)``
over a flat parameter vector. Models expose log densities plus exact first
derivatives and a Hessian-vector product; nothing in this package relies on
numerical differentiation except the test oracles.

Batched convention: ``x`` is always a 2-D array of features (one row per
example) and ``y`` an int array of labels or ``None`` for unlabeled models.
"""
from __future__ import annotations

import abc
import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np


class DivergenceError(ArithmeticError):
    """A log density, gradient or chain state became non-finite."""

    def __init__(self, message, *, example_id=None, iteration=None, last_finite=None):
        super().__init__(message)
        self.example_id = example_id
        self.iteration = iteration
        self.last_finite = last_finite


@dataclass(frozen=True)
class Example:
    features: np.ndarray
    label: Optional[int]
    id: int


@dataclass(frozen=True)
class LabeledDataset:
    """Examples with stable integer ids and a removal mask.

    Instances are treated as immutable: :meth:`mark_removed` returns a new
    dataset sharing the feature storage.
    """

    features: np.ndarray
    labels: Optional[np.ndarray]
    ids: np.ndarray
    removed: np.ndarray = field(default=None)
    n_classes: Optional[int] = None

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {features.shape}")
        ids = np.asarray(self.ids, dtype=np.int64)
        if ids.shape != (features.shape[0],):
            raise ValueError("one id per example required")
        if np.unique(ids).size != ids.size:
            raise ValueError("example ids must be unique")
        if np.any(ids < 0):
            raise ValueError("example ids must be non-negative")
        labels = self.labels
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != ids.shape:
                raise ValueError("one label per example required")
            if self.n_classes is not None and labels.size and (
                labels.min() < 0 or labels.max() >= self.n_classes
            ):
                raise ValueError("label outside [0, n_classes)")
        removed = self.removed
        if removed is None:
            removed = np.zeros(ids.size, dtype=bool)
        removed = np.asarray(removed, dtype=bool)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "removed", removed)

    def __len__(self):
        return self.ids.size

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_remaining(self) -> int:
        return int(self.ids.size - self.removed.sum())

    def remaining_ids(self) -> np.ndarray:
        return self.ids[~self.removed]

    def positions(self, ids: Iterable[int]) -> np.ndarray:
        """Row positions of ``ids``; raises ``KeyError`` for unknown ids."""
        ids = np.asarray(list(ids) if not isinstance(ids, np.ndarray) else ids, dtype=np.int64)
        order = np.argsort(self.ids)
        sorted_ids = self.ids[order]
        pos = np.searchsorted(sorted_ids, ids)
        pos = np.clip(pos, 0, max(sorted_ids.size - 1, 0))
        if ids.size and (sorted_ids.size == 0 or np.any(sorted_ids[pos] != ids)):
            missing = ids[sorted_ids[pos] != ids] if sorted_ids.size else ids
            raise KeyError(f"unknown example ids: {missing[:5].tolist()}")
        return order[pos]

    def arrays(self, ids=None):
        """``(x, y)`` for the given ids, or for all remaining examples."""
        if ids is None:
            mask = ~self.removed
            x = self.features[mask]
            y = None if self.labels is None else self.labels[mask]
            return x, y
        pos = self.positions(ids)
        return self.features[pos], None if self.labels is None else self.labels[pos]

    def example(self, example_id: int) -> Example:
        (p,) = self.positions([example_id])
        label = None if self.labels is None else int(self.labels[p])
        return Example(self.features[p].copy(), label, int(example_id))

    def mark_removed(self, ids) -> "LabeledDataset":
        pos = self.positions(ids)
        if np.any(self.removed[pos]):
            raise ValueError("some ids are already removed")
        removed = self.removed.copy()
        removed[pos] = True
        return LabeledDataset(self.features, self.labels, self.ids, removed, self.n_classes)

    def subset(self, ids) -> "LabeledDataset":
        """A fresh dataset (nothing removed) holding only ``ids``."""
        pos = self.positions(ids)
        labels = None if self.labels is None else self.labels[pos]
        return LabeledDataset(self.features[pos], labels, self.ids[pos], None, self.n_classes)

    def fingerprint(self) -> int:
        """64-bit hash of the remaining examples (ids, features and labels)."""
        h = hashlib.blake2b(digest_size=8)
        mask = ~self.removed
        h.update(np.ascontiguousarray(self.ids[mask]).tobytes())
        h.update(np.ascontiguousarray(self.features[mask]).tobytes())
        if self.labels is not None:
            h.update(np.ascontiguousarray(self.labels[mask]).tobytes())
        return int.from_bytes(h.digest(), "little")


class BayesModel(abc.ABC):
    """Prior, likelihood and their derivative oracles over a flat ``theta``.

    Subclasses implement the batched primitives; ``joint_hvp`` and the
    potential helpers below are derived from them.
    """

    model_id = "model"
    is_classifier = False

    @abc.abstractmethod
    def dim(self) -> int: ...

    @abc.abstractmethod
    def log_prior(self, theta: np.ndarray) -> float: ...

    @abc.abstractmethod
    def grad_log_prior(self, theta: np.ndarray) -> np.ndarray: ...

    @abc.abstractmethod
    def hvp_log_prior(self, theta: np.ndarray, v: np.ndarray) -> np.ndarray: ...

    @abc.abstractmethod
    def log_lik(self, theta, x, y=None) -> np.ndarray:
        """Per-example ``log p(z | theta)``, shape ``(n,)``."""

    @abc.abstractmethod
    def grad_log_lik(self, theta, x, y=None) -> np.ndarray:
        """Per-example gradients, shape ``(n, dim)``."""

    @abc.abstractmethod
    def hvp_log_lik(self, theta, v, x, y=None) -> np.ndarray:
        """``sum_z Hess_theta log p(z | theta) @ v`` over the batch."""

    @abc.abstractmethod
    def init_params(self, rng: np.random.Generator) -> np.ndarray: ...

    def sum_grad_log_lik(self, theta, x, y=None) -> np.ndarray:
        return self.grad_log_lik(theta, x, y).sum(axis=0)

    def joint_hvp(self, theta, v, x, y, total_n) -> np.ndarray:
        """Hessian of ``log p(theta) + (total_n/|batch|) sum log p(z|theta)`` times ``v``."""
        n = x.shape[0]
        if n == 0:
            raise ValueError("empty batch")
        return self.hvp_log_prior(theta, v) + (total_n / n) * self.hvp_log_lik(theta, v, x, y)

    def joint_hvp_operator(self, theta, x, y, total_n):
        """``v -> joint_hvp(theta, v, x, y, total_n)`` for a fixed ``theta``.

        Models override this to cache the per-``theta`` forward state.
        """
        return lambda v: self.joint_hvp(theta, v, x, y, total_n)

    def predict(self, theta, x) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} is not a classifier")


def potential(model: BayesModel, theta: np.ndarray, data: LabeledDataset) -> float:
    """Exact potential ``U(theta)`` over the remaining examples of ``data``."""
    if data.n_remaining < 1:
        raise ValueError("potential needs at least one remaining example")
    x, y = data.arrays()
    ll = model.log_lik(theta, x, y)
    if not np.all(np.isfinite(ll)):
        bad = data.remaining_ids()[~np.isfinite(ll)][0]
        raise DivergenceError(f"non-finite log-likelihood at example {bad}", example_id=int(bad))
    lp = model.log_prior(theta)
    if not np.isfinite(lp):
        raise DivergenceError("non-finite log-prior")
    return float(-ll.sum() - lp)


def stochastic_grad_potential(model, theta, x, y, total_n) -> np.ndarray:
    """Minibatch estimate of the potential gradient, rescaled to ``total_n``."""
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty minibatch")
    if total_n < n:
        raise ValueError(f"total_n={total_n} smaller than minibatch size {n}")
    return -(total_n / n) * model.sum_grad_log_lik(theta, x, y) - model.grad_log_prior(theta)
