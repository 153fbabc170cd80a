"""Unlearning metrics: k-NN KL divergence, classification error, MIA, timing."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .samplers import SampleSet

_DIST_FLOOR = 1e-12


def _as_array(s):
    return s.samples if isinstance(s, SampleSet) else np.atleast_2d(np.asarray(s, dtype=np.float64))


def knn_kl(p, q, k: int = 1) -> float:
    """k-NN estimate of ``KL(P || Q)`` from samples.

    ``(d/n) sum_i log(nu_k(i) / rho_k(i)) + log(m / (n - 1))`` where ``rho_k``
    is the distance from ``P_i`` to its k-th neighbour in ``P`` without
    itself and ``nu_k`` the distance to its k-th neighbour in ``Q``.
    """
    P, Q = _as_array(p), _as_array(q)
    n, d = P.shape
    m, dq = Q.shape
    if d != dq:
        raise ValueError(f"dimension mismatch: {d} vs {dq}")
    if n < k + 1 or m < k:
        raise ValueError(f"need n >= k+1 and m >= k, got n={n}, m={m}, k={k}")
    rho = cKDTree(P).query(P, k=k + 1)[0][:, k]
    nu = cKDTree(Q).query(P, k=k)[0]
    nu = nu[:, k - 1] if k > 1 else nu.reshape(-1)
    rho = np.maximum(rho, _DIST_FLOOR)
    nu = np.maximum(nu, _DIST_FLOOR)
    return float(d / n * np.sum(np.log(nu / rho)) + math.log(m / (n - 1)))


def knowledge_removal_estimator(processed: Sequence, retrained: Sequence, k: int = 1) -> float:
    """Average k-NN KL over seed-paired (processed, retrained) sample sets."""
    if len(processed) != len(retrained):
        raise ValueError("processed and retrained lists must pair up")
    if not processed:
        raise ValueError("need at least one pair")
    return float(np.mean([knn_kl(a, b, k) for a, b in zip(processed, retrained)]))


def predictive(model, samples, x) -> np.ndarray:
    """Bayesian predictive: class confidences averaged over posterior samples."""
    thetas = _as_array(samples)
    out = np.zeros((x.shape[0], model.n_classes))
    for theta in thetas:
        out += model.predict(theta, x)
    return out / len(thetas)


def classification_error(model, samples, x, y) -> float:
    if y is None:
        raise ValueError("classification error needs labels")
    if len(y) == 0:
        raise ValueError("empty evaluation set")
    pred = np.argmax(predictive(model, samples, x), axis=1)
    return float(np.mean(pred != y))


def true_label_confidence(model, samples, x, y) -> np.ndarray:
    if y is None:
        raise ValueError("labels required")
    return predictive(model, samples, x)[np.arange(len(y)), y]


def mia_accuracy_at(rho, conf_members, conf_nonmembers) -> float:
    return 0.5 * (float(np.mean(conf_members >= rho)) + float(np.mean(conf_nonmembers < rho)))


def best_threshold(conf_members, conf_nonmembers):
    """Smallest threshold maximising the balanced attack accuracy.

    Candidates are every observed confidence, 0 and the next float above 1.
    Returns ``(rho, accuracy)``.
    """
    conf_members = np.asarray(conf_members, dtype=np.float64)
    conf_nonmembers = np.asarray(conf_nonmembers, dtype=np.float64)
    if conf_members.size == 0 or conf_nonmembers.size == 0:
        raise ValueError("both sets must be nonempty")
    cands = np.unique(np.concatenate(
        [conf_members, conf_nonmembers, [0.0, np.nextafter(1.0, 2.0)]]
    ))
    # accuracy at every candidate via sorted counts
    a = np.sort(conf_members)
    b = np.sort(conf_nonmembers)
    frac_a_ge = (a.size - np.searchsorted(a, cands, side="left")) / a.size
    frac_b_lt = np.searchsorted(b, cands, side="left") / b.size
    acc = 0.5 * (frac_a_ge + frac_b_lt)
    i = int(np.argmax(acc))  # first maximum = smallest rho
    return float(cands[i]), float(acc[i])


def mia_threshold(model, samples, remaining, test) -> float:
    """Optimal confidence threshold learned on members ``remaining`` vs ``test``.

    ``remaining`` and ``test`` are ``(x, y)`` pairs.
    """
    conf_r = true_label_confidence(model, samples, *remaining)
    conf_t = true_label_confidence(model, samples, *test)
    return best_threshold(conf_r, conf_t)[0]


def mia_accuracy(model, samples, rho, removed) -> float:
    """Fraction of ``removed`` examples the attack flags as members."""
    x, y = removed
    if len(x) == 0:
        raise ValueError("empty removed set")
    return float(np.mean(true_label_confidence(model, samples, x, y) >= rho))


def prediction_difference(model, samples_a, samples_b, x) -> float:
    """Mean over sample pairs and examples of the l1 gap between predictions."""
    A, B = _as_array(samples_a), _as_array(samples_b)
    pa = [model.predict(t, x) for t in A]
    pb = [model.predict(t, x) for t in B]
    per_pair = [np.abs(fa - fb).sum(axis=1).mean() for fa in pa for fb in pb]
    # fsum is order independent, so pd(A, B) == pd(B, A) exactly
    return math.fsum(per_pair) / len(per_pair)


def timed(fn, *args, **kwargs):
    """Run ``fn`` and return ``(result, wall_clock_seconds)``."""
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0


@dataclass
class EvalReport:
    """One row of the comparison table.

    Columns run error, removal estimate, attack accuracy, prediction gap, time. Classification fields
    are ``None`` for unlabeled models, printed as ``na``.
    """

    method: str
    err_remaining: Optional[float] = None
    err_removed: Optional[float] = None
    err_test: Optional[float] = None
    eps_hat: Optional[float] = None
    mia_acc: Optional[float] = None
    pred_diff_remaining: Optional[float] = None
    pred_diff_removed: Optional[float] = None
    pred_diff_test: Optional[float] = None
    unlearn_seconds: Optional[float] = None
    retrain_seconds: Optional[float] = None

    @classmethod
    def columns(cls):
        return [f.name for f in fields(cls)]

    def _fmt(self, value):
        if value is None:
            return "na"
        if isinstance(value, str):
            return value
        return f"{value:.6f}"

    def to_text(self) -> str:
        return "\n".join(f"{k}={self._fmt(v)}" for k, v in asdict(self).items()) + "\n"

    def to_csv_row(self) -> str:
        return ",".join(self._fmt(v) for v in asdict(self).values())

    @classmethod
    def csv_header(cls) -> str:
        return ",".join(cls.columns())

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        kv = dict(line.split("=", 1) for line in text.splitlines() if line.strip())
        out = {}
        for name in cls.columns():
            raw = kv[name]
            out[name] = raw if name == "method" else (None if raw == "na" else float(raw))
        return cls(**out)


def reports_to_csv(reports: Sequence[EvalReport]) -> str:
    return "\n".join([EvalReport.csv_header()] + [r.to_csv_row() for r in reports]) + "\n"
