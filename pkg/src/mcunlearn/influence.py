"""MCMC influence function: Monte-Carlo expectations plus a LiSSA inverse-HVP."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .diffmodel import BayesModel, LabeledDataset
from .samplers import SampleSet

log = logging.getLogger(__name__)


class LissaDivergenceError(ArithmeticError):
    """The Neumann recursion is blowing up; the scale ``c`` is too large."""


class SingularHessianError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class InfluenceConfig:
    """Settings for one influence computation.

    ``lissa_scale`` is the numerator of the LiSSA scale: the recursion uses
    ``c = lissa_scale / N'`` with ``N'`` the current number of remaining
    examples. Pass ``scale_abs`` to use a fixed ``c`` instead.
    """

    lissa_depth: int = 32
    lissa_scale: float = 1.0
    mc_draws: int = 5
    hessian_batch: Optional[int] = None
    scale_abs: Optional[float] = None

    def __post_init__(self):
        if self.lissa_depth < 1:
            raise ValueError("lissa_depth must be >= 1")
        if self.mc_draws < 1:
            raise ValueError("mc_draws must be >= 1")
        if not self.lissa_scale > 0:
            raise ValueError("lissa_scale must be > 0")
        if self.hessian_batch is not None and self.hessian_batch < 1:
            raise ValueError("hessian_batch must be >= 1")

    def scale_for(self, n_remaining: int) -> float:
        if self.scale_abs is not None:
            return self.scale_abs
        return self.lissa_scale / n_remaining


GMM_INFLUENCE = InfluenceConfig(lissa_depth=32, lissa_scale=1.0, mc_draws=5)
MLP_INFLUENCE = InfluenceConfig(lissa_depth=64, lissa_scale=0.05, mc_draws=1)


def mc_expected_grad(model: BayesModel, samples: SampleSet, x, y=None, mc_draws: int = 5):
    """Average of ``grad log p(z | theta)`` over the last ``mc_draws`` samples.

    ``x`` may hold several examples; their expected gradients are summed.
    """
    x = np.atleast_2d(x)
    thetas = samples.tail(mc_draws)
    total = np.zeros(samples.dim)
    for theta in thetas:
        total += model.sum_grad_log_lik(theta, x, y)
    return total / len(thetas)


def _hessian_batch(data: LabeledDataset, hessian_batch, rng):
    x, y = data.arrays()
    if hessian_batch is None or hessian_batch >= x.shape[0]:
        return x, y
    idx = rng.choice(x.shape[0], size=hessian_batch, replace=False)
    return x[idx], None if y is None else y[idx]


def mc_expected_joint_hvp(model, samples: SampleSet, v, data: LabeledDataset, mc_draws=5,
                          hessian_batch=None, rng=None):
    """Posterior-averaged Hessian of ``log p(theta, S)`` times ``v``."""
    n = data.n_remaining
    x, y = _hessian_batch(data, hessian_batch, rng)
    thetas = samples.tail(mc_draws)
    total = np.zeros(samples.dim)
    for theta in thetas:
        total += model.joint_hvp(theta, v, x, y, n)
    return total / len(thetas)


def lissa_inverse_hvp(hvp: Callable[[np.ndarray], np.ndarray], v: np.ndarray, depth: int,
                      scale: float, blowup: float = 10.0) -> np.ndarray:
    """Estimate ``H^{-1} v`` by the truncated series ``c * sum_i (I - cH)^i v``.

    Uses the recursion ``u_0 = v``, ``u_k = v + (I - cH) u_{k-1}`` and returns
    ``c * u_depth``. Requires the spectrum of ``cH`` inside ``(0, 2)``.

    The partial sums may legitimately grow to ``||v|| / (c * lambda_min)``, so
    divergence is judged on the series term ``u_k - u_{k-1} = (I - cH)^k v``,
    whose norm never exceeds ``||v||`` when the spectrum condition holds.

    Raises:
        LissaDivergenceError: if a series term exceeds ``blowup * ||v||``.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    v = np.asarray(v, dtype=np.float64)
    vnorm = np.linalg.norm(v)
    if vnorm == 0.0:
        return np.zeros_like(v)
    u = v.copy()
    for k in range(1, depth + 1):
        new = v + u - scale * hvp(u)
        growth = np.linalg.norm(new - u) / vnorm
        if not np.isfinite(growth) or growth > blowup:
            raise LissaDivergenceError(
                f"LiSSA series term grew to {growth:.3g} x ||v|| at step {k}; "
                f"use a smaller scale"
            )
        u = new
    return scale * u


def dense_hessian(model, samples: SampleSet, data: LabeledDataset, mc_draws=5, max_dim=64):
    """Materialise ``-E Hess log p(theta, S)`` column by column."""
    d = samples.dim
    if d > max_dim:
        raise ValueError(f"dense Hessian refused for dim {d} > {max_dim}")
    eye = np.eye(d)
    cols = [-mc_expected_joint_hvp(model, samples, eye[i], data, mc_draws) for i in range(d)]
    return np.column_stack(cols)


def dense_inverse_hvp_oracle(model, samples: SampleSet, data: LabeledDataset, v, mc_draws=5,
                             max_dim=64):
    """Direct solve of ``(-E Hess log p(theta, S)) u = v``; test oracle."""
    H = dense_hessian(model, samples, data, mc_draws, max_dim)
    H = 0.5 * (H + H.T)
    if np.linalg.cond(H) > 1e12:
        raise SingularHessianError("averaged Hessian is numerically singular")
    return np.linalg.solve(H, v)


def power_iteration_scale(hvp, dim, iters=20, rng=None, safety=1.05):
    """``1 / (safety * lambda_max)`` with ``lambda_max`` from power iteration."""
    rng = np.random.default_rng(0) if rng is None else rng
    u = rng.standard_normal(dim)
    u /= np.linalg.norm(u)
    lam = 0.0
    for _ in range(iters):
        w = hvp(u)
        lam = np.linalg.norm(w)
        if lam == 0.0:
            raise SingularHessianError("Hessian-vector product vanished")
        u = w / lam
    return 1.0 / (safety * lam)


def influence_fn(model: BayesModel, samples: SampleSet, data: LabeledDataset, removal_ids,
                 config: InfluenceConfig = GMM_INFLUENCE, rng=None) -> np.ndarray:
    """Influence ``I(S')`` of the examples ``removal_ids`` on the sampled posterior.

    ``I = -(E Hess log p(theta, S))^{-1} sum_{z in S'} E grad log p(z | theta)``,
    with expectations over the tail of ``samples`` and ``S`` the remaining
    examples of ``data`` (``S'`` included). Unlearning subtracts ``I`` from
    every sample.
    """
    removal_ids = np.asarray(list(removal_ids), dtype=np.int64)
    if removal_ids.size == 0:
        return np.zeros(samples.dim)
    pos = data.positions(removal_ids)
    if np.any(data.removed[pos]):
        raise ValueError("cannot remove examples that are already removed")
    if data.n_remaining - removal_ids.size < 1:
        raise ValueError("removal would leave no data")
    x_rm, y_rm = data.arrays(removal_ids)
    g = mc_expected_grad(model, samples, x_rm, y_rm, config.mc_draws)

    n = data.n_remaining
    if config.hessian_batch is None:
        x, y = data.arrays()
        ops = [model.joint_hvp_operator(t, x, y, n) for t in samples.tail(config.mc_draws)]

        def neg_hvp(u):
            total = np.zeros_like(u)
            for op in ops:
                total += op(u)
            return -total / len(ops)
    else:
        rng = np.random.default_rng(0) if rng is None else rng

        def neg_hvp(u):
            return -mc_expected_joint_hvp(
                model, samples, u, data, config.mc_draws, config.hessian_batch, rng
            )

    # the negated Hessian is positive near a mode, which LiSSA needs
    return lissa_inverse_hvp(neg_hvp, g, config.lissa_depth, config.scale_for(n))
