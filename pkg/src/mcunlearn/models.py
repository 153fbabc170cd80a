"""Shipped models: conjugate Gaussian mean, Gaussian mixture, ReLU classifier."""
from __future__ import annotations

import math

import numpy as np
from scipy.special import log_softmax, logsumexp, softmax

from .diffmodel import BayesModel

_LOG_2PI = math.log(2.0 * math.pi)


class _IsotropicPrior:
    """Mixin for an ``N(0, prior_std^2 I)`` prior over the whole of ``theta``."""

    prior_std: float

    def log_prior(self, theta):
        d = theta.size
        s2 = self.prior_std**2
        return float(-0.5 * theta @ theta / s2 - 0.5 * d * (_LOG_2PI + math.log(s2)))

    def grad_log_prior(self, theta):
        return -theta / self.prior_std**2

    def hvp_log_prior(self, theta, v):
        return -v / self.prior_std**2


class GaussianMeanModel(_IsotropicPrior, BayesModel):
    """Unknown mean of an isotropic Gaussian with known noise level.

    ``theta ~ N(0, prior_std^2 I)`` and ``z | theta ~ N(theta, lik_std^2 I)``.
    The posterior is Gaussian in closed form (see :func:`gaussian_closed_posterior`),
    which makes this model the reference oracle for the samplers and the
    influence computation.
    """

    model_id = "gaussian"

    def __init__(self, d: int = 1, prior_std: float = 1.0, lik_std: float = 1.0):
        if prior_std <= 0 or lik_std <= 0:
            raise ValueError("standard deviations must be positive")
        self.d = int(d)
        self.prior_std = float(prior_std)
        self.lik_std = float(lik_std)

    def dim(self):
        return self.d

    def log_lik(self, theta, x, y=None):
        s2 = self.lik_std**2
        r = x - theta
        return -0.5 * np.einsum("ij,ij->i", r, r) / s2 - 0.5 * self.d * (_LOG_2PI + math.log(s2))

    def grad_log_lik(self, theta, x, y=None):
        return (x - theta) / self.lik_std**2

    def sum_grad_log_lik(self, theta, x, y=None):
        return (x.sum(axis=0) - x.shape[0] * theta) / self.lik_std**2

    def hvp_log_lik(self, theta, v, x, y=None):
        return -x.shape[0] * v / self.lik_std**2

    def init_params(self, rng):
        return np.zeros(self.d)


def gaussian_closed_posterior(model: GaussianMeanModel, x: np.ndarray):
    """Exact posterior ``(mean, variance)`` of a :class:`GaussianMeanModel`.

    The posterior covariance is ``variance * I``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    if n == 0:
        raise ValueError("closed-form posterior needs data")
    precision = n / model.lik_std**2 + 1.0 / model.prior_std**2
    mean = (x.sum(axis=0) / model.lik_std**2) / precision
    return mean, 1.0 / precision


class GmmModel(_IsotropicPrior, BayesModel):
    """Equal-weight mixture of unit-variance Gaussians; infers the centers.

    ``theta`` packs the centers row by row: ``theta.reshape(K, d)[k]`` is
    ``mu_k``. Cluster assignments are marginalised out, so the likelihood is
    ``p(z | theta) = (1/K) sum_k N(z; mu_k, I)``. Labels are ignored.
    """

    model_id = "gmm"

    def __init__(self, K: int = 4, d: int = 2, prior_std: float = 1.0):
        if K < 1 or d < 1:
            raise ValueError("K and d must be positive")
        self.K = int(K)
        self.d = int(d)
        self.prior_std = float(prior_std)

    def dim(self):
        return self.K * self.d

    def _log_terms(self, theta, x):
        mu = theta.reshape(self.K, self.d)
        diff = x[:, None, :] - mu[None, :, :]  # (n, K, d)
        logits = -0.5 * np.einsum("nkd,nkd->nk", diff, diff)
        return diff, logits

    def responsibilities(self, theta, x):
        _, logits = self._log_terms(theta, x)
        return softmax(logits, axis=1)

    def log_lik(self, theta, x, y=None):
        _, logits = self._log_terms(theta, x)
        return logsumexp(logits, axis=1) - math.log(self.K) - 0.5 * self.d * _LOG_2PI

    def grad_log_lik(self, theta, x, y=None):
        diff, logits = self._log_terms(theta, x)
        r = softmax(logits, axis=1)
        return (r[:, :, None] * diff).reshape(x.shape[0], -1)

    def sum_grad_log_lik(self, theta, x, y=None):
        diff, logits = self._log_terms(theta, x)
        r = softmax(logits, axis=1)
        return np.einsum("nk,nkd->kd", r, diff).ravel()

    def _lik_hvp_closure(self, theta, x):
        # block k of H v: r_k (z - mu_k) (e_k - sum_j r_j e_j) - r_k v_k,
        # where e_k = (z - mu_k) . v_k
        diff, logits = self._log_terms(theta, x)
        r = softmax(logits, axis=1)
        rsum = r.sum(axis=0)[:, None]

        def hvp(v):
            vk = v.reshape(self.K, self.d)
            e = np.einsum("nkd,kd->nk", diff, vk)
            ebar = np.einsum("nk,nk->n", r, e)
            w = r * (e - ebar[:, None])
            return (np.einsum("nk,nkd->kd", w, diff) - rsum * vk).ravel()

        return hvp

    def hvp_log_lik(self, theta, v, x, y=None):
        return self._lik_hvp_closure(theta, x)(v)

    def joint_hvp_operator(self, theta, x, y, total_n):
        lik = self._lik_hvp_closure(theta, x)
        scale = total_n / x.shape[0]
        prior_prec = 1.0 / self.prior_std**2
        return lambda v: scale * lik(v) - prior_prec * v

    def init_params(self, rng):
        return rng.normal(0.0, self.prior_std, size=self.dim())


class MlpClassifier(_IsotropicPrior, BayesModel):
    """Fully connected ReLU network with a softmax output layer.

    Parameter layout: for each layer in order, the weight matrix of shape
    ``(fan_in, fan_out)`` flattened row-major, followed by its bias vector.
    ``log_lik(theta, (x, y)) = log softmax(f(x))[y]``.

    The ReLU second derivative is taken as zero everywhere, so the
    Hessian-vector product is exact wherever no pre-activation sits on the kink.
    """

    model_id = "mlp"
    is_classifier = True

    def __init__(self, widths=(16, 32, 4), prior_std: float = 0.1):
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"bad layer widths {widths}")
        self.widths = widths
        self.prior_std = float(prior_std)
        self._slices = []
        offset = 0
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            w = slice(offset, offset + fan_in * fan_out)
            offset += fan_in * fan_out
            b = slice(offset, offset + fan_out)
            offset += fan_out
            self._slices.append((w, b, fan_in, fan_out))
        self._dim = offset

    @property
    def n_classes(self):
        return self.widths[-1]

    def dim(self):
        return self._dim

    def unpack(self, theta):
        return [
            (theta[w].reshape(fi, fo), theta[b]) for w, b, fi, fo in self._slices
        ]

    def pack(self, layers):
        out = np.empty(self._dim)
        for (w, b, fi, fo), (W, c) in zip(self._slices, layers):
            out[w] = np.asarray(W).ravel()
            out[b] = c
        return out

    def _forward(self, layers, x):
        acts = [x]
        pre = []
        a = x
        for i, (W, b) in enumerate(layers):
            z = a @ W + b
            pre.append(z)
            a = np.maximum(z, 0.0) if i < len(layers) - 1 else z
            acts.append(a)
        return acts, pre

    def logits(self, theta, x):
        acts, _ = self._forward(self.unpack(theta), x)
        return acts[-1]

    def predict(self, theta, x):
        return softmax(self.logits(theta, x), axis=1)

    def log_lik(self, theta, x, y=None):
        lp = log_softmax(self.logits(theta, x), axis=1)
        return lp[np.arange(x.shape[0]), y]

    def _output_delta(self, logits, y):
        p = softmax(logits, axis=1)
        delta = -p
        delta[np.arange(y.size), y] += 1.0
        return p, delta

    def grad_log_lik(self, theta, x, y=None):
        layers = self.unpack(theta)
        acts, pre = self._forward(layers, x)
        _, delta = self._output_delta(acts[-1], y)
        n = x.shape[0]
        out = np.empty((n, self._dim))
        for i in range(len(layers) - 1, -1, -1):
            w, b, fi, fo = self._slices[i]
            out[:, w] = (acts[i][:, :, None] * delta[:, None, :]).reshape(n, -1)
            out[:, b] = delta
            if i:
                delta = (delta @ layers[i][0].T) * (pre[i - 1] > 0)
        return out

    def sum_grad_log_lik(self, theta, x, y=None):
        layers = self.unpack(theta)
        acts, pre = self._forward(layers, x)
        _, delta = self._output_delta(acts[-1], y)
        grads = [None] * len(layers)
        for i in range(len(layers) - 1, -1, -1):
            grads[i] = (acts[i].T @ delta, delta.sum(axis=0))
            if i:
                delta = (delta @ layers[i][0].T) * (pre[i - 1] > 0)
        return self.pack(grads)

    def _lik_hvp_closure(self, theta, x, y):
        # forward-mode (R-operator) pass over the backward pass
        layers = self.unpack(theta)
        acts, pre = self._forward(layers, x)
        masks = [z > 0 for z in pre[:-1]]
        p, delta_out = self._output_delta(acts[-1], y)
        n_layers = len(layers)

        def hvp(v):
            dirs = self.unpack(v)
            r_acts = [np.zeros_like(x)]
            r_z = None
            for i, ((W, _), (VW, Vb)) in enumerate(zip(layers, dirs)):
                r_z = r_acts[-1] @ W + acts[i] @ VW + Vb
                r_acts.append(r_z * masks[i] if i < n_layers - 1 else r_z)

            r_delta = -(p * r_z - p * np.einsum("nc,nc->n", p, r_z)[:, None])
            delta = delta_out
            out = [None] * n_layers
            for i in range(n_layers - 1, -1, -1):
                out[i] = (r_acts[i].T @ delta + acts[i].T @ r_delta, r_delta.sum(axis=0))
                if i:
                    W, VW = layers[i][0], dirs[i][0]
                    r_delta = (r_delta @ W.T + delta @ VW.T) * masks[i - 1]
                    delta = (delta @ W.T) * masks[i - 1]
            return self.pack(out)

        return hvp

    def hvp_log_lik(self, theta, v, x, y=None):
        return self._lik_hvp_closure(theta, x, y)(v)

    def joint_hvp_operator(self, theta, x, y, total_n):
        lik = self._lik_hvp_closure(theta, x, y)
        scale = total_n / x.shape[0]
        prior_prec = 1.0 / self.prior_std**2
        return lambda v: scale * lik(v) - prior_prec * v

    def min_abs_preactivation(self, theta, x):
        """Smallest |hidden pre-activation|; HVP checks are meaningful away from 0."""
        _, pre = self._forward(self.unpack(theta), x)
        if len(pre) < 2:
            return np.inf
        return min(float(np.abs(z).min()) for z in pre[:-1])

    def init_params(self, rng):
        return rng.normal(0.0, self.prior_std, size=self._dim)
