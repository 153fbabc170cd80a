"""SGLD / SGHMC chains with a polynomial step-size schedule and noise-free warmup."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .diffmodel import BayesModel, DivergenceError, LabeledDataset, stochastic_grad_potential

SQRT2 = math.sqrt(2.0)
_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_seed(seed: int, index: int) -> int:
    """Seed of stream ``index`` under ``seed``: ``splitmix64(splitmix64(seed) ^ index)``."""
    return splitmix64(splitmix64(int(seed) & _MASK64) ^ (int(index) & _MASK64))


def make_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, index)))


# stream indices under a chain seed
_INIT_STREAM, _BATCH_STREAM, _NOISE_STREAM = 0, 1, 2


@dataclass(frozen=True)
class StepSchedule:
    """``eta_t = a * (b + t) ** (-r)``."""

    a: float
    b: float = 0.0
    r: float = 0.5005

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError(f"schedule a must be > 0, got {self.a}")
        if not self.b >= 0:
            raise ValueError(f"schedule b must be >= 0, got {self.b}")
        if not 0.5 < self.r <= 1.0:
            raise ValueError(f"schedule r must lie in (0.5, 1], got {self.r}")


def schedule_eval(schedule: StepSchedule, t: int, rate_divisor: float = 1.0) -> float:
    if t < 1:
        raise ValueError("schedule index starts at 1")
    return schedule.a * (schedule.b + t) ** (-schedule.r) / rate_divisor


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "sgld"
    schedule: StepSchedule = field(default_factory=lambda: StepSchedule(4.0, 0.0, 0.5005))
    rate_divisor: float = 1.0
    batch_size: int = 64
    total_iters: int = 4000
    warmup_iters: int = 0
    # divided by rate_divisor, like the schedule
    warmup_rate: float = 0.0
    momentum_alpha: float = 0.9
    noise_coeff: float = SQRT2
    thinning: int = 10
    keep_last: int = 100

    def __post_init__(self):
        if self.kind not in ("sgld", "sghmc"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if not self.rate_divisor > 0:
            raise ValueError("rate_divisor must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.warmup_iters <= self.total_iters:
            raise ValueError("need 0 <= warmup_iters <= total_iters")
        if self.warmup_iters and not self.warmup_rate > 0:
            raise ValueError("warmup_rate must be > 0 when warmup_iters > 0")
        if self.kind == "sghmc" and not 0 < self.momentum_alpha < 1:
            raise ValueError("momentum_alpha must lie in (0, 1)")
        if self.thinning < 1:
            raise ValueError("thinning must be >= 1")
        if not 1 <= self.keep_last <= (self.total_iters - self.warmup_iters) // self.thinning:
            raise ValueError(
                f"keep_last={self.keep_last} needs 1 <= keep_last <= "
                f"(total_iters - warmup_iters) // thinning"
            )


@dataclass(frozen=True)
class SampleSet:
    """Posterior draws from one chain.

    ``draws`` is the raw chain output; ``offset`` is the cumulative shift
    subtracted by unlearning, so ``samples = draws - offset``. Keeping the two
    apart makes a shift followed by its negation restore ``samples`` exactly.
    """

    draws: np.ndarray
    model_id: str = ""
    seed: int = 0
    iters_run: int = 0
    dataset_fingerprint: int = 0
    offset: Optional[np.ndarray] = None
    shift_count: int = 0

    def __post_init__(self):
        draws = np.asarray(self.draws, dtype=np.float64)
        if draws.ndim != 2 or draws.shape[0] == 0:
            raise ValueError("a SampleSet needs a nonempty (count, dim) array")
        object.__setattr__(self, "draws", draws)

    @property
    def samples(self) -> np.ndarray:
        if self.offset is None:
            return self.draws
        return self.draws - self.offset

    @property
    def dim(self) -> int:
        return self.draws.shape[1]

    def __len__(self):
        return self.draws.shape[0]

    def tail(self, count: int) -> np.ndarray:
        if not 1 <= count <= len(self):
            raise ValueError(f"cannot take {count} of {len(self)} samples")
        return self.samples[-count:]

    def with_draws(self, draws, **meta) -> "SampleSet":
        return replace(self, draws=draws, offset=None, shift_count=0, **meta)


def _check_finite(theta, iteration, last):
    if not np.all(np.isfinite(theta)):
        raise DivergenceError(
            f"chain diverged at iteration {iteration}", iteration=iteration, last_finite=last
        )


def sgld_step(model, theta, x, y, total_n, eta, noise_coeff, rng):
    """One Langevin step: ``theta - eta * grad U~ + noise_coeff * sqrt(eta) * W``."""
    if not eta > 0:
        raise ValueError("step size must be > 0")
    g = stochastic_grad_potential(model, theta, x, y, total_n)
    new = theta - eta * g
    if noise_coeff:
        new = new + noise_coeff * math.sqrt(eta) * rng.standard_normal(theta.shape)
    _check_finite(new, None, theta)
    return new


def sghmc_step(model, theta, v, x, y, total_n, eta, alpha, rng, noise=True):
    """One SGHMC step; the position moves with the incoming momentum."""
    if not eta > 0:
        raise ValueError("step size must be > 0")
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    g = stochastic_grad_potential(model, theta, x, y, total_n)
    new_theta = theta + v
    new_v = (1.0 - alpha) * v - eta * g
    if noise:
        new_v = new_v + math.sqrt(2.0 * alpha * eta) * rng.standard_normal(theta.shape)
    _check_finite(new_theta, None, theta)
    _check_finite(new_v, None, theta)
    return new_theta, new_v


def _sample_loop(model, data, config, seed, theta, warmup, noisy, t_start, progress=None):
    x_all, y_all = data.arrays()
    n = x_all.shape[0]
    if n < 1:
        raise ValueError("sampling needs at least one remaining example")
    b = min(config.batch_size, n)
    batch_rng = make_rng(seed, _BATCH_STREAM)
    noise_rng = make_rng(seed, _NOISE_STREAM)
    sghmc = config.kind == "sghmc"
    kept = []
    v = None
    if sghmc:
        eta0 = config.warmup_rate / config.rate_divisor if warmup else schedule_eval(
            config.schedule, t_start, config.rate_divisor
        )
        v = math.sqrt(eta0) * noise_rng.standard_normal(theta.shape)

    total = warmup + noisy
    for it in range(total):
        in_warmup = it < warmup
        if in_warmup:
            eta = config.warmup_rate / config.rate_divisor
        else:
            eta = schedule_eval(config.schedule, t_start + it - warmup, config.rate_divisor)
        if b == n:
            xb, yb = x_all, y_all
        else:
            idx = batch_rng.choice(n, size=b, replace=False)
            xb = x_all[idx]
            yb = None if y_all is None else y_all[idx]
        try:
            if sghmc:
                theta, v = sghmc_step(
                    model, theta, v, xb, yb, n, eta, config.momentum_alpha, noise_rng,
                    noise=not in_warmup,
                )
            else:
                coeff = 0.0 if in_warmup else config.noise_coeff
                theta = sgld_step(model, theta, xb, yb, n, eta, coeff, noise_rng)
        except DivergenceError as exc:
            raise DivergenceError(
                f"chain diverged at iteration {it + 1}", iteration=it + 1,
                last_finite=exc.last_finite,
            ) from None
        if not in_warmup and (it - warmup + 1) % config.thinning == 0:
            kept.append(theta)
        if progress is not None:
            progress(it)
    return theta, kept


def run_chain(model: BayesModel, data: LabeledDataset, config: SamplerConfig, seed: int,
              init: Optional[np.ndarray] = None) -> SampleSet:
    """Warmup then scheduled noisy sampling on the remaining examples of ``data``.

    The initial point is drawn from the model's ``init_params`` with a stream
    that depends only on ``seed``, so two runs sharing a seed on different
    datasets start from the same parameters and inject the same noise.
    """
    if data.n_remaining < 1:
        raise ValueError("run_chain needs a nonempty dataset")
    if init is None:
        init = model.init_params(make_rng(seed, _INIT_STREAM))
    theta = np.array(init, dtype=np.float64)
    if theta.shape != (model.dim(),):
        raise ValueError(f"init has shape {theta.shape}, model dim is {model.dim()}")
    noisy = config.total_iters - config.warmup_iters
    _, kept = _sample_loop(model, data, config, seed, theta, config.warmup_iters, noisy, 1)
    draws = np.array(kept[-config.keep_last:])
    return SampleSet(
        draws, model_id=model.model_id, seed=int(seed), iters_run=config.total_iters,
        dataset_fingerprint=data.fingerprint(),
    )


def continue_chain(model, data, config: SamplerConfig, samples: SampleSet, extra_iters: int,
                   seed: int) -> SampleSet:
    """Run ``extra_iters`` more noisy steps from the last sample of ``samples``.

    The schedule clock resumes where the original chain stopped.
    """
    if extra_iters == 0:
        return samples
    if extra_iters < 0:
        raise ValueError("extra_iters must be >= 0")
    keep = min(config.keep_last, extra_iters // config.thinning)
    if keep < 1:
        raise ValueError("extra_iters too small to retain a sample at this thinning")
    t_start = max(samples.iters_run - config.warmup_iters, 0) + 1
    theta = samples.samples[-1].copy()
    _, kept = _sample_loop(model, data, config, seed, theta, 0, extra_iters, t_start)
    return SampleSet(
        np.array(kept[-keep:]), model_id=samples.model_id, seed=int(seed),
        iters_run=samples.iters_run + extra_iters, dataset_fingerprint=data.fingerprint(),
    )
