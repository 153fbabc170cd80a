"""Shift-based unlearning of stored posterior samples, batch by batch."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .influence import GMM_INFLUENCE, InfluenceConfig, influence_fn
from .samplers import SampleSet, SamplerConfig, continue_chain, derive_seed

log = logging.getLogger(__name__)


class UnlearningError(RuntimeError):
    """A batch failed; ``samples`` and ``data`` hold the state after the last good batch."""

    def __init__(self, message, samples, data, batch_index, batch_ids):
        super().__init__(message)
        self.samples = samples
        self.data = data
        self.batch_index = batch_index
        self.batch_ids = batch_ids


@dataclass(frozen=True)
class UnlearnPlan:
    removal_ids: Sequence[int]
    batch_size: int = 4
    influence: InfluenceConfig = field(default_factory=lambda: GMM_INFLUENCE)

    def __post_init__(self):
        ids = tuple(int(i) for i in self.removal_ids)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if len(set(ids)) != len(ids):
            raise ValueError("removal ids must be distinct")
        object.__setattr__(self, "removal_ids", ids)

    def batches(self):
        ids = self.removal_ids
        return [ids[i:i + self.batch_size] for i in range(0, len(ids), self.batch_size)]

    def validate(self, data):
        if not self.removal_ids:
            return
        pos = data.positions(self.removal_ids)
        if np.any(data.removed[pos]):
            raise ValueError("plan removes ids that are already removed")
        if data.n_remaining - len(self.removal_ids) < 1:
            raise ValueError("plan would remove every example")


def apply_removal(samples: SampleSet, shift: np.ndarray) -> SampleSet:
    """Subtract ``shift`` from every sample (recorded in the set's offset)."""
    shift = np.asarray(shift, dtype=np.float64)
    if shift.shape != (samples.dim,):
        raise ValueError(f"shift has shape {shift.shape}, samples have dim {samples.dim}")
    offset = shift.copy() if samples.offset is None else samples.offset + shift
    return replace(samples, offset=offset, shift_count=samples.shift_count + 1)


def unlearn_batches(model, samples: SampleSet, data, plan: UnlearnPlan, rng=None,
                    on_batch=None):
    """Remove ``plan.removal_ids`` batch by batch.

    Each batch's influence is taken against the data still remaining at that
    point (so ``N'`` shrinks) and over the already shifted samples.

    Returns:
        ``(samples, data)`` after every batch is removed.
    """
    plan.validate(data)
    for k, batch in enumerate(plan.batches()):
        try:
            shift = influence_fn(model, samples, data, batch, plan.influence, rng)
        except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
            raise UnlearningError(
                f"unlearning batch {k} (ids {list(batch)[:4]}...) failed: {exc}",
                samples, data, k, batch,
            ) from exc
        samples = apply_removal(samples, shift)
        data = data.mark_removed(batch)
        if on_batch is not None:
            on_batch(k, samples, data)
    return samples, data


def importance_sampling_baseline(model, data_after_removal, config: SamplerConfig,
                                 samples: SampleSet, extra_iters: int = 1000,
                                 seed: Optional[int] = None) -> SampleSet:
    """Keep sampling on the remaining data, starting from the last stored sample."""
    if data_after_removal.n_remaining < 1:
        raise ValueError("no remaining data")
    if seed is None:
        seed = derive_seed(samples.seed, samples.iters_run)
    return continue_chain(model, data_after_removal, config, samples, extra_iters, seed)


def importance_unlearn_batches(model, samples, data, plan: UnlearnPlan, config: SamplerConfig,
                               extra_iters: int = 1000, seed: int = 0):
    """Baseline counterpart of :func:`unlearn_batches`: one continuation per request."""
    plan.validate(data)
    for k, batch in enumerate(plan.batches()):
        data = data.mark_removed(batch)
        samples = importance_sampling_baseline(
            model, data, config, samples, extra_iters, derive_seed(seed, k)
        )
    return samples, data
