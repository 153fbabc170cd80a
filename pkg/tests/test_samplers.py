import numpy as np
import pytest

from mcunlearn.diffmodel import DivergenceError, LabeledDataset
from mcunlearn.models import GaussianMeanModel, GmmModel
from mcunlearn.samplers import (
    SampleSet,
    SamplerConfig,
    StepSchedule,
    continue_chain,
    derive_seed,
    run_chain,
    schedule_eval,
    sghmc_step,
    sgld_step,
    splitmix64,
)


def _data(x):
    x = np.asarray(x, dtype=float)
    return LabeledDataset(x, None, np.arange(x.shape[0]))


class TestSchedule:
    def test_default_gmm_rate(self):
        assert schedule_eval(StepSchedule(4.0, 0.0, 0.5005), 1, 2000) == pytest.approx(0.002)

    def test_harmonic(self):
        assert schedule_eval(StepSchedule(1.0, 0.0, 1.0), 10) == pytest.approx(0.1)

    def test_monotone(self):
        s = StepSchedule(4.0, 3.0, 0.7)
        etas = [schedule_eval(s, t) for t in range(1, 500)]
        assert all(b < a for a, b in zip(etas, etas[1:]))

    @pytest.mark.parametrize("r", [0.5, 0.2, 1.01, 2.0])
    def test_rejects_bad_exponent(self, r):
        with pytest.raises(ValueError):
            StepSchedule(1.0, 0.0, r)

    def test_rejects_t_zero(self):
        with pytest.raises(ValueError):
            schedule_eval(StepSchedule(1.0), 0)


class TestSteps:
    def test_sgld_noiseless_step(self):
        theta = sgld_step(GaussianMeanModel(1), np.zeros(1), np.array([[2.0]]), None, 1, 0.1, 0.0,
                          np.random.default_rng(0))
        np.testing.assert_allclose(theta, [0.2])

    def test_sgld_tiny_step_stays(self):
        theta = np.array([0.3, -0.4])
        out = sgld_step(GmmModel(1, 2), theta, np.ones((3, 2)), None, 3, 1e-14, 0.0,
                        np.random.default_rng(0))
        np.testing.assert_allclose(out, theta, atol=1e-12)

    def test_sghmc_fixed_point(self):
        m = GaussianMeanModel(1)
        # theta = 1 is the joint mode for data {2}: gradient (2 - 1) - 1 = 0
        theta, v = sghmc_step(m, np.ones(1), np.zeros(1), np.array([[2.0]]), None, 1, 0.1, 0.5,
                              np.random.default_rng(0), noise=False)
        np.testing.assert_array_equal(theta, [1.0])
        np.testing.assert_array_equal(v, [0.0])

    def test_sghmc_memoryless(self):
        m = GaussianMeanModel(1)
        theta, v = sghmc_step(m, np.zeros(1), np.array([5.0]), np.array([[2.0]]), None, 1, 0.1, 1.0,
                              np.random.default_rng(0), noise=False)
        np.testing.assert_allclose(theta, [5.0])
        np.testing.assert_allclose(v, [0.2])

    def test_nonfinite_step_raises(self):
        with pytest.raises(DivergenceError):
            sgld_step(GaussianMeanModel(1), np.zeros(1), np.array([[np.nan]]), None, 1, 0.1, 0.0,
                      np.random.default_rng(0))


class TestChains:
    def _cfg(self, **kw):
        base = dict(schedule=StepSchedule(1.0, 0.0, 0.55), rate_divisor=50, batch_size=10,
                    total_iters=400, thinning=2, keep_last=50)
        base.update(kw)
        return SamplerConfig(**base)

    def test_warmup_only_is_gradient_descent(self):
        m = GaussianMeanModel(2)
        x = np.random.default_rng(3).normal(1.0, 1.0, (20, 2))
        # an all-warmup chain keeps no samples, so the config rejects it
        with pytest.raises(ValueError):
            SamplerConfig(batch_size=20, total_iters=600, warmup_iters=600, warmup_rate=0.02,
                          thinning=1, keep_last=1)
        # one trailing noise-free step of negligible size so a sample is kept
        cfg = SamplerConfig(schedule=StepSchedule(1e-15), batch_size=20, total_iters=601,
                            warmup_iters=600, warmup_rate=0.02, thinning=1, keep_last=1,
                            noise_coeff=0.0)
        out = run_chain(m, _data(x), cfg, seed=0)
        mode = x.sum(0) / (20 + 1)
        np.testing.assert_allclose(out.samples[-1], mode, atol=1e-6)

    @pytest.mark.parametrize("kind", ["sgld", "sghmc"])
    def test_deterministic(self, kind):
        m = GmmModel(2, 2)
        data = _data(np.random.default_rng(1).standard_normal((40, 2)))
        a = run_chain(m, data, self._cfg(kind=kind), seed=11)
        b = run_chain(m, data, self._cfg(kind=kind), seed=11)
        np.testing.assert_array_equal(a.samples, b.samples)
        c = run_chain(m, data, self._cfg(kind=kind), seed=12)
        assert not np.array_equal(a.samples, c.samples)

    def test_keep_last_count(self):
        data = _data(np.zeros((30, 1)))
        cfg = self._cfg(total_iters=1000, thinning=10, keep_last=100)
        out = run_chain(GaussianMeanModel(1), data, cfg, seed=0)
        assert len(out) == 100
        assert out.iters_run == 1000
        assert out.dataset_fingerprint == data.fingerprint()

    def test_config_validation(self):
        with pytest.raises(ValueError):
            self._cfg(keep_last=201)
        with pytest.raises(ValueError):
            self._cfg(warmup_iters=500)
        with pytest.raises(ValueError):
            self._cfg(kind="sghmc", momentum_alpha=1.0)

    def test_divergence_reports_last_finite(self):
        cfg = self._cfg(schedule=StepSchedule(1e6, 0.0, 0.55), rate_divisor=1.0, batch_size=30)
        data = _data(np.random.default_rng(0).standard_normal((30, 1)) * 100)
        with pytest.raises(DivergenceError) as info:
            run_chain(GaussianMeanModel(1), data, cfg, seed=0)
        assert info.value.iteration is not None
        assert np.all(np.isfinite(info.value.last_finite))

    def test_continue_chain_zero_is_identity(self):
        data = _data(np.zeros((30, 1)))
        s = run_chain(GaussianMeanModel(1), data, self._cfg(), seed=0)
        assert continue_chain(GaussianMeanModel(1), data, self._cfg(), s, 0, 5) is s

    def test_continue_chain_deterministic(self):
        data = _data(np.random.default_rng(2).standard_normal((30, 1)))
        s = run_chain(GaussianMeanModel(1), data, self._cfg(), seed=0)
        a = continue_chain(GaussianMeanModel(1), data, self._cfg(), s, 100, 5)
        b = continue_chain(GaussianMeanModel(1), data, self._cfg(), s, 100, 5)
        np.testing.assert_array_equal(a.samples, b.samples)
        assert a.iters_run == s.iters_run + 100


class TestSeeds:
    def test_splitmix_reference(self):
        # first output of the reference splitmix64 generator seeded with 0
        assert splitmix64(0) == 0xE220A8397B1DCDAF

    def test_streams_differ(self):
        seeds = {derive_seed(7, i) for i in range(100)}
        assert len(seeds) == 100
        assert derive_seed(7, 0) != derive_seed(8, 0)


def test_sample_set_offset_view():
    s = SampleSet(np.arange(6.0).reshape(3, 2), offset=np.array([1.0, 2.0]))
    np.testing.assert_array_equal(s.samples, [[-1, -1], [1, 1], [3, 3]])
    np.testing.assert_array_equal(s.tail(1), [[3, 3]])
    with pytest.raises(ValueError):
        s.tail(4)
