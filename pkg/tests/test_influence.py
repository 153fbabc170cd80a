import numpy as np
import pytest

from mcunlearn.datasets import gen_clusters
from mcunlearn.diffmodel import LabeledDataset
from mcunlearn.influence import (
    InfluenceConfig,
    LissaDivergenceError,
    SingularHessianError,
    dense_hessian,
    dense_inverse_hvp_oracle,
    influence_fn,
    lissa_inverse_hvp,
    mc_expected_grad,
    mc_expected_joint_hvp,
    power_iteration_scale,
)
from mcunlearn.models import GaussianMeanModel, GmmModel, MlpClassifier
from mcunlearn.samplers import SampleSet, SamplerConfig, StepSchedule, run_chain

from conftest import rel_err


def _data(x, labels=None):
    x = np.asarray(x, dtype=float).reshape(len(x), -1)
    return LabeledDataset(x, labels, np.arange(len(x)))


@pytest.fixture(scope="module")
def gmm_run():
    # long enough to settle in a mode; shorter chains can sit near a saddle
    # where the averaged Hessian is indefinite and LiSSA rightly refuses
    data, _ = gen_clusters(4, 300, 2, 3.0, seed=0)
    cfg = SamplerConfig(schedule=StepSchedule(4.0, 0.0, 0.5005), rate_divisor=300, batch_size=64,
                        total_iters=4000, thinning=10, keep_last=20)
    model = GmmModel(4, 2, 3.0)
    return model, run_chain(model, data, cfg, seed=0), data


class TestLissa:
    def test_identity(self, rng):
        v = rng.standard_normal(5)
        np.testing.assert_array_equal(lissa_inverse_hvp(lambda u: u, v, 7, 1.0), v)

    def test_geometric_series(self):
        v = np.array([1.0, -2.0])
        out = lissa_inverse_hvp(lambda u: 0.5 * u, v, 10, 1.0)
        np.testing.assert_allclose(out, (2 - 2.0**-10) * v, rtol=1e-15)
        assert out[0] == pytest.approx(1.999023, abs=1e-6)

    @pytest.mark.parametrize("d", [3, 10, 20])
    def test_random_spd_against_solve(self, d, rng):
        a = rng.standard_normal((d, d))
        H = a @ a.T / d + 0.5 * np.eye(d)
        v = rng.standard_normal(d)
        c = power_iteration_scale(lambda u: H @ u, d, rng=rng)
        assert c * np.linalg.eigvalsh(H).max() <= 1.0
        out = lissa_inverse_hvp(lambda u: H @ u, v, 200, c)
        assert rel_err(out, np.linalg.solve(H, v)) <= 1e-2

    def test_blowup_detected(self):
        with pytest.raises(LissaDivergenceError, match="smaller scale"):
            lissa_inverse_hvp(lambda u: 5.0 * u, np.ones(3), 50, 1.0)

    def test_slow_convergence_not_flagged(self):
        # exact answer is 50 v, far beyond 10 ||v||, yet the series converges
        out = lissa_inverse_hvp(lambda u: 0.02 * u, np.ones(2), 2000, 1.0)
        np.testing.assert_allclose(out, 50.0, rtol=1e-6)

    def test_zero_vector(self):
        np.testing.assert_array_equal(lissa_inverse_hvp(lambda u: u, np.zeros(3), 5, 1.0), 0.0)


class TestExpectations:
    def test_single_draw_is_last_sample(self, rng):
        m = GmmModel(2, 2)
        s = SampleSet(rng.standard_normal((5, 4)))
        z = rng.standard_normal((1, 2))
        np.testing.assert_allclose(mc_expected_grad(m, s, z, None, 1), m.grad_log_lik(s.samples[-1], z)[0])

    def test_identical_samples(self, rng):
        m = GmmModel(2, 2)
        theta = rng.standard_normal(4)
        s = SampleSet(np.tile(theta, (6, 1)))
        z = rng.standard_normal((1, 2))
        np.testing.assert_allclose(mc_expected_grad(m, s, z, None, 6), m.grad_log_lik(theta, z)[0],
                                   rtol=1e-14)

    def test_gaussian_expected_grad_at_posterior(self, rng):
        m = GaussianMeanModel(1)
        # exact posterior for S = {1, 2, 3} is N(1.5, 1/4)
        draws = rng.normal(1.5, 0.5, (4000, 1))
        g = mc_expected_grad(m, SampleSet(draws), np.array([[3.0]]), None, 4000)
        assert abs(g[0] - 1.5) <= 3 * 0.5 / np.sqrt(4000)

    def test_constant_hessian(self, rng):
        m = GaussianMeanModel(3, 1.0, 2.0)
        data = _data(rng.standard_normal((10, 3)))
        s = SampleSet(rng.standard_normal((5, 3)))
        v = rng.standard_normal(3)
        np.testing.assert_allclose(mc_expected_joint_hvp(m, s, v, data, 5), -(10 / 4 + 1) * v)
        np.testing.assert_array_equal(mc_expected_joint_hvp(m, s, np.zeros(3), data, 5), 0.0)

    def test_averaged_hvp_symmetric(self, gmm_run, rng):
        model, samples, data = gmm_run
        u, v = rng.standard_normal((2, 8))
        hu = mc_expected_joint_hvp(model, samples, u, data, 5)
        hv = mc_expected_joint_hvp(model, samples, v, data, 5)
        assert abs(u @ hv - v @ hu) <= 1e-8 * abs(u @ hv)


class TestInfluence:
    def test_empty_removal_is_zero(self, gmm_run):
        model, samples, data = gmm_run
        out = influence_fn(model, samples, data, [])
        assert out.shape == (8,)
        assert not out.any()

    def test_spec_gaussian_instance(self):
        m = GaussianMeanModel(1)
        data = _data([1.0, 2.0, 3.0])
        samples = SampleSet(np.full((5, 1), 1.5))
        cfg = InfluenceConfig(lissa_depth=200, lissa_scale=1.0, mc_draws=5, scale_abs=0.25)
        out = influence_fn(m, samples, data, [2], cfg)
        assert out[0] == pytest.approx(0.375, abs=1e-12)
        assert 1.5 - out[0] == pytest.approx(1.125)

    def test_rejects_removed_or_unknown(self, gmm_run):
        model, samples, data = gmm_run
        with pytest.raises(KeyError):
            influence_fn(model, samples, data, [10**6])
        with pytest.raises(ValueError):
            influence_fn(model, samples, data.mark_removed([0]), [0])

    def test_lissa_matches_dense_oracle_on_gmm(self, gmm_run):
        model, samples, data = gmm_run
        g = mc_expected_grad(model, samples, *data.arrays([0, 1, 2, 3]), mc_draws=5)
        dense = dense_inverse_hvp_oracle(model, samples, data, g, 5)

        def neg_hvp(u):
            return -mc_expected_joint_hvp(model, samples, u, data, 5)

        c = power_iteration_scale(neg_hvp, 8)
        assert rel_err(lissa_inverse_hvp(neg_hvp, g, 200, c), dense) <= 1e-2

    def test_dense_oracle_roundtrip(self, gmm_run, rng):
        model, samples, data = gmm_run
        v = rng.standard_normal(8)
        H = dense_hessian(model, samples, data, 5)
        u = dense_inverse_hvp_oracle(model, samples, data, v, 5)
        assert rel_err(0.5 * (H + H.T) @ u, v) <= 1e-8

    def test_dense_oracle_identity(self):
        m = GaussianMeanModel(2, 1.0, 1.0)
        data = _data(np.zeros((1, 2)))
        v = np.array([0.3, -0.7])
        # Hessian of the joint is 2 I here
        np.testing.assert_allclose(
            dense_inverse_hvp_oracle(m, SampleSet(np.zeros((1, 2))), data, 2 * v, 1), v
        )

    def test_dense_guards(self):
        m = MlpClassifier((16, 32, 4))
        data = _data(np.zeros((2, 16)), labels=[0, 1])
        with pytest.raises(ValueError):
            dense_hessian(m, SampleSet(np.zeros((1, m.dim()))), data, 1)
        with pytest.raises(SingularHessianError):
            dense_inverse_hvp_oracle(_FirstCoordinateModel(), SampleSet(np.zeros((1, 2))),
                                     _data(np.zeros((3, 2))), np.ones(2), 1)

    def test_mc_draws_stability(self, gmm_run):
        model, samples, data = gmm_run
        ids = [5, 6, 7, 8]
        one = [influence_fn(model, SampleSet(samples.samples[i:i + 1]), data, ids,
                            InfluenceConfig(mc_draws=1)) for i in range(len(samples))]
        se = np.std(one, axis=0, ddof=1) / np.sqrt(5)
        a = influence_fn(model, samples, data, ids, InfluenceConfig(mc_draws=5))
        b = influence_fn(model, samples, data, ids, InfluenceConfig(mc_draws=10))
        assert np.all(np.abs(a - b) <= 3 * se + 1e-12)


class _FirstCoordinateModel(GaussianMeanModel):
    """Likelihood sees only the first coordinate; a flat prior leaves the second unidentified."""

    def __init__(self):
        super().__init__(2, prior_std=1e9)

    def hvp_log_lik(self, theta, v, x, y=None):
        return -x.shape[0] * v * np.array([1.0, 0.0])
