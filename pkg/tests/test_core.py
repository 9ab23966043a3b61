"""Core model layer: priors, noise, simulation, and log-likelihoods."""

import math

import numpy as np
import pytest

from eigtune.core import (
    Dataset,
    ExperimentSpec,
    NoiseModel,
    NormalPrior,
    UniformPrior,
    log_likelihood,
    loglik_decomposition,
    make_prior,
    simulate_data,
    substream,
)
from eigtune.models import CountingModel, WorkTally, build_model


def example1_spec(xi=10.0, n_e=2):
    bundle = build_model("linear-scalar")
    return ExperimentSpec(
        model=bundle.model,
        prior=make_prior(bundle.default_prior),
        noise=NoiseModel(bundle.default_noise_var(xi)),
        xi=xi,
        n_e=n_e,
    )


def example2_spec(xi=1.0, n_e=1, var=1e-3):
    bundle = build_model("nonlinear-scalar")
    return ExperimentSpec(
        model=bundle.model,
        prior=make_prior(bundle.default_prior),
        noise=NoiseModel([var]),
        xi=xi,
        n_e=n_e,
    )


class TestPriorsAndNoise:
    def test_zero_noise_variance_rejected(self):
        with pytest.raises(ValueError):
            NoiseModel([0.0])
        with pytest.raises(ValueError):
            NoiseModel([1.0, -2.0])

    def test_uniform_bounds_ordering(self):
        with pytest.raises(ValueError):
            UniformPrior([0.0, 1.0], [1.0, 0.5])

    def test_normal_prior_requires_spd(self):
        with pytest.raises(ValueError):
            NormalPrior([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])

    def test_normal_logpdf_matches_formula(self):
        prior = NormalPrior([1.0], [[0.01]])
        x = np.array([[1.2]])
        expect = -0.5 * math.log(2 * math.pi * 0.01) - 0.5 * 0.04 / 0.01
        assert prior.logpdf(x)[0] == pytest.approx(expect, rel=1e-12)

    def test_uniform_logpdf_and_derivatives(self):
        prior = UniformPrior([0.0], [2.0])
        inside = np.array([[1.0]])
        assert prior.logpdf(inside)[0] == pytest.approx(-math.log(2.0))
        assert prior.logpdf(np.array([[2.5]]))[0] == -np.inf
        assert np.all(prior.grad_logpdf(inside) == 0.0)
        assert np.all(prior.hess_logpdf() == 0.0)

    def test_normal_grad_hess(self):
        prior = NormalPrior([0.0], [[4.0]])
        th = np.array([[2.0]])
        assert prior.grad_logpdf(th)[0, 0] == pytest.approx(-0.5)
        assert prior.hess_logpdf()[0, 0] == pytest.approx(-0.25)


class TestSimulateData:
    def test_example1_rows_near_121(self):
        # theta = 1 at xi = 10 gives responses 121 + noise, two repetitions
        spec = example1_spec()
        data = simulate_data(spec, [1.0], seed=3)
        assert data.y.shape == (2, 1)
        assert np.all(np.abs(data.y - 121.0) < 6 * 2.0)

    def test_deterministic_given_seed(self):
        spec = example1_spec()
        a = simulate_data(spec, [1.0], seed=42)
        b = simulate_data(spec, [1.0], seed=42)
        np.testing.assert_array_equal(a.y, b.y)

    def test_rows_independent_across_seeds(self):
        # empirical covariance between the two rows vanishes
        spec = example1_spec()
        rng = substream(7, 0)
        ys = np.array([simulate_data(spec, [1.0], seed=rng).y[:, 0] for _ in range(10_000)])
        resid = ys - 121.0
        cov = float(np.mean(resid[:, 0] * resid[:, 1]))
        se = 4.0 / math.sqrt(len(resid))  # var of eps product ~ sigma^4
        assert abs(cov) < 3 * se


class TestLogLikelihood:
    def test_zero_residual_unit_variance(self):
        spec = example2_spec(var=1.0)
        g = spec.model.evaluate(np.array([[0.5]]), spec.xi)[0]
        data = Dataset(y=g[None, :], theta=np.array([0.5]))
        ll = log_likelihood(spec, data, [0.5])
        assert ll == pytest.approx(-0.5 * math.log(2 * math.pi), rel=1e-12)

    def test_example1_hand_value(self):
        # Y = [[123],[119]] at theta=1, xi=10, sigma^2=4: -log(8*pi) - 1
        spec = example1_spec()
        data = Dataset(y=np.array([[123.0], [119.0]]), theta=np.array([1.0]))
        ll = log_likelihood(spec, data, [1.0])
        assert ll == pytest.approx(-math.log(8 * math.pi) - 1.0, rel=1e-12)

    def test_shift_identity(self):
        spec = example1_spec()
        y0 = np.array([[123.0], [119.0]])
        delta = 0.7
        y1 = y0.copy()
        y1[0, 0] += delta
        base = log_likelihood(spec, Dataset(y=y0, theta=np.array([1.0])), [1.0])
        shifted = log_likelihood(spec, Dataset(y=y1, theta=np.array([1.0])), [1.0])
        resid = 123.0 - 121.0
        expect = -(2 * delta * resid + delta**2) / (2 * 4.0)
        assert shifted - base == pytest.approx(expect, rel=1e-10)

    def test_row_permutation_invariance(self):
        spec = example1_spec()
        y = np.array([[123.0], [119.0]])
        a = log_likelihood(spec, Dataset(y=y, theta=np.array([1.0])), [1.02])
        b = log_likelihood(spec, Dataset(y=y[::-1], theta=np.array([1.0])), [1.02])
        assert a == pytest.approx(b, rel=1e-14)


class TestDecomposition:
    def test_zero_gap(self):
        spec = example1_spec()
        data = simulate_data(spec, [1.0], seed=5)
        _, gap, cross, _ = loglik_decomposition(spec, [1.0], [1.0], data)
        assert gap == 0.0
        assert cross == 0.0

    def test_parts_sum_to_loglik(self):
        spec = example2_spec(n_e=4)
        data = simulate_data(spec, [0.4], seed=9)
        parts = loglik_decomposition(spec, [0.4], [0.6], data)
        total = log_likelihood(spec, data, [0.6])
        assert sum(parts) == pytest.approx(total, rel=1e-12)

    def test_noise_norm_concentrates(self):
        # unit variances: noise_norm/n_e concentrates near -q/2
        spec = example2_spec(var=1.0, n_e=3)
        rng = substream(11, 1)
        vals = []
        for _ in range(10_000):
            data = simulate_data(spec, [0.5], seed=rng)
            vals.append(loglik_decomposition(spec, [0.5], [0.5], data)[3] / spec.n_e)
        mean = float(np.mean(vals))
        se = float(np.std(vals) / math.sqrt(len(vals)))
        assert abs(mean + 0.5) < 4 * se


class TestMeshAndWork:
    def test_mesh_bias_slope_is_eta(self):
        bundle = build_model("synthetic-mesh", {"base": "nonlinear-scalar",
                                                "c_bias": 0.2, "eta": 1.5, "gamma": 1.0})
        model = bundle.model
        th = np.linspace(0.1, 0.9, 7)[:, None]
        hs = np.array([2.0**-k for k in range(3, 9)])
        errs = []
        g0 = model.evaluate(th, 1.0, None)
        for h in hs:
            errs.append(np.linalg.norm(model.evaluate(th, 1.0, h) - g0))
        slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
        assert abs(slope - 1.5) < 0.05

    def test_work_accounting_matches_counts(self):
        bundle = build_model("synthetic-mesh", {"eta": 1.0, "gamma": 2.0})
        tally = WorkTally(bundle.model)
        cm = CountingModel(bundle.model, tally)
        th = np.zeros((5, 1)) + 0.5
        cm.evaluate(th, 1.0, 0.5)
        cm.evaluate(th[:3], 1.0, 0.25)
        cm.evaluate(th[:2], 1.0, None)
        assert tally.n_evals == 10
        assert tally.units == pytest.approx(5 * 0.5**-2 + 3 * 0.25**-2 + 2)

    def test_exact_model_unit_work(self):
        bundle = build_model("linear-scalar")
        assert bundle.model.work_per_eval(None) == 1.0

    def test_spec_validation(self):
        bundle = build_model("linear-scalar")
        prior = make_prior(bundle.default_prior)
        with pytest.raises(ValueError):
            ExperimentSpec(model=bundle.model, prior=prior,
                           noise=NoiseModel([1.0]), xi=10.0, n_e=0)
