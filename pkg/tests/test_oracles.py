"""Reference computations: closed forms, quadrature evidence/EIG, KL sampling."""

import math

import numpy as np
import pytest

from eigtune.core import Dataset, ExperimentSpec, NoiseModel, NormalPrior, simulate_data, substream
from eigtune.models import ExperimentModel, build_model
from eigtune.oracles import (
    QuadratureRule,
    UnsupportedDimensionError,
    conjugate_posterior_1d,
    linear_gaussian_eig,
    mcla_limit_1d,
    quadrature_eig,
    quadrature_evidence,
    sample_dkl_linear_gaussian,
)
from tests.test_core import example1_spec, example2_spec


class TestLinearGaussianEig:
    def test_zero_sensitivity(self):
        assert linear_gaussian_eig(0.0, 0.01, 4.0, 2) == 0.0

    def test_example1_value(self):
        assert linear_gaussian_eig(121.0, 0.01, 4.0, 2) == pytest.approx(
            2.153415766673891, rel=1e-12
        )

    def test_ne_quadrupling_adds_half_log4(self):
        # large-signal limit: 4x repetitions add (1/2) log 4 within 1%
        base = linear_gaussian_eig(121.0, 0.01, 4.0, 100)
        quad = linear_gaussian_eig(121.0, 0.01, 4.0, 400)
        assert quad - base == pytest.approx(0.5 * math.log(4.0), rel=0.01)

    def test_invalid_variances(self):
        with pytest.raises(ValueError):
            linear_gaussian_eig(1.0, -0.1, 1.0, 1)


def _analytic_evidence_ex1(spec, y):
    # marginal of Y for y_i = A theta + eps_i: N(A mu, A^2 s_pr^2 11' + s_e^2 I)
    a = (1.0 + spec.xi) ** 2
    n_e = spec.n_e
    var_pr = float(spec.prior.cov[0, 0])
    var_e = float(spec.noise.variances[0])
    cov = a * a * var_pr * np.ones((n_e, n_e)) + var_e * np.eye(n_e)
    resid = y[:, 0] - a * float(spec.prior.mean[0])
    _, logdet = np.linalg.slogdet(cov)
    quad = resid @ np.linalg.solve(cov, resid)
    return -0.5 * (n_e * math.log(2 * math.pi) + logdet + quad)


class TestQuadratureEvidence:
    def test_matches_conjugate_closed_form(self):
        spec = example1_spec()
        rng = substream(1, 5)
        for _ in range(5):
            data = simulate_data(spec, spec.prior.sample(rng, 1)[0], seed=rng)
            got = quadrature_evidence(spec, data.y, QuadratureRule(n_points=400))
            assert got == pytest.approx(_analytic_evidence_ex1(spec, data.y), abs=1e-8)

    def test_flat_likelihood_returns_constant(self):
        model = ExperimentModel(
            name="const", d=1, q=1, eval_fn=lambda t, xi, h: np.full((t.shape[0], 1), 3.0)
        )
        spec = ExperimentSpec(
            model=model, prior=NormalPrior([0.0], [[1.0]]), noise=NoiseModel([1.0]), xi=0.0
        )
        y = np.array([[3.5]])
        expect = -0.5 * math.log(2 * math.pi) - 0.5 * 0.25
        got = quadrature_evidence(spec, y, QuadratureRule(n_points=100))
        assert got == pytest.approx(expect, abs=1e-10)

    def test_convergence_plateau_example2(self):
        spec = example2_spec()
        data = simulate_data(spec, [0.5], seed=4)
        a = quadrature_evidence(spec, data.y, QuadratureRule(n_points=200))
        b = quadrature_evidence(spec, data.y, QuadratureRule(n_points=400))
        assert abs(a - b) < 1e-8

    def test_rejects_multidimensional(self):
        model = ExperimentModel(
            name="two", d=2, q=1, eval_fn=lambda t, xi, h: t[:, :1] + t[:, 1:]
        )
        spec = ExperimentSpec(
            model=model,
            prior=NormalPrior([0.0, 0.0], np.eye(2)),
            noise=NoiseModel([1.0]),
            xi=0.0,
        )
        with pytest.raises(UnsupportedDimensionError):
            quadrature_evidence(spec, np.array([[0.0]]), QuadratureRule())


class TestQuadratureEig:
    def test_example1_matches_closed_form(self):
        spec = example1_spec()
        got = quadrature_eig(
            spec,
            QuadratureRule(kind="gauss_hermite", n_points=60),
            QuadratureRule(kind="gauss_hermite", n_points=300),
        )
        assert got == pytest.approx(2.153415766673891, abs=1e-4)

    def test_example2_self_convergence(self):
        spec = example2_spec(xi=1.0, n_e=1)
        a = quadrature_eig(spec, QuadratureRule(n_points=80), QuadratureRule(n_points=500))
        b = quadrature_eig(
            spec, QuadratureRule(n_points=120), QuadratureRule(n_points=900),
            rule_noise_points=64,
        )
        assert a > 0
        assert abs(a - b) < 1e-4
        assert a == pytest.approx(2.275571, abs=2e-4)  # frozen from refined run

    def test_zero_sensitivity_model_gives_zero(self):
        model = ExperimentModel(
            name="flat", d=1, q=1, eval_fn=lambda t, xi, h: np.ones((t.shape[0], 1))
        )
        spec = ExperimentSpec(
            model=model, prior=NormalPrior([0.0], [[1.0]]), noise=NoiseModel([0.5]), xi=0.0
        )
        got = quadrature_eig(spec, QuadratureRule(kind="gauss_hermite", n_points=40),
                             QuadratureRule(kind="gauss_hermite", n_points=100))
        assert abs(got) < 1e-10

    def test_eig_nonnegative_on_grid(self):
        for xi in (0.0, 0.25, 0.5, 1.0):
            spec = example2_spec(xi=xi, n_e=1)
            val = quadrature_eig(spec, QuadratureRule(n_points=60),
                                 QuadratureRule(n_points=400))
            assert val >= -1e-8

    def test_noise_monotonicity(self):
        # shrinking the noise never decreases the EIG
        prev = None
        for var in (1e-1, 1e-2, 1e-3):
            spec = example2_spec(xi=0.8, n_e=1, var=var)
            val = quadrature_eig(spec, QuadratureRule(n_points=60),
                                 QuadratureRule(n_points=400))
            if prev is not None:
                assert val >= prev - 1e-6
            prev = val
        for var in (16.0, 4.0, 1.0):
            spec = example1_spec()
            spec = ExperimentSpec(model=spec.model, prior=spec.prior,
                                  noise=NoiseModel([var]), xi=spec.xi, n_e=spec.n_e)
            val = linear_gaussian_eig(121.0, 0.01, var, 2)
            if var < 16.0:
                assert val >= prev_lin
            prev_lin = val


class TestDklSampling:
    def test_mean_matches_eig(self):
        spec = example1_spec()
        dkl = sample_dkl_linear_gaussian(spec, a=121.0, n_draws=400_000, seed=3)
        se = float(np.std(dkl) / math.sqrt(len(dkl)))
        assert abs(float(np.mean(dkl)) - 2.153415766673891) < 4 * se

    def test_conjugate_posterior_helper(self):
        spec = example1_spec()
        data = simulate_data(spec, [1.0], seed=8)
        mu, var = conjugate_posterior_1d(spec, data.y, a=121.0)
        prec = 1 / 0.01 + 2 * 121.0**2 / 4.0
        assert var == pytest.approx(1.0 / prec, rel=1e-12)
        assert mu == pytest.approx(
            var * (1.0 / 0.01 + 121.0 * float(np.sum(data.y)) / 4.0), rel=1e-12
        )


class TestMclaLimit:
    def test_linear_model_has_no_laplace_bias(self):
        spec = example1_spec()
        la = mcla_limit_1d(spec, QuadratureRule(kind="gauss_hermite", n_points=200))
        assert la == pytest.approx(2.153415766673891, abs=2e-4)

    def test_example2_bias_scales_like_sqrt_ne(self):
        # truncation at the box edges dominates: bias ~ N_e^(-1/2)
        biases = {}
        for n_e in (1, 10):
            spec = example2_spec(xi=1.0, n_e=n_e)
            I = quadrature_eig(spec, QuadratureRule(n_points=80),
                               QuadratureRule(n_points=500))
            La = mcla_limit_1d(spec, QuadratureRule(n_points=4000))
            biases[n_e] = I - La
        assert biases[1] == pytest.approx(0.0724, abs=0.004)
        assert biases[10] == pytest.approx(0.0229, abs=0.004)
        assert biases[1] / biases[10] == pytest.approx(math.sqrt(10.0), rel=0.15)
