"""Independent reference computations: closed-form linear-Gaussian EIG,
1-D quadrature evidence/EIG, and brute-force KL sampling.

These are deliberately written against the integral definitions rather
than the Monte Carlo estimators they validate, so the two routes share no
code path beyond the model itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .core import (
    DataStats,
    ExperimentSpec,
    NormalPrior,
    UniformPrior,
    loglik_from_g,
    substream,
)

__all__ = [
    "QuadratureRule",
    "UnsupportedDimensionError",
    "linear_gaussian_eig",
    "quadrature_evidence",
    "quadrature_eig",
    "mcla_limit_1d",
    "conjugate_posterior_1d",
    "sample_dkl_linear_gaussian",
]


class UnsupportedDimensionError(ValueError):
    """Quadrature references support d = 1 only."""


@dataclass(frozen=True)
class QuadratureRule:
    """A 1-D quadrature rule: nodes/weights against the prior measure.

    ``gauss_hermite`` integrates against a normal prior density directly;
    ``gauss_legendre`` and ``trapezoid`` integrate over ``domain`` and the
    prior density is folded into the integrand.
    """

    kind: str = "gauss_legendre"
    n_points: int = 200
    domain: tuple[float, float] | None = None

    def __post_init__(self):
        if self.kind not in ("gauss_legendre", "gauss_hermite", "trapezoid"):
            raise ValueError(f"unknown quadrature kind {self.kind!r}")
        if self.n_points < 2:
            raise ValueError("n_points must be >= 2")

    def nodes_logweights(self, prior) -> tuple[np.ndarray, np.ndarray]:
        """Return nodes and log-weights such that sum(w * f(node)) ~ E_prior[f]."""
        if self.kind == "gauss_hermite":
            if not isinstance(prior, NormalPrior):
                raise ValueError("gauss_hermite requires a normal prior")
            z, w = special.roots_hermite(self.n_points)
            with np.errstate(divide="ignore"):  # far-tail weights underflow to 0
                logw = np.log(w) - 0.5 * math.log(math.pi)
            mu = prior.mean[0]
            sd = math.sqrt(prior.cov[0, 0])
            return mu + sd * z * math.sqrt(2.0), logw
        lo, hi = self._domain(prior)
        if self.kind == "gauss_legendre":
            x, w = np.polynomial.legendre.leggauss(self.n_points)
            nodes = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
            weights = 0.5 * (hi - lo) * w
        else:
            nodes = np.linspace(lo, hi, self.n_points)
            step = (hi - lo) / (self.n_points - 1)
            weights = np.full(self.n_points, step)
            weights[0] *= 0.5
            weights[-1] *= 0.5
        logw = np.log(weights) + prior.logpdf(nodes[:, None])
        return nodes, logw

    def _domain(self, prior) -> tuple[float, float]:
        if self.domain is not None:
            return self.domain
        if isinstance(prior, UniformPrior):
            return float(prior.lower[0]), float(prior.upper[0])
        mu = float(prior.mean[0])
        sd = math.sqrt(float(prior.cov[0, 0]))
        return mu - 8.5 * sd, mu + 8.5 * sd


def _require_1d(spec: ExperimentSpec):
    if spec.model.d != 1:
        raise UnsupportedDimensionError(
            f"quadrature references support d=1, got d={spec.model.d}"
        )


def _logsumexp(v: np.ndarray, axis=None) -> np.ndarray:
    m = np.max(v, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(v - m), axis=axis)) + np.squeeze(m, axis=axis)
    return out


def linear_gaussian_eig(a: float, var_prior: float, var_noise: float, n_e: int) -> float:
    """Closed-form EIG of y_i = a*theta + eps_i with normal prior (nats)."""
    if var_prior <= 0 or var_noise <= 0:
        raise ValueError("variances must be positive")
    return 0.5 * math.log1p(n_e * a * a * var_prior / var_noise)


def conjugate_posterior_1d(spec: ExperimentSpec, y: np.ndarray, a: float):
    """Posterior mean/variance for a 1-D linear-Gaussian model y = a*theta + eps."""
    prior = spec.prior
    if not isinstance(prior, NormalPrior):
        raise ValueError("conjugate posterior requires a normal prior")
    var_eps = float(spec.noise.variances[0])
    prec = 1.0 / float(prior.cov[0, 0]) + spec.n_e * a * a / var_eps
    var_post = 1.0 / prec
    mu_post = var_post * (float(prior.mean[0]) / float(prior.cov[0, 0]) + a * float(np.sum(y)) / var_eps)
    return mu_post, var_post


def quadrature_evidence(
    spec: ExperimentSpec,
    y: np.ndarray,
    rule: QuadratureRule | None = None,
    h: float | None = None,
) -> float:
    """log p(Y) by 1-D quadrature over the prior, with max-shifted exponentials."""
    _require_1d(spec)
    rule = rule or QuadratureRule()
    nodes, logw = rule.nodes_logweights(spec.prior)
    g = spec.model.evaluate(nodes[:, None], spec.xi, h)          # (k, q)
    stats = DataStats.from_y(np.asarray(y, dtype=float), spec.noise)
    ll = loglik_from_g(g[None, :, :], stats, spec.noise)[0]      # (k,)
    return float(_logsumexp(logw + ll))


def _noise_stat_rule(n_e: int, var: float, n_points: int):
    """Quadrature over the noise sufficient statistics for q = 1.

    For eps_i iid N(0, var), the log-evidence depends on the noise only
    through u = sum(eps) ~ N(0, n_e*var) and, independently, the centered
    square sum w = sum((eps - mean)^2) ~ var * chi2(n_e - 1).  Returns
    nodes (u, w) and probability weights of the product rule.
    """
    z, wz = special.roots_hermite(n_points)
    u_nodes = z * math.sqrt(2.0 * n_e * var)
    u_w = wz / math.sqrt(math.pi)
    k = n_e - 1
    if k == 0:
        w_nodes = np.array([0.0])
        w_w = np.array([1.0])
    else:
        x, wx = special.roots_genlaguerre(max(4, n_points // 2), k / 2.0 - 1.0)
        w_nodes = 2.0 * var * x
        w_w = wx / math.gamma(k / 2.0)
    uu, ww = np.meshgrid(u_nodes, w_nodes, indexing="ij")
    pw = np.outer(u_w, w_w)
    return uu.ravel(), ww.ravel(), pw.ravel()


def quadrature_eig(
    spec: ExperimentSpec,
    rule_outer: QuadratureRule | None = None,
    rule_inner: QuadratureRule | None = None,
    rule_noise_points: int = 48,
    h: float | None = None,
) -> float:
    """Reference EIG for 1-D scalar-response models, quadrature end to end.

    Outer expectation over theta by ``rule_outer``; expectation over
    datasets by an exact product rule on the noise sufficient statistics
    (``rule_noise_points`` resolution); evidence inside the logarithm by
    ``rule_inner``.  Serves as the "true" EIG in error-vs-tolerance
    studies.
    """
    _require_1d(spec)
    if spec.model.q != 1:
        raise UnsupportedDimensionError("noise quadrature requires q = 1")
    rule_outer = rule_outer or QuadratureRule(n_points=60)
    rule_inner = rule_inner or QuadratureRule(n_points=400)
    nodes_o, logw_o = rule_outer.nodes_logweights(spec.prior)
    nodes_i, logw_i = rule_inner.nodes_logweights(spec.prior)

    g_o = spec.model.evaluate(nodes_o[:, None], spec.xi, h)[:, 0]   # (ko,)
    g_i = spec.model.evaluate(nodes_i[:, None], spec.xi, h)         # (ki, q)

    var = float(spec.noise.variances[0])
    ivar = 1.0 / var
    n_e = spec.n_e
    u, w, pw = _noise_stat_rule(n_e, var, rule_noise_points)        # (t,) each
    # residuals at the generating theta: sum eps_i^2 = u^2/n_e + w
    ll_self = n_e * spec.noise.log_norm - 0.5 * (u**2 / n_e + w) * ivar

    w_o = np.exp(logw_o - _logsumexp(logw_o))
    total = 0.0
    for j, gj in enumerate(g_o):
        s1 = (n_e * gj + u)[:, None]                                # (t, 1)
        s2 = (n_e * gj**2 + 2.0 * gj * u + u**2 / n_e + w) * ivar
        stats = DataStats(s1=s1, s2=s2, n_e=n_e)
        ll = loglik_from_g(
            np.broadcast_to(g_i[None, :, :], (len(u), len(nodes_i), 1)),
            stats,
            spec.noise,
        )                                                           # (t, ki)
        log_ev = _logsumexp(ll + logw_i, axis=1)
        total += w_o[j] * float(np.sum(pw * (ll_self - log_ev)))
    return float(total)


def mcla_limit_1d(
    spec: ExperimentSpec,
    rule: QuadratureRule | None = None,
    h: float | None = None,
    fd_rel_step: float = 6.0e-6,
) -> float:
    """Population limit of the Laplace-approximation estimator on a 1-D model.

    Integrates the per-sample Laplace KL term over the prior by quadrature;
    the gap to ``quadrature_eig`` is the Laplace bias itself.
    """
    _require_1d(spec)
    rule = rule or QuadratureRule(n_points=400)
    nodes, logw = rule.nodes_logweights(spec.prior)
    th = nodes[:, None]
    step = fd_rel_step * np.maximum(1.0, np.abs(th))
    gp = spec.model.evaluate(th + step, spec.xi, h)
    gm = spec.model.evaluate(th - step, spec.xi, h)
    jac = (gp - gm) / (2.0 * step)                               # (k, q)
    ivar = spec.noise.inv_var
    prec = spec.n_e * np.einsum("kq,q->k", jac**2, ivar)
    hess = float(spec.prior.hess_logpdf()[0, 0])
    prec = prec - hess
    var_hat = 1.0 / prec
    terms = (
        -0.5 * (math.log(2.0 * math.pi) + np.log(var_hat))
        - 0.5
        - spec.prior.logpdf(th)
    )
    w = np.exp(logw - _logsumexp(logw))
    return float(np.sum(w * terms))


def sample_dkl_linear_gaussian(
    spec: ExperimentSpec, a: float, n_draws: int = 1_000_000, seed: int = 7
) -> np.ndarray:
    """Draw D_kl(Y) values from the closed-form linear-Gaussian posterior.

    Samples (theta, Y) from the joint, forms the conjugate posterior for
    each Y, and returns the exact 1-D Gaussian KL for every draw.
    """
    prior = spec.prior
    if not isinstance(prior, NormalPrior):
        raise ValueError("requires a normal prior")
    rng = substream(seed, 99)
    mu_pr = float(prior.mean[0])
    var_pr = float(prior.cov[0, 0])
    var_eps = float(spec.noise.variances[0])
    theta = rng.normal(mu_pr, math.sqrt(var_pr), n_draws)
    y_sum = spec.n_e * a * theta + rng.normal(
        0.0, math.sqrt(spec.n_e * var_eps), n_draws
    )
    prec_post = 1.0 / var_pr + spec.n_e * a * a / var_eps
    var_post = 1.0 / prec_post
    mu_post = var_post * (mu_pr / var_pr + a * y_sum / var_eps)
    return 0.5 * np.log(var_pr / var_post) + 0.5 * (
        var_post / var_pr - 1.0 + (mu_post - mu_pr) ** 2 / var_pr
    )
