"""The three expected-information-gain estimators with work accounting.

* ``dlmc``   - nested Monte Carlo: prior samples inside and out.
* ``mcla``   - single loop; the inner integral is replaced by the analytic
  KL of the Laplace approximation built at each outer sample.
* ``dlmcis`` - nested Monte Carlo with the inner samples drawn from a
  Laplace proposal fitted per outer dataset (importance sampling).

Everything runs in the log domain; linear-domain likelihoods are never
formed.  Underflow is *detected* (what a naive linear-domain code would
have produced) and reported, not suffered.

Estimates are deterministic functions of (spec, setting, seed): random
draws follow a fixed per-stream layout independent of scheduling and of
chunk boundaries.  The layout is part of the contract: stream 0 drives
the outer parameter draws (consumed as prior samples in outer order),
stream 1 the data noise (standard normals, shape (n, n_e, q) order),
stream 2 the inner proposal draws, and stream 3 the MAP multistarts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    LOG_TINY,
    DataStats,
    ExperimentSpec,
    loglik_from_g,
    substream,
)
from .laplace import (
    FdScheme,
    find_map_batch,
    grad_g_batch,
    precision_to_cov_batch,
    sample_proposal_batch,
)
from .models import CountingModel, WorkTally

__all__ = [
    "EstimatorSetting",
    "EigEstimate",
    "LinearDomainUnderflow",
    "log_mean_exp",
    "kl_gaussian_1d",
    "dlmc",
    "mcla",
    "dlmcis",
    "run_estimator",
]

# scalar model evaluations per vectorized chunk
CHUNK_TARGET = 4_000_000


@dataclass(frozen=True)
class EstimatorSetting:
    """Sample counts, mesh, and error split for one estimator run."""

    n: int
    m: int = 1
    h: float | None = None          # None = exact model
    kappa: float = 1.0
    tol: float = math.nan           # metadata: the tolerance this was tuned for
    alpha: float = 0.05

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ValueError("n and m must be >= 1")
        if self.h is not None and not self.h > 0:
            raise ValueError("h must be positive or None for the exact model")
        if not (0.0 < self.kappa <= 1.0):
            raise ValueError("kappa must lie in (0, 1]")
        if not (0.0 < self.alpha < 1.0):
            raise ValueError("alpha must lie in (0, 1)")


@dataclass(frozen=True)
class EigEstimate:
    """An EIG estimate with its error and work diagnostics."""

    value: float
    std_error: float
    underflow_count: int
    work_units: float
    n_evals: int
    n_outer: int
    n_excluded: int = 0
    n_flagged: int = 0
    per_outer_terms: np.ndarray | None = field(default=None, repr=False)


class LinearDomainUnderflow(FloatingPointError):
    """Every entry of a log-vector is -inf: the linear-domain mean is zero."""


def log_mean_exp(v) -> float:
    """log(mean(exp(v))) via max-shift; exactly shift invariant.

    Entries may be -inf (zero likelihoods); if *all* entries are -inf the
    linear-domain mean has underflowed entirely and this raises
    ``LinearDomainUnderflow`` for the caller to count.
    """
    v = np.asarray(v, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("log_mean_exp of an empty vector")
    m = float(np.max(v))
    if m == -math.inf:
        raise LinearDomainUnderflow("all log-values are -inf")
    return m + math.log(float(np.mean(np.exp(v - m))))


def _log_mean_exp_rows(lw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise log-mean-exp; returns (values, all_minus_inf_mask)."""
    m = np.max(lw, axis=1)
    dead = ~np.isfinite(m)
    shift = np.where(dead, 0.0, m)
    out = shift + np.log(np.mean(np.exp(lw - shift[:, None]), axis=1))
    out[dead] = -np.inf
    return out, dead


def kl_gaussian_1d(mu_prior: float, var_prior: float, mu_post: float, var_post: float) -> float:
    """KL divergence from prior to posterior for 1-D Gaussians (nats)."""
    if var_prior <= 0 or var_post <= 0:
        raise ValueError("variances must be positive")
    return 0.5 * math.log(var_prior / var_post) + 0.5 * (
        var_post / var_prior - 1.0 + (mu_post - mu_prior) ** 2 / var_prior
    )


class _MeanVar:
    """Streaming mean/variance accumulator with a shift for cancellation safety."""

    def __init__(self):
        self.n = 0
        self.shift = None
        self.s1 = 0.0
        self.s2 = 0.0

    def add(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=float)
        if x.size == 0:
            return
        if self.shift is None:
            self.shift = float(x.flat[0])
        d = x - self.shift
        self.n += x.size
        self.s1 += float(np.sum(d))
        self.s2 += float(np.sum(d * d))

    @property
    def mean(self) -> float:
        return self.shift + self.s1 / self.n

    @property
    def var(self) -> float:
        if self.n < 2:
            return math.inf  # undefined from one sample; conservatively infinite
        return max(0.0, (self.s2 - self.s1 * self.s1 / self.n) / (self.n - 1))

    @property
    def sem(self) -> float:
        if self.n < 2:
            return math.inf
        return math.sqrt(self.var / self.n)


def _chunk_size(n: int, m: int) -> int:
    return max(1, min(n, CHUNK_TARGET // max(1, m)))


def _chunks(n: int, m: int):
    size = _chunk_size(n, m)
    for a in range(0, n, size):
        yield a, min(a + size, n)


# ---------------------------------------------------------------------------
# DLMC
# ---------------------------------------------------------------------------

def dlmc(
    spec: ExperimentSpec,
    setting: EstimatorSetting,
    seed: int,
    keep_terms: bool = False,
) -> EigEstimate:
    """Double-loop Monte Carlo estimate of the expected information gain."""
    n, m, h = setting.n, setting.m, setting.h
    tally = WorkTally(spec.model)
    cmodel = CountingModel(spec.model, tally)
    th_rng = substream(seed, 0)
    noise_rng = substream(seed, 1)
    inner_rng = substream(seed, 2)

    acc = _MeanVar()
    underflow = 0
    terms_out = [] if keep_terms else None

    for a, b in _chunks(n, m):
        k = b - a
        th = spec.prior.sample(th_rng, k)
        g = cmodel.evaluate(th, spec.xi, h)
        eps = spec.noise.sample(noise_rng, k, spec.n_e)
        stats = DataStats.from_y(g[:, None, :] + eps, spec.noise)
        ll0 = loglik_from_g(g, stats, spec.noise)

        th_in = spec.prior.sample(inner_rng, k * m).reshape(k, m, -1)
        g_in = cmodel.evaluate(th_in.reshape(k * m, -1), spec.xi, h).reshape(
            k, m, spec.model.q
        )
        ll_in = loglik_from_g(g_in, stats, spec.noise)
        lme, _ = _log_mean_exp_rows(ll_in)
        underflow += int(np.count_nonzero(np.max(ll_in, axis=1) < LOG_TINY))

        terms = ll0 - lme
        acc.add(terms)
        if keep_terms:
            terms_out.append(terms)

    return EigEstimate(
        value=acc.mean,
        std_error=acc.sem,
        underflow_count=underflow,
        work_units=tally.units,
        n_evals=tally.n_evals,
        n_outer=n,
        per_outer_terms=np.concatenate(terms_out) if keep_terms else None,
    )


# ---------------------------------------------------------------------------
# MCLA
# ---------------------------------------------------------------------------

def mcla(
    spec: ExperimentSpec,
    setting: EstimatorSetting,
    seed: int,
    scheme: FdScheme | None = None,
    keep_terms: bool = False,
) -> EigEstimate:
    """Monte Carlo with the Laplace approximation (single loop; m is unused).

    Per outer sample the covariance is built at the sampled theta itself
    (the theta_hat ~ theta_t substitution), so each term costs one
    finite-difference Jacobian and no dataset.
    """
    scheme = scheme or FdScheme()
    n, h = setting.n, setting.h
    d = spec.model.d
    tally = WorkTally(spec.model)
    cmodel = CountingModel(spec.model, tally)
    th_rng = substream(seed, 0)
    hess_prior = spec.prior.hess_logpdf()

    acc = _MeanVar()
    excluded = 0
    terms_out = [] if keep_terms else None
    log2pi = math.log(2.0 * math.pi)

    for a, b in _chunks(n, 2 * d):
        k = b - a
        th = spec.prior.sample(th_rng, k)
        jg = grad_g_batch(cmodel, th, spec.xi, h, scheme, box=spec.prior.box)
        prec = spec.n_e * np.einsum(
            "aqd,q,aqe->ade", jg, spec.noise.inv_var, jg
        ) - hess_prior
        _, logdet_cov, ok = precision_to_cov_batch(prec)
        excluded += int(np.count_nonzero(~ok))
        terms = np.full(k, np.nan)
        terms[ok] = (
            -0.5 * (d * log2pi + logdet_cov[ok])
            - 0.5 * d
            - spec.prior.logpdf(th[ok])
        )
        acc.add(terms[ok])
        if keep_terms:
            terms_out.append(terms)

    return EigEstimate(
        value=acc.mean,
        std_error=acc.sem,
        underflow_count=0,
        work_units=tally.units,
        n_evals=tally.n_evals,
        n_outer=n,
        n_excluded=excluded,
        per_outer_terms=np.concatenate(terms_out) if keep_terms else None,
    )


# ---------------------------------------------------------------------------
# DLMCIS
# ---------------------------------------------------------------------------

def dlmcis(
    spec: ExperimentSpec,
    setting: EstimatorSetting,
    seed: int,
    scheme: FdScheme | None = None,
    keep_terms: bool = False,
    proposal: str = "laplace",
    map_gtol: float = 1.0e-8,
    map_max_iter: int = 60,
) -> EigEstimate:
    """Double-loop Monte Carlo with Laplace-based importance sampling.

    For every outer sample a MAP fit to its dataset defines the proposal
    (box-truncated normal for 1-D uniform priors, plain normal otherwise);
    the evidence is averaged over proposal draws reweighted by
    prior/proposal.  Any proposal draw outside the prior support gets
    log-weight -inf but stays in the divisor m, which keeps the evidence
    estimate unbiased.

    ``proposal='prior'`` (normal priors only) degenerates the change of
    measure to the identity; per-outer terms then coincide with DLMC's
    for the same seed, which serves as a validation mode.
    """
    if proposal not in ("laplace", "prior"):
        raise ValueError("proposal must be 'laplace' or 'prior'")
    if proposal == "prior" and spec.prior.kind != "normal":
        raise ValueError("proposal='prior' requires a normal prior")
    scheme = scheme or FdScheme()
    n, m, h = setting.n, setting.m, setting.h
    d = spec.model.d
    tally = WorkTally(spec.model)
    cmodel = CountingModel(spec.model, tally)
    th_rng = substream(seed, 0)
    noise_rng = substream(seed, 1)
    inner_rng = substream(seed, 2)
    map_rng = substream(seed, 3)
    hess_prior = spec.prior.hess_logpdf()

    acc = _MeanVar()
    underflow = 0
    excluded = 0
    flagged = 0
    terms_out = [] if keep_terms else None

    for a, b in _chunks(n, m + 40):
        k = b - a
        th = spec.prior.sample(th_rng, k)
        g = cmodel.evaluate(th, spec.xi, h)
        eps = spec.noise.sample(noise_rng, k, spec.n_e)
        stats = DataStats.from_y(g[:, None, :] + eps, spec.noise)
        ll0 = loglik_from_g(g, stats, spec.noise)
        terms = np.full(k, np.nan)

        if proposal == "prior":
            z = inner_rng.standard_normal((k * m, d))
            th_in = (spec.prior.mean + z @ spec.prior._chol.T).reshape(k, m, d)
            g_in = cmodel.evaluate(th_in.reshape(k * m, d), spec.xi, h).reshape(
                k, m, spec.model.q
            )
            # log pi - log q cancels exactly for the identity change of measure
            lw = loglik_from_g(g_in, stats, spec.noise)
            live = np.arange(k)
        else:
            fit = find_map_batch(
                cmodel, spec.prior, spec.noise, spec.xi, h, stats, map_rng,
                scheme=scheme, gtol=map_gtol, max_iter=map_max_iter,
            )
            flagged += int(np.count_nonzero(~fit["converged"]))
            th_hat = fit["theta"]

            jg = grad_g_batch(cmodel, th_hat, spec.xi, h, scheme, box=spec.prior.box)
            prec = spec.n_e * np.einsum(
                "aqd,q,aqe->ade", jg, spec.noise.inv_var, jg
            ) - hess_prior
            cov, logdet_cov, ok = precision_to_cov_batch(prec)
            excluded += int(np.count_nonzero(~ok))
            cov_safe = np.where(ok[:, None, None], cov, np.eye(d))
            logdet_safe = np.where(ok, logdet_cov, 0.0)
            th_in, logq = sample_proposal_batch(
                spec.prior, th_hat, cov_safe, logdet_safe, inner_rng, m
            )
            live = np.where(ok)[0]
            if live.size == 0:
                acc.add(terms[np.isfinite(terms)])
                if keep_terms:
                    terms_out.append(terms)
                continue
            th_in, logq = th_in[live], logq[live]
            logpi = spec.prior.logpdf(th_in.reshape(-1, d)).reshape(live.size, m)
            support = np.isfinite(logpi)

            ll_in = np.full((live.size, m), -np.inf)
            if support.any():
                flat_pts = th_in.reshape(-1, d)[support.ravel()]
                g_in = cmodel.evaluate(flat_pts, spec.xi, h)
                g_full = np.zeros((live.size * m, spec.model.q))
                g_full[support.ravel()] = g_in
                ll_full = loglik_from_g(
                    g_full.reshape(live.size, m, spec.model.q),
                    DataStats(s1=stats.s1[live], s2=stats.s2[live], n_e=stats.n_e),
                    spec.noise,
                )
                ll_in[support] = ll_full[support]

            lw = ll_in + logpi - logq

        lme, dead = _log_mean_exp_rows(lw)
        underflow += int(np.count_nonzero(np.max(lw, axis=1) < LOG_TINY))
        excluded += int(np.count_nonzero(dead))
        good = ~dead
        terms[live[good]] = ll0[live[good]] - lme[good]

        acc.add(terms[np.isfinite(terms)])
        if keep_terms:
            terms_out.append(terms)

    return EigEstimate(
        value=acc.mean,
        std_error=acc.sem,
        underflow_count=underflow,
        work_units=tally.units,
        n_evals=tally.n_evals,
        n_outer=n,
        n_excluded=excluded,
        n_flagged=flagged,
        per_outer_terms=np.concatenate(terms_out) if keep_terms else None,
    )


ESTIMATORS = {"dlmc": dlmc, "mcla": mcla, "dlmcis": dlmcis}


def run_estimator(
    name: str,
    spec: ExperimentSpec,
    setting: EstimatorSetting,
    seed: int,
    **kwargs,
) -> EigEstimate:
    """Dispatch an estimator by name."""
    try:
        fn = ESTIMATORS[name]
    except KeyError:
        raise KeyError(f"unknown estimator {name!r}; expected one of {sorted(ESTIMATORS)}")
    return fn(spec, setting, seed, **kwargs)
