"""MAP estimation, finite-difference Jacobians, and the Laplace proposal.

The Gauss-Newton MAP solver is written batched: a whole vector of
independent datasets is fit simultaneously with masked iterations, which
is what makes the importance-sampling estimator affordable at millions of
outer samples.  A single fit is just a batch of one.

For box (uniform) priors in one dimension the proposal is the Gaussian
truncated to the box, renormalized: centering at a boundary MAP would
otherwise throw away up to half of the inner samples as zero-weight
draws, which inflates the inner variance by orders of magnitude for
nothing.  The truncated proposal changes no expectation, only variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .core import DataStats, Dataset, ExperimentSpec, NoiseModel, substream
from .models import CountingModel, WorkTally

__all__ = [
    "FdScheme",
    "LaplaceFit",
    "SingularPrecisionError",
    "StepUnderflowError",
    "GaussianProposal",
    "jacobian",
    "find_map",
    "laplace_covariance",
    "laplace_fit",
]

_EPS = np.finfo(float).eps


class SingularPrecisionError(np.linalg.LinAlgError):
    """Posterior precision is singular or indefinite; carries its spectrum."""

    def __init__(self, message: str, spectrum=None):
        super().__init__(message)
        self.spectrum = spectrum


class StepUnderflowError(ValueError):
    """A finite-difference step vanished for some component."""


@dataclass(frozen=True)
class FdScheme:
    """Finite-difference scheme: forward, backward, or central differences."""

    kind: str = "central"
    step: float | None = None

    def __post_init__(self):
        if self.kind not in ("forward", "backward", "central"):
            raise ValueError(f"unknown finite-difference kind {self.kind!r}")
        if self.step is not None and self.step <= 0:
            raise ValueError("step must be positive")

    @property
    def rel_step(self) -> float:
        if self.step is not None:
            return self.step
        # optimal scalings for first/second order accurate differences
        return _EPS ** (1.0 / 3.0) if self.kind == "central" else math.sqrt(_EPS)

    def n_jac(self, d: int) -> int:
        return 2 * d if self.kind == "central" else d + 1


@dataclass(frozen=True)
class LaplaceFit:
    """MAP point with Gaussian (Laplace) curvature information."""

    theta_hat: np.ndarray
    cov: np.ndarray | None
    log_det_cov: float | None
    iterations: int
    converged: bool
    n_evals: int
    boundary: bool = False
    objective: float = math.nan
    trace: tuple | None = None


@dataclass(frozen=True)
class GaussianProposal:
    """Exact multivariate normal proposal N(mean, cov)."""

    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray
    log_det_cov: float

    @classmethod
    def from_fit(cls, fit: LaplaceFit) -> "GaussianProposal":
        chol = np.linalg.cholesky(fit.cov)
        return cls(mean=fit.theta_hat, cov=fit.cov, chol=chol,
                   log_det_cov=fit.log_det_cov)

    @property
    def d(self) -> int:
        return self.mean.shape[0]

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        z = rng.standard_normal((n, self.d))
        return self.mean + z @ self.chol.T

    def logpdf(self, theta: np.ndarray) -> np.ndarray:
        theta = np.atleast_2d(theta)
        u = np.linalg.solve(self.chol, (theta - self.mean).T).T
        return -0.5 * (
            self.d * math.log(2.0 * math.pi)
            + self.log_det_cov
            + np.einsum("nd,nd->n", u, u)
        )


# ---------------------------------------------------------------------------
# Finite-difference Jacobians
# ---------------------------------------------------------------------------

def grad_g_batch(
    cmodel: CountingModel,
    theta: np.ndarray,
    xi: float,
    h: float | None,
    scheme: FdScheme,
    box=None,
    base_g: np.ndarray | None = None,
) -> np.ndarray:
    """Batched finite-difference gradient of g, shape (n, d) -> (n, q, d).

    Steps are clipped at box edges (the scheme degrades to one-sided
    there) and the achieved spread is used in the divisor.
    """
    theta = np.atleast_2d(theta)
    n, d = theta.shape
    step = scheme.rel_step * np.maximum(1.0, np.abs(theta))
    cols = []
    if scheme.kind != "central" and base_g is None:
        base_g = cmodel.evaluate(theta, xi, h)
    for j in range(d):
        tp = theta.copy()
        tm = theta.copy()
        if scheme.kind == "central":
            tp[:, j] = theta[:, j] + step[:, j]
            tm[:, j] = theta[:, j] - step[:, j]
        elif scheme.kind == "forward":
            tp[:, j] = theta[:, j] + step[:, j]
        else:  # backward
            tm[:, j] = theta[:, j] - step[:, j]
        if box is not None:
            lo, hi = box
            tp[:, j] = np.minimum(tp[:, j], hi[j])
            tm[:, j] = np.maximum(tm[:, j], lo[j])
        spread = tp[:, j] - tm[:, j]
        if np.any(spread <= 0.0):
            bad = int(np.argmax(spread <= 0.0))
            raise StepUnderflowError(
                f"finite-difference step vanished for component {j} "
                f"(theta[{bad},{j}]={theta[bad, j]!r})"
            )
        gp = cmodel.evaluate(tp, xi, h) if scheme.kind != "backward" else base_g
        gm = cmodel.evaluate(tm, xi, h) if scheme.kind != "forward" else base_g
        cols.append((gp - gm) / spread[:, None])
    return np.stack(cols, axis=2)


def jacobian(
    spec: ExperimentSpec,
    theta,
    scheme: FdScheme | None = None,
    h: float | None = None,
) -> tuple[np.ndarray, int]:
    """Finite-difference Jacobian J(theta) = -grad_theta g, with its eval count."""
    scheme = scheme or FdScheme()
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    tally = WorkTally(spec.model)
    cmodel = CountingModel(spec.model, tally)
    gg = grad_g_batch(
        cmodel, theta[None, :], spec.xi, h, scheme, box=spec.prior.box
    )
    return -gg[0], tally.n_evals


# ---------------------------------------------------------------------------
# Batched Gauss-Newton MAP
# ---------------------------------------------------------------------------

def _objective_batch(g, theta, stats, noise: NoiseModel, prior):
    ivar = noise.inv_var
    quad = stats.s2 - 2.0 * np.einsum("nq,nq->n", g * ivar, stats.s1) + (
        stats.n_e * np.einsum("nq,q->n", g**2, ivar)
    )
    return 0.5 * quad - prior.logpdf(theta)


def _solve_spd_batch(H, rhs):
    """Solve H x = rhs for stacked (n, d, d) systems with jitter fallback."""
    try:
        return np.linalg.solve(H, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        d = H.shape[-1]
        jitter = 1e-10 * np.maximum(1.0, np.einsum("ndd->n", np.abs(H)))
        for _ in range(12):
            try:
                Hj = H + jitter[:, None, None] * np.eye(d)
                return np.linalg.solve(Hj, rhs[..., None])[..., 0]
            except np.linalg.LinAlgError:
                jitter = jitter * 10.0
        raise


def minimize_map_batch(
    cmodel: CountingModel,
    prior,
    noise: NoiseModel,
    xi: float,
    h: float | None,
    stats: DataStats,
    theta0: np.ndarray,
    scheme: FdScheme | None = None,
    gtol: float = 1.0e-8,
    max_iter: int = 60,
    keep_trace: bool = False,
):
    """Projected Gauss-Newton over a batch of independent MAP problems.

    Minimizes F(theta) = 0.5 * sum_i ||y_i - g(theta)||^2_Sigma^-1 - log pi(theta)
    for every row of ``theta0``, with backtracking line search and box
    projection for uniform priors.  Returns a dict of per-row results.
    """
    scheme = scheme or FdScheme()
    box = prior.box
    hess_prior = prior.hess_logpdf()
    n, d = np.atleast_2d(theta0).shape

    def clip(t):
        if box is None:
            return t
        return np.clip(t, box[0], box[1])

    theta = clip(np.atleast_2d(theta0).astype(float).copy())
    g = cmodel.evaluate(theta, xi, h)
    F = _objective_batch(g, theta, stats, noise, prior)
    active = np.ones(n, dtype=bool)
    converged = np.zeros(n, dtype=bool)
    iters = np.zeros(n, dtype=int)
    trace = [F.copy()] if keep_trace else None

    def sub_stats(idx):
        return DataStats(s1=stats.s1[idx], s2=stats.s2[idx], n_e=stats.n_e)

    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.where(active)[0]
        st = sub_stats(idx)
        Jg = grad_g_batch(cmodel, theta[idx], xi, h, scheme, box=box, base_g=g[idx])
        resid = st.s1 * noise.inv_var - st.n_e * (g[idx] * noise.inv_var)
        grad = -np.einsum("aqd,aq->ad", Jg, resid) - prior.grad_logpdf(theta[idx])

        # projected-gradient convergence test (blocked directions zeroed)
        pgrad = grad.copy()
        if box is not None:
            at_lo = theta[idx] <= box[0] + 1e-14 * (1.0 + np.abs(box[0]))
            at_hi = theta[idx] >= box[1] - 1e-14 * (1.0 + np.abs(box[1]))
            pgrad[at_lo & (pgrad > 0)] = 0.0
            pgrad[at_hi & (pgrad < 0)] = 0.0
        done = np.max(np.abs(pgrad), axis=1) <= gtol * (1.0 + np.abs(F[idx]))
        converged[idx[done]] = True
        active[idx[done]] = False
        if done.all():
            break
        keep = ~done
        idx = idx[keep]
        Jg, grad = Jg[keep], grad[keep]
        st = sub_stats(idx)

        H = st.n_e * np.einsum("aqd,q,aqe->ade", Jg, noise.inv_var, Jg) - hess_prior
        delta = _solve_spd_batch(H, -grad)
        m_slope = np.einsum("ad,ad->a", grad, delta)

        t = np.ones(len(idx))
        accepted = np.zeros(len(idx), dtype=bool)
        theta_new = theta[idx].copy()
        g_new = g[idx].copy()
        F_new = F[idx].copy()
        for _ls in range(30):
            trial = np.where(~accepted)[0]
            if trial.size == 0:
                break
            cand = clip(theta[idx[trial]] + t[trial, None] * delta[trial])
            g_c = cmodel.evaluate(cand, xi, h)
            F_c = _objective_batch(g_c, cand, sub_stats(idx[trial]), noise, prior)
            ok = F_c <= F[idx[trial]] + 1e-4 * t[trial] * np.minimum(m_slope[trial], 0.0)
            ok |= F_c < F[idx[trial]]
            hit = trial[ok]
            accepted[hit] = True
            theta_new[hit] = cand[ok]
            g_new[hit] = g_c[ok]
            F_new[hit] = F_c[ok]
            t[trial[~ok]] *= 0.5
        # rows that never improved have stalled; retire them where they stand
        stalled = ~accepted
        step_len = np.max(np.abs(theta_new - theta[idx]), axis=1)
        theta[idx] = theta_new
        g[idx] = g_new
        F[idx] = F_new
        iters[idx] += 1
        tiny = step_len <= 1e-13 * (1.0 + np.max(np.abs(theta_new), axis=1))
        retire = stalled | tiny
        # a vanishing accepted step is converged; a failed line search is not
        converged[idx[retire]] = (tiny & ~stalled)[retire]
        active[idx[retire]] = False
        if keep_trace:
            trace.append(F.copy())

    boundary = np.zeros(n, dtype=bool)
    if box is not None:
        lo, hi = box
        tol = 1e-12 * (1.0 + np.abs(hi - lo))
        boundary = np.any((theta <= lo + tol) | (theta >= hi - tol), axis=1)

    return {
        "theta": theta,
        "objective": F,
        "g": g,
        "iterations": iters,
        "converged": converged,
        "boundary": boundary,
        "trace": trace,
    }


def find_map_batch(
    cmodel: CountingModel,
    prior,
    noise: NoiseModel,
    xi: float,
    h: float | None,
    stats: DataStats,
    rng: np.random.Generator,
    scheme: FdScheme | None = None,
    n_extra_starts: int = 2,
    gtol: float = 1.0e-8,
    max_iter: int = 60,
):
    """Multistart batched MAP: prior mean plus ``n_extra_starts`` prior draws."""
    n = stats.s1.shape[0]
    d = prior.d
    starts = [np.broadcast_to(np.asarray(prior.mean, dtype=float), (n, d))]
    for _ in range(n_extra_starts):
        starts.append(prior.sample(rng, n))
    s = len(starts)
    theta0 = np.concatenate(starts, axis=0)
    stats_tiled = DataStats(
        s1=np.tile(stats.s1, (s, 1)), s2=np.tile(stats.s2, s), n_e=stats.n_e
    )
    res = minimize_map_batch(
        cmodel, prior, noise, xi, h, stats_tiled, theta0,
        scheme=scheme, gtol=gtol, max_iter=max_iter,
    )
    Fs = res["objective"].reshape(s, n)
    best = np.argmin(Fs, axis=0)
    take = best * n + np.arange(n)
    return {
        "theta": res["theta"][take],
        "objective": res["objective"][take],
        "iterations": res["iterations"].reshape(s, n).sum(axis=0),
        "converged": res["converged"][take],
        "boundary": res["boundary"][take],
    }


def find_map(
    spec: ExperimentSpec,
    data: Dataset,
    seed: int = 0,
    h: float | None = None,
    scheme: FdScheme | None = None,
    n_extra_starts: int = 2,
    gtol: float = 1.0e-8,
    max_iter: int = 60,
    keep_trace: bool = False,
) -> LaplaceFit:
    """MAP estimate for one dataset (multistart Gauss-Newton).

    The returned fit carries the eval count and convergence diagnostics;
    covariance fields are filled by :func:`laplace_fit`.
    """
    if data.y.shape[0] < 1:
        raise ValueError("dataset must be nonempty")
    tally = WorkTally(spec.model)
    cmodel = CountingModel(spec.model, tally)
    stats = DataStats.from_y(data.y, spec.noise)
    rng = substream(seed, 3)
    if keep_trace:
        res = minimize_map_batch(
            cmodel, spec.prior, spec.noise, spec.xi, h, stats,
            np.asarray(spec.prior.mean, dtype=float)[None, :],
            scheme=scheme, gtol=gtol, max_iter=max_iter, keep_trace=True,
        )
        trace = tuple(float(f[0]) for f in res["trace"])
        res = {k: v for k, v in res.items() if k != "trace"}
        res["iterations"] = res["iterations"]
    else:
        res = find_map_batch(
            cmodel, spec.prior, spec.noise, spec.xi, h, stats, rng,
            scheme=scheme, n_extra_starts=n_extra_starts,
            gtol=gtol, max_iter=max_iter,
        )
        trace = None
    return LaplaceFit(
        theta_hat=res["theta"][0],
        cov=None,
        log_det_cov=None,
        iterations=int(res["iterations"][0]),
        converged=bool(res["converged"][0]),
        n_evals=tally.n_evals,
        boundary=bool(res["boundary"][0]),
        objective=float(res["objective"][0]),
        trace=trace,
    )


# ---------------------------------------------------------------------------
# Laplace covariance
# ---------------------------------------------------------------------------

def precision_to_cov_batch(prec: np.ndarray):
    """Invert stacked SPD precision matrices; returns (cov, log_det_cov, ok)."""
    n, d, _ = prec.shape
    if d == 1:
        p = prec[:, 0, 0]
        ok = p > 0
        cov = np.empty_like(prec)
        logdet = np.empty(n)
        cov[ok, 0, 0] = 1.0 / p[ok]
        logdet[ok] = -np.log(p[ok])
        cov[~ok] = np.nan
        logdet[~ok] = np.nan
        return cov, logdet, ok
    cov = np.full_like(prec, np.nan)
    logdet = np.full(n, np.nan)
    ok = np.zeros(n, dtype=bool)
    eye = np.eye(d)
    try:
        chol = np.linalg.cholesky(prec)
        inv_chol = np.linalg.solve(chol, np.broadcast_to(eye, prec.shape))
        cov = np.einsum("nkd,nke->nde", inv_chol, inv_chol)
        logdet = -2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
        ok[:] = True
        return cov, logdet, ok
    except np.linalg.LinAlgError:
        pass
    for i in range(n):  # rare fallback: isolate failing rows
        try:
            chol = np.linalg.cholesky(prec[i])
            inv_chol = np.linalg.solve(chol, eye)
            cov[i] = inv_chol.T @ inv_chol
            logdet[i] = -2.0 * np.sum(np.log(np.diag(chol)))
            ok[i] = True
        except np.linalg.LinAlgError:
            ok[i] = False
    return cov, logdet, ok


def laplace_covariance(
    spec: ExperimentSpec, theta_hat, jac: np.ndarray
) -> tuple[np.ndarray, float]:
    """Gauss-Newton Laplace covariance (n_e J' Sigma^-1 J - hess log pi)^-1.

    ``jac`` is the q x d Jacobian (either sign convention works since only
    J'J enters).  Raises SingularPrecisionError on an indefinite precision,
    carrying its spectrum, which signals a non-identifiable design.
    """
    theta_hat = np.atleast_1d(np.asarray(theta_hat, dtype=float))
    jac = np.asarray(jac, dtype=float).reshape(spec.model.q, spec.model.d)
    prec = spec.n_e * (jac.T * spec.noise.inv_var) @ jac - spec.prior.hess_logpdf()
    prec = 0.5 * (prec + prec.T)
    cov, logdet, ok = precision_to_cov_batch(prec[None, :, :])
    if not ok[0]:
        raise SingularPrecisionError(
            "Laplace precision matrix is singular or indefinite",
            spectrum=np.linalg.eigvalsh(prec),
        )
    return cov[0], float(logdet[0])


def sample_proposal_batch(
    prior,
    th_hat: np.ndarray,
    cov: np.ndarray,
    logdet_cov: np.ndarray,
    rng: np.random.Generator,
    m: int,
):
    """Draw m proposal points per fitted outer sample; returns (points, logq).

    ``th_hat`` is (n, d), ``cov`` is (n, d, d).  For 1-D box priors the
    proposal is the box-truncated normal (all draws in support); otherwise
    it is the plain Gaussian and draws may land outside the prior support.
    """
    n, d = th_hat.shape
    log2pi = math.log(2.0 * math.pi)
    box = prior.box
    if box is not None and d == 1:
        lo, hi = float(box[0][0]), float(box[1][0])
        mu = th_hat[:, 0]
        sd = np.sqrt(cov[:, 0, 0])
        cdf_lo = ndtr((lo - mu) / sd)
        cdf_hi = ndtr((hi - mu) / sd)
        z_mass = cdf_hi - cdf_lo
        u = rng.random((n, m))
        zt = ndtri(cdf_lo[:, None] + u * z_mass[:, None])
        pts = (mu[:, None] + sd[:, None] * np.clip(zt, -38.0, 38.0))[..., None]
        np.clip(pts, lo, hi, out=pts)
        logq = (
            -0.5 * (log2pi + logdet_cov)[:, None]
            - 0.5 * zt**2
            - np.log(z_mass)[:, None]
        )
        return pts, logq
    z = rng.standard_normal((n, m, d))
    if d == 1:
        pts = th_hat[:, None, :] + z * np.sqrt(cov)[:, None, 0, 0, None]
    else:
        chol = np.linalg.cholesky(cov)
        pts = th_hat[:, None, :] + np.einsum("nmd,ned->nme", z, chol)
    logq = (
        -0.5 * (d * log2pi + logdet_cov)[:, None]
        - 0.5 * np.einsum("nmd,nmd->nm", z, z)
    )
    return pts, logq


def laplace_fit(
    spec: ExperimentSpec,
    data: Dataset,
    seed: int = 0,
    h: float | None = None,
    scheme: FdScheme | None = None,
) -> LaplaceFit:
    """MAP plus covariance: the complete Laplace fit for one dataset."""
    fit = find_map(spec, data, seed=seed, h=h, scheme=scheme)
    jac_mat, n_ev = jacobian(spec, fit.theta_hat, scheme=scheme, h=h)
    cov, logdet = laplace_covariance(spec, fit.theta_hat, jac_mat)
    return LaplaceFit(
        theta_hat=fit.theta_hat,
        cov=cov,
        log_det_cov=logdet,
        iterations=fit.iterations,
        converged=fit.converged,
        n_evals=fit.n_evals + n_ev,
        boundary=fit.boundary,
        objective=fit.objective,
        trace=fit.trace,
    )
