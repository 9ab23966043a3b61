"""Forward models, the model registry, and work accounting.

A forward model maps a parameter vector ``theta`` and a scalar design
``xi`` to a vector of responses.  Models may optionally support a mesh
parameter ``h``: evaluating at finite ``h`` is cheaper-but-biased, with
bias decaying like ``h**eta`` and cost growing like ``h**-gamma``.
``h=None`` always means the exact (mesh-free) model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "ExperimentModel",
    "ModelBundle",
    "ModelEvaluationError",
    "WorkTally",
    "CountingModel",
    "build_model",
    "registry_names",
]


class ModelEvaluationError(RuntimeError):
    """Raised when a forward-model evaluation fails; carries the offending theta."""

    def __init__(self, message: str, theta=None):
        super().__init__(message)
        self.theta = theta


@dataclass(frozen=True)
class ExperimentModel:
    """Deterministic forward map ``g(theta, xi)`` with optional mesh support.

    Parameters
    ----------
    name : str
        Registry name of the model.
    d : int
        Parameter dimension.
    q : int
        Response dimension.
    eval_fn : callable
        Vectorized map ``(theta (n, d), xi, h) -> (n, q)``.  ``h=None``
        requests the exact model.
    work_exponent : float
        Cost rate gamma: one evaluation at mesh ``h`` costs ``h**-gamma``
        work units (1 unit when ``h=None``).
    convergence_rate : float
        Mesh bias rate eta (``|g_h - g| = O(h**eta)``).
    meshed : bool
        Whether finite ``h`` values are meaningful for this model.
    analytic_jacobian : callable or None
        Optional ``(theta (n, d), xi) -> (n, q, d)`` giving grad_theta g.
    design_bounds : tuple or None
        Inclusive ``(lo, hi)`` bounds of the admissible designs, or None
        for an unrestricted design space.
    """

    name: str
    d: int
    q: int
    eval_fn: Callable[[np.ndarray, float, float | None], np.ndarray]
    work_exponent: float = 0.0
    convergence_rate: float = 1.0
    meshed: bool = False
    analytic_jacobian: Callable[[np.ndarray, float], np.ndarray] | None = None
    design_bounds: tuple[float, float] | None = None

    def evaluate(self, theta: np.ndarray, xi: float, h: float | None = None) -> np.ndarray:
        """Evaluate ``g_h`` on a batch of parameters, shape (n, d) -> (n, q)."""
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        if theta.shape[1] != self.d:
            raise ModelEvaluationError(
                f"theta has dimension {theta.shape[1]}, model '{self.name}' expects {self.d}",
                theta=theta,
            )
        try:
            out = self.eval_fn(theta, xi, h)
        except Exception as exc:  # pragma: no cover - defensive wrapping
            raise ModelEvaluationError(
                f"evaluation of model '{self.name}' failed: {exc}", theta=theta
            ) from exc
        out = np.asarray(out, dtype=float)
        if out.shape != (theta.shape[0], self.q):
            raise ModelEvaluationError(
                f"model '{self.name}' returned shape {out.shape}, "
                f"expected {(theta.shape[0], self.q)}",
                theta=theta,
            )
        if not np.all(np.isfinite(out)):
            bad = theta[~np.all(np.isfinite(out), axis=1)][:1]
            raise ModelEvaluationError(
                f"model '{self.name}' returned non-finite values", theta=bad
            )
        return out

    def work_per_eval(self, h: float | None) -> float:
        """Work units of a single evaluation at mesh ``h``."""
        if h is None:
            return 1.0
        return float(h) ** (-self.work_exponent)

    def design_ok(self, xi: float) -> bool:
        if self.design_bounds is None:
            return True
        lo, hi = self.design_bounds
        return lo <= xi <= hi


class WorkTally:
    """Accumulates gamma-weighted model evaluations, grouped by mesh value."""

    def __init__(self, model: ExperimentModel):
        self._model = model
        self.counts: dict[float | None, int] = {}

    def add(self, h: float | None, n: int) -> None:
        self.counts[h] = self.counts.get(h, 0) + int(n)

    @property
    def n_evals(self) -> int:
        return sum(self.counts.values())

    @property
    def units(self) -> float:
        return float(
            sum(n * self._model.work_per_eval(h) for h, n in self.counts.items())
        )

    def merge(self, other: "WorkTally") -> None:
        for h, n in other.counts.items():
            self.add(h, n)


class CountingModel:
    """Wraps an ExperimentModel so every evaluation is charged to a tally."""

    def __init__(self, model: ExperimentModel, tally: WorkTally | None = None):
        self.model = model
        self.tally = tally if tally is not None else WorkTally(model)

    def evaluate(self, theta: np.ndarray, xi: float, h: float | None = None) -> np.ndarray:
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        self.tally.add(h, theta.shape[0])
        return self.model.evaluate(theta, xi, h)

    @property
    def d(self) -> int:
        return self.model.d

    @property
    def q(self) -> int:
        return self.model.q


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelBundle:
    """A registry entry: the model plus its default prior/noise settings."""

    model: ExperimentModel
    default_prior: dict = field(default_factory=dict)
    # maps a design xi to the default per-component noise variances (q,)
    default_noise_var: Callable[[float], np.ndarray] | None = None


def _linear_scalar(params: dict) -> ModelBundle:
    def eval_fn(theta, xi, h):
        return theta[:, :1] * (1.0 + xi) ** 2

    def jac_fn(theta, xi):
        n = theta.shape[0]
        return np.full((n, 1, 1), (1.0 + xi) ** 2)

    model = ExperimentModel(
        name="linear-scalar",
        d=1,
        q=1,
        eval_fn=eval_fn,
        analytic_jacobian=jac_fn,
    )

    def noise_var(xi):
        sd = 2.0 + (xi - 10.0) / 10.0
        return np.array([sd**2])

    return ModelBundle(
        model=model,
        default_prior={"kind": "normal", "mean": [1.0], "cov": [[0.01]]},
        default_noise_var=noise_var,
    )


def _nonlinear_scalar(params: dict) -> ModelBundle:
    def eval_fn(theta, xi, h):
        t = theta[:, :1]
        return t**3 * xi**2 + t * np.exp(-abs(0.2 - xi))

    def jac_fn(theta, xi):
        t = theta[:, :1]
        return (3.0 * t**2 * xi**2 + np.exp(-abs(0.2 - xi)))[:, :, None]

    model = ExperimentModel(
        name="nonlinear-scalar",
        d=1,
        q=1,
        eval_fn=eval_fn,
        analytic_jacobian=jac_fn,
    )

    def noise_var(xi):
        return np.array([1.0e-3])

    return ModelBundle(
        model=model,
        default_prior={"kind": "uniform", "lower": [0.0], "upper": [1.0]},
        default_noise_var=noise_var,
    )


def _synthetic_mesh(params: dict) -> ModelBundle:
    """Discretized wrapper g_h = g * (1 + c_bias * h**eta) around a base model.

    The multiplicative form makes eta and gamma exactly known, so every
    h-dependent tuning formula can be exercised without a PDE solver.
    """
    base_name = params.get("base", "nonlinear-scalar")
    if base_name == "synthetic-mesh":
        raise ValueError("synthetic-mesh cannot wrap itself")
    base = build_model(base_name, {})
    c_bias = float(params.get("c_bias", 0.1))
    eta = float(params.get("eta", 1.0))
    gamma = float(params.get("gamma", 1.0))
    if eta <= 0 or gamma < 0:
        raise ValueError("synthetic-mesh requires eta > 0 and gamma >= 0")

    base_eval = base.model.eval_fn

    def eval_fn(theta, xi, h):
        g = base_eval(theta, xi, None)
        if h is None:
            return g
        return g * (1.0 + c_bias * float(h) ** eta)

    def jac_fn(theta, xi):
        return base.model.analytic_jacobian(theta, xi)

    model = ExperimentModel(
        name="synthetic-mesh",
        d=base.model.d,
        q=base.model.q,
        eval_fn=eval_fn,
        work_exponent=gamma,
        convergence_rate=eta,
        meshed=True,
        analytic_jacobian=jac_fn if base.model.analytic_jacobian else None,
        design_bounds=base.model.design_bounds,
    )
    return ModelBundle(
        model=model,
        default_prior=base.default_prior,
        default_noise_var=base.default_noise_var,
    )


_REGISTRY: dict[str, Callable[[dict], ModelBundle]] = {
    "linear-scalar": _linear_scalar,
    "nonlinear-scalar": _nonlinear_scalar,
    "synthetic-mesh": _synthetic_mesh,
}


def registry_names() -> list[str]:
    return sorted(_REGISTRY)


def build_model(name: str, params: dict | None = None) -> ModelBundle:
    """Instantiate a registered model bundle by name."""
    if name not in _REGISTRY:
        raise KeyError(
            f"unknown model '{name}'; available: {', '.join(registry_names())}"
        )
    return _REGISTRY[name](dict(params or {}))
