"""eigtune: expected-information-gain estimation with work-optimal tuning.

Estimators for the expected information gain of a proposed experiment
under a Bayesian model with additive Gaussian noise (DLMC, MCLA, DLMCIS),
plus a tuner that picks each estimator's sample counts, mesh parameter,
and error split to minimize average computational work at a target
tolerance and confidence level.
"""

from .core import (
    Dataset,
    ExperimentSpec,
    NoiseModel,
    NormalPrior,
    UniformPrior,
    log_likelihood,
    loglik_decomposition,
    make_prior,
    simulate_data,
)
from .estimators import (
    EigEstimate,
    EstimatorSetting,
    dlmc,
    dlmcis,
    kl_gaussian_1d,
    log_mean_exp,
    mcla,
    run_estimator,
)
from .laplace import FdScheme, GaussianProposal, LaplaceFit, find_map, jacobian, laplace_covariance, laplace_fit
from .models import ExperimentModel, build_model, registry_names
from .oracles import QuadratureRule, linear_gaussian_eig, quadrature_eig, quadrature_evidence
from .tuner import (
    OptimalSetting,
    PilotConstants,
    estimate_constants_dlmc,
    estimate_constants_dlmcis,
    estimate_constants_mcla,
    numeric_fallback,
    optimal_setting,
    optimal_setting_dlmc,
    optimal_setting_dlmcis,
    optimal_setting_mcla,
)

__version__ = "0.1.0"
