"""Expectation propagation for spatio-temporal spike-and-slab priors.

The support of a D x T coefficient matrix is driven by a latent Gaussian
process Gamma through a probit link; inference alternates site refinements
for the likelihood, the spike-and-slab factor and the link factor.
"""
from .engine import EPConfig, EPResult, log_marginal_likelihood, run_ep, update_global_x
from .errors import InputError, NumericalError, StSpikeError
from .gamma_updaters import (
    CommonPrecisionUpdater,
    FullUpdater,
    GammaPosterior,
    GroupedUpdater,
    LowRankUpdater,
    build_gamma_updater,
)
from .kernels import (
    CoordinateGrid,
    KroneckerCovariance,
    LowRankPlusDiagonal,
    ar1_temporal_kernel,
    kron_matvec,
    low_rank_approximate,
    squared_exponential,
)
from .likelihoods import Problem
from .metrics import Metrics, evaluate, f_measure, nmse, omp, oracle_ridge
from .moments import moments_f2, moments_f3
from .prior import (
    GammaPriorSpec,
    KernelFactor,
    PriorSample,
    SlabParams,
    build_group_map,
    marginal_activation_prob,
    sample_prior,
    sample_prior_conditioned,
)

__version__ = "0.1.0"

__all__ = [
    "CommonPrecisionUpdater", "CoordinateGrid", "EPConfig", "EPResult", "FullUpdater", "GammaPosterior",
    "GammaPriorSpec", "GroupedUpdater", "InputError", "KernelFactor", "KroneckerCovariance", "LowRankPlusDiagonal",
    "LowRankUpdater", "Metrics", "NumericalError", "PriorSample", "Problem", "SlabParams", "StSpikeError",
    "ar1_temporal_kernel", "build_gamma_updater", "build_group_map", "evaluate", "f_measure", "kron_matvec",
    "log_marginal_likelihood", "low_rank_approximate", "marginal_activation_prob", "moments_f2", "moments_f3",
    "nmse", "omp", "oracle_ridge", "run_ep", "sample_prior", "sample_prior_conditioned", "squared_exponential",
    "update_global_x",
]
