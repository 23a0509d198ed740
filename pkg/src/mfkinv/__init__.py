"""Derivative-free Bayesian inversion via mean-field Kalman iterations.

Unscented (UKI-1, UKI-2), stochastic ensemble (EKI) and square-root ensemble
(EAKI, ETKI) methods, transport-filter baselines, MCMC reference samplers and
benchmark problems.
"""
from mfkinv.baselines import TRANSPORT_VARIANTS, TransportConfig, gaussian_init_correction, run_transport, transport_step
from mfkinv.core import (
    Ensemble,
    GaussianBelief,
    InverseProblem,
    ensemble_moments,
    gaussian_posterior_linear,
    relative_error,
    spd_sqrt,
)
from mfkinv.darcy import DarcyInstance, DarcySolver, darcy_instance, darcy_solve
from mfkinv.errors import *  # noqa: F401,F403
from mfkinv.mcmc import ChainConfig, ChainResult, pcn_sample, rwm_sample
from mfkinv.meanfield import AugmentedSystem, build_augmented, inflate
from mfkinv.methods import (
    METHODS,
    IterationRecord,
    MethodState,
    RunConfig,
    eaki_step,
    eki_step,
    etki_step,
    run,
    sigma_points_uki1,
    sigma_points_uki2,
    uki_step,
)
from mfkinv.problems import elliptic_problem, hilbert_problem, linear_problem
from mfkinv.strategies import BoxTransform, LowRankMap, bifidelity_wrap, box_wrap, lowrank_wrap

__version__ = "0.1.0"
