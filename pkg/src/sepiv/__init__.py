"""Nonparametric IV inference for the ATT under a logit-separable treatment
choice model: fixed-point identification, EIF-based cross-fitted estimation,
falsification diagnostics, quantile-effect inference, and simulators."""

from .core import (
    Dataset,
    ObservedRow,
    OutcomeGrid,
    RunConfig,
    SepIVError,
    make_outcome_grid,
    validate,
)
from .diagnostics import FalsificationReport, QttInterval, falsify_direct, falsify_ks, qtt_ci
from .dgp import (
    SimOutput,
    oracle_truth,
    simulate,
    simulate_binary,
    simulate_choice_model,
    simulate_continuous,
)
from .eif import CounterfactualLaw, OmegaParts, counterfactual_law, eif_phi, mu_star, omega_star, solve_BC
from .estimator import (
    EstimateResult,
    crossfit_att,
    est_2sls,
    est_ignorability_aipw,
    est_ols,
    median_adjust,
)
from .fixedpoint import GStar, OddsPair, divergence, psi_map, recover_odds, solve_gstar
from .nuisance import (
    NuisanceTheta,
    TabularTheta,
    density_ratio,
    fit_instrument_model,
    fit_outcome_model,
    fit_theta,
    fit_treatment_model,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
