"""Differentially smoothed partially synthetic geocoded data."""

from .covariance import CovMatrix, ExponentialKernel, build_cov, corr_inversion_threshold, kernel_eval
from .errors import DiffSmoothError
from .evaluation import (combine_partially_synthetic, fit_analyst_regression, risk_within_epsilon,
                         risk_within_percent)
from .geodata import ColumnSchema, GeoDataset, load_csv, pairwise_distances, suppress, write_csv
from .mcmc import Chain, ChainConfig, PosteriorSample, Priors, fit_restricted, fit_unrestricted, summarize
from .risk import (RiskProfile, alpha_for_gamma, build_profile, continuous_weights, detect_outliers_binary,
                   gamma_for_alpha)
from .simharness import SimConfig, generate_simulated, run_experiment
from .synthesis import SyntheticCollection, predict_surface, synthesize

__version__ = "0.1.0"
