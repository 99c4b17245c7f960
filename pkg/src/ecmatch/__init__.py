"""Augmenting a randomized trial's control arm with matched external controls."""

__version__ = "0.1.0"

from .data import DataError, Schema, Subject, TrialDataset, load_dataset, save_dataset, summarize
from .diagnostics import balance_report
from .estimators import (
    EffectEstimate, bootstrap_se, confidence_interval, nc_estimate, raw_estimate,
    simple_se, weighted_estimate,
)
from .matching import distance_matrix, greedy_match, nc_match, optimal_match
from .propensity import PropensityModel, fit_propensity, linear_predictor, probability

__all__ = [
    "DataError", "EffectEstimate", "PropensityModel", "Schema", "Subject", "TrialDataset",
    "balance_report", "bootstrap_se", "confidence_interval", "distance_matrix",
    "fit_propensity", "greedy_match", "linear_predictor", "load_dataset", "nc_estimate",
    "nc_match", "optimal_match", "probability", "raw_estimate", "save_dataset",
    "simple_se", "summarize", "weighted_estimate",
]
