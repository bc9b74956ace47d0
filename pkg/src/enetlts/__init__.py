"""Robust and sparse multinomial regression by trimmed elastic-net likelihood."""

from .data import Dataset, GroupQuota, stratified_folds, stratified_sizes
from .estimator import EnetLTSConfig, ModelFit, fit_enet_cv, fit_enetlts
from .preprocess import ScalingInfo, backtransform, robust_standardize, subset_standardize
from .scores import groupwise_outlyingness, mcd_estimate
from .solver import PenaltyParams, fit_penalized, kkt_residual

__version__ = "0.1.0"
