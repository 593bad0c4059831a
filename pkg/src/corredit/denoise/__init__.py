"""Noise predictors: a closed-form Gaussian-mixture oracle and a toy attention network."""
from .analytic import NULL, AnalyticScoreModel, analytic_eps, eps_fn_for
from .toy import (
    NULL_CONDITION, ToyArch, ToyDenoiserParams, decode_latent, encode_image, init_params,
    load_params, resolve_layer_threshold, save_params, toy_eps,
)

__all__ = [
    "NULL", "AnalyticScoreModel", "analytic_eps", "eps_fn_for",
    "NULL_CONDITION", "ToyArch", "ToyDenoiserParams", "decode_latent", "encode_image",
    "init_params", "load_params", "resolve_layer_threshold", "save_params", "toy_eps",
]
