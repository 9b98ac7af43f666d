"""Learned loss families, per-instance fitting and feature-based parameterization."""

from .families import (
    DQUAD, DWMSE, FAMILIES, LEARNED_FAMILIES, LZ, MSE, QUAD, WMSE,
    InstanceLosses, LossParams, canonical_family, loss_eval, loss_grad,
)
from .lodl import FitConfig, closed_form_scalar_weight, fit_lodl, fit_lodl_batch, stack_samples
from .fbp import FbpConfig, FbpNetwork, fit_fbp, fbp_fit_error, induced_losses, induced_params, label_features
from .consistency import CounterexampleReport, optimal_wmse_prediction, run_counterexample

__all__ = [
    "DQUAD", "DWMSE", "FAMILIES", "LEARNED_FAMILIES", "LZ", "MSE", "QUAD", "WMSE",
    "InstanceLosses", "LossParams", "canonical_family", "loss_eval", "loss_grad",
    "FitConfig", "closed_form_scalar_weight", "fit_lodl", "fit_lodl_batch", "stack_samples",
    "FbpConfig", "FbpNetwork", "fit_fbp", "fbp_fit_error", "induced_losses", "induced_params",
    "label_features", "CounterexampleReport", "optimal_wmse_prediction", "run_counterexample",
]
