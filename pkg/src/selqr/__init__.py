"""Selective inference after randomized l1-penalized smoothed quantile regression."""

__version__ = "0.1.0"

from .kernels import (KernelFamily, KernelSpec, default_bandwidths, default_lambda,  # noqa: E402
                      inference_bandwidth, selection_bandwidth, smoothed_gradient,
                      smoothed_hessian, smoothed_loss)
from .pipeline import (InferenceConfig, InferenceReport, Method, naive_inference,  # noqa: E402
                       selective_inference, splitting_inference)
from .pivot import PivotContext, invert_interval, pivot_value, pvalue, weight_w0  # noqa: E402
from .solver import (RandomizationSpec, kkt_check, solve_randomized_penalized,  # noqa: E402
                     solve_refit)

__all__ = [
    "KernelFamily", "KernelSpec", "default_bandwidths", "default_lambda", "inference_bandwidth",
    "selection_bandwidth", "smoothed_gradient", "smoothed_hessian", "smoothed_loss",
    "InferenceConfig", "InferenceReport", "Method", "naive_inference", "selective_inference",
    "splitting_inference", "PivotContext", "invert_interval", "pivot_value", "pvalue",
    "weight_w0", "RandomizationSpec", "kkt_check", "solve_randomized_penalized", "solve_refit",
]
