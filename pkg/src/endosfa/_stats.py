"""Small numerical helpers for normal cdf/pdf work in log space."""
import numpy as np
from scipy.special import expit, log_ndtr, ndtr

LOG_2PI = np.log(2.0 * np.pi)
LOG_SQRT_2PI = 0.5 * LOG_2PI

__all__ = ["LOG_2PI", "LOG_SQRT_2PI", "log_ndtr", "ndtr", "expit", "log_norm_pdf",
           "log_ratio_ndtr"]


def log_norm_pdf(x):
    x = np.asarray(x, dtype=float)
    return -0.5 * x * x - LOG_SQRT_2PI


def log_ratio_ndtr(a, b):
    """log(Phi(a) / Phi(b)), finite whenever both arguments are finite."""
    return log_ndtr(a) - log_ndtr(b)
