"""Least-squares engine and the closed-form models it fits."""

from .lm import nlls_fit, numeric_jacobian, propagate
from .models import (blinking_envelope, gaussian, gaussian_doublet, model_g2, model_hom,
                     model_hom_co, model_hom_cross, mono_exponential, occupancy, peak_envelope,
                     rabi_envelope, rabi_intensity)
from .routines import (HomFit, fit_g2, fit_gaussian_doublet, fit_hom, fit_lifetime, poisson_refine,
                       fit_rabi_scan, poisson_sigma)

__all__ = [
    "nlls_fit", "numeric_jacobian", "propagate",
    "occupancy", "rabi_envelope", "rabi_intensity", "blinking_envelope", "model_g2", "model_hom",
    "model_hom_co", "model_hom_cross", "mono_exponential", "gaussian", "gaussian_doublet",
    "peak_envelope",
    "fit_rabi_scan", "fit_g2", "fit_hom", "HomFit", "fit_gaussian_doublet", "fit_lifetime",
    "poisson_sigma", "poisson_refine",
]
