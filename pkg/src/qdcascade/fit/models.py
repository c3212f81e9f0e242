"""
Closed-form models fitted by the toolkit.

Delays and decay constants are in ps. Every model takes the evaluation
points first and its parameters as keywords, which is the calling
convention of :func:`qdcascade.fit.nlls_fit`.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import ModelDomainError



def _check_xi(xi):
    if not 0.0 <= xi < 2.0:
        raise ModelDomainError(f"xi must satisfy 0 <= xi < 2, got {xi}")


def _rabi_terms(theta, xi):
    _check_xi(xi)
    theta = np.asarray(theta, dtype=float)
    if np.any(theta < 0):
        raise ModelDomainError("pulse area must be >= 0")
    a = 3.0 * xi / math.sqrt(4.0 - xi * xi)
    pref = 1.0 / (2.0 * (1.0 + 2.0 * xi * xi))
    damp = np.exp(-1.5 * theta * xi)
    return a, pref, damp


def occupancy(theta, xi):
    """Excited-state occupation after a damped Rabi rotation of area ``theta``.

    ``xi`` is the damping rate normalized by the Rabi frequency.
    """
    a, pref, damp = _rabi_terms(theta, xi)
    val = pref * (1.0 - (np.cos(theta) + a * np.sin(theta)) * damp)
    return float(val) if np.ndim(val) == 0 else val


def rabi_envelope(theta, xi):
    """Upper envelope of :func:`occupancy`.

    The oscillating part ``cos + a sin`` has amplitude ``sqrt(1 + a**2)``,
    so the envelope replaces it by that amplitude with flipped sign.
    """
    a, pref, damp = _rabi_terms(theta, xi)
    val = pref * (1.0 + math.sqrt(1.0 + a * a) * damp)
    return float(val) if np.ndim(val) == 0 else val


def rabi_intensity(power, xi, c, scale):
    """Detected intensity ``scale * occupancy(c * power, xi)``."""
    return scale * occupancy(c * np.asarray(power, dtype=float), xi)


def blinking_envelope(tau, m, tau_blink):
    """Telegraph bunching envelope ``1 + m*exp(-|tau|/tau_blink)``."""
    if not tau_blink > 0:
        raise ModelDomainError("tau_blink must be > 0")
    return 1.0 + m * np.exp(-np.abs(tau) / tau_blink)


def _side_peaks(tau, tau1, tau0, near_weight=1.0):
    """Sum over n != 0 of w(n)·exp(-|tau - n tau0|/tau1), w(±1) = near_weight.

    The infinite comb has the closed form
    ``(exp(-f/s) + exp(-(1-f)/s)) / (1 - exp(-1/s))`` with ``x = |tau|/tau0``,
    ``f = x - floor(x)`` and ``s = tau1/tau0``. Working in ``|tau|`` makes
    the result exactly even, and the cost does not grow with ``tau1``.
    """
    x = np.abs(np.asarray(tau, dtype=float)) / tau0
    s = tau1 / tau0
    f = x - np.floor(x)
    comb = (np.exp(-f / s) + np.exp(-(1.0 - f) / s)) / -math.expm1(-1.0 / s)
    total = comb - np.exp(-x / s)
    if near_weight != 1.0:
        total -= (1.0 - near_weight) * (np.exp(-np.abs(x - 1.0) / s) + np.exp(-(x + 1.0) / s))
    # cancellation near the center may leave a tiny negative remainder
    return np.maximum(total, 0.0)


def _check_positive(**kw):
    for k, v in kw.items():
        if not v > 0:
            raise ModelDomainError(f"{k} must be > 0, got {v}")


def model_g2(tau, g2_0, tau1, tau0, m, tau_blink, C0):
    """Pulsed auto-correlation with blinking.

    Two-sided exponential peaks of decay ``tau1`` at every multiple of the
    repetition period ``tau0``, a center peak scaled by ``g2_0``, all
    multiplied by ``C0 * (1 + m*exp(-|tau|/tau_blink))``.
    """
    _check_positive(tau1=tau1, tau0=tau0, tau_blink=tau_blink)
    tau = np.asarray(tau, dtype=float)
    peaks = g2_0 * np.exp(-np.abs(tau) / tau1) + _side_peaks(tau, tau1, tau0)
    return C0 * peaks * blinking_envelope(tau, m, tau_blink)


#: weight of the peaks at ±tau0 in the unbalanced interferometer
HOM_NEAR_WEIGHT = 0.75


def model_hom(tau, A, tau1, V_ps, tau2, tau0, m, tau_blink, C0, co_polarized=True):
    """Unbalanced Mach-Zehnder HOM coincidences with blinking.

    The center peak has area parameter ``A`` and, for co-polarized photons,
    a dip ``1 - V_ps*exp(-|tau|/tau2)``; the peaks at ±tau0 carry weight 3/4
    and all further peaks weight 1. ``co_polarized=False`` forces V_ps = 0.
    """
    _check_positive(tau1=tau1, tau2=tau2, tau0=tau0, tau_blink=tau_blink)
    if not 0.0 <= V_ps <= 1.0:
        raise ModelDomainError(f"V_ps must lie in [0, 1], got {V_ps}")
    tau = np.asarray(tau, dtype=float)
    center = A * np.exp(-np.abs(tau) / tau1)
    if co_polarized:
        center = center * (1.0 - V_ps * np.exp(-np.abs(tau) / tau2))
    peaks = center + _side_peaks(tau, tau1, tau0, HOM_NEAR_WEIGHT)
    return C0 * peaks * blinking_envelope(tau, m, tau_blink)


def model_hom_co(tau, A, tau1, V_ps, tau2, tau0, m, tau_blink, C0):
    return model_hom(tau, A, tau1, V_ps, tau2, tau0, m, tau_blink, C0, co_polarized=True)


def model_hom_cross(tau, A, tau1, tau0, m, tau_blink, C0):
    return model_hom(tau, A, tau1, 0.0, 1.0, tau0, m, tau_blink, C0, co_polarized=False)


def mono_exponential(t, tau1, amplitude, t_ref=0.0):
    """``amplitude * exp(-(t - t_ref)/tau1)``."""
    _check_positive(tau1=tau1)
    return amplitude * np.exp(-(np.asarray(t, dtype=float) - t_ref) / tau1)


_GAUSS = 4.0 * math.log(2.0)


def gaussian(x, center, fwhm, amplitude):
    """Peak-height-normalized Gaussian."""
    _check_positive(fwhm=fwhm)
    return amplitude * np.exp(-_GAUSS * ((np.asarray(x, dtype=float) - center) / fwhm) ** 2)


def gaussian_doublet(x, c1, c2, fwhm1, fwhm2, a1, a2, offset=0.0):
    return gaussian(x, c1, fwhm1, a1) + gaussian(x, c2, fwhm2, a2) + offset


def peak_envelope(n, period, a_inf, m, tau_blink):
    """Integrated-area law ``a_inf*(1 + m*exp(-|n*period|/tau_blink))``."""
    return a_inf * blinking_envelope(np.asarray(n, dtype=float) * period, m, tau_blink)
