"""
Derived quantities: preparation fidelity from XX-X cross-correlations,
the polarization correction C_Pol, HOM visibilities, blinking-derived
on/off times and quantum efficiency, and the lifetime-ratio bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .core import CHANNEL_X, CHANNEL_XX, DetectionChain, EmitterModel, Histogram, PeakSeries, PulseTrain
from .correlate import (correct_peak_areas, correlate, fit_blinking_envelope, integrate_peaks)
from .errors import (CalibrationError, ContractError, FitError, ModelDomainError,
                     UndefinedFidelityError, ValidationError)
from .fit.lm import propagate
from .simulate import _child, as_seed_sequence, simulate_cascade_stream

#: default cross-correlation grid used by the calibration simulations
XCORR_BIN_PS = 10
XCORR_WINDOW_PS = 100_000


class FidelityEstimate(NamedTuple):
    F: float
    stderr: float
    c_pol: float
    m: float
    tau_blink: float
    center_area: float
    side_mean: float
    peaks: PeakSeries
    stderr_blink: float = 0.0

    @property
    def stderr_total(self):
        """Side-peak scatter and envelope-fit error in quadrature."""
        return math.hypot(self.stderr, self.stderr_blink)


def prep_fidelity_from_xcorr(hist: Histogram, period, c_pol=1.0) -> FidelityEstimate:
    """Preparation fidelity ``F = mean(side areas)/center area * c_pol``.

    Steps: integrate full-period peaks, fit the blinking envelope to the
    side peaks, divide every area by the envelope at its nominal delay
    ``n*period`` (the center by ``1 + m``), then take the ratio. The error
    is the relative standard deviation of the corrected side-peak areas;
    ``stderr_blink`` separately propagates the envelope-fit covariance,
    which dominates once the side peaks hold many counts.
    """
    peaks = integrate_peaks(hist, period)
    if 0 not in peaks:
        raise ValidationError("hist", "histogram does not contain the center peak")
    m, tau_b = 0.0, float(period)
    try:
        blink = fit_blinking_envelope(peaks, exclude_center=True)
    except FitError as exc:
        raise ValidationError("hist", f"need >= 4 side peaks per side ({exc})") from exc
    applied = np.isfinite(blink["m"]) and (
        blink.converged or abs(blink["m"]) > 2.0 * blink.err("m"))
    if applied:
        m, tau_b = blink["m"], blink["tau_blink"]
    if peaks[0].area <= 0:
        raise UndefinedFidelityError("center peak is empty; fidelity undefined")

    def ratio(m, tau_blink, **_):
        c = correct_peak_areas(peaks, m, tau_blink)
        return float(c.area[c.side].mean()) / c[0].area * c_pol

    corrected = correct_peak_areas(peaks, m, tau_b)
    center = corrected[0].area
    side = corrected.area[corrected.side]
    side_mean = float(side.mean())
    F = side_mean / center * c_pol
    rel = float(side.std(ddof=1)) / side_mean if side.size > 1 and side_mean > 0 else float("inf")
    err_blink = 0.0
    if applied and not blink.meta["singular"]:
        err_blink = propagate(ratio, blink, ["m", "tau_blink"],
                              bounds={"m": (-0.999, np.inf), "tau_blink": (1e-9, np.inf)})[1]
    return FidelityEstimate(F, F * rel, float(c_pol), float(m), float(tau_b), center, side_mean,
                            peaks, err_blink)


def cpol_first_order(dop):
    """First-order polarization correction ``2 - DOP`` (labelled fallback)."""
    return 2.0 - np.asarray(dop, dtype=float)


@dataclass(frozen=True)
class CpolCalibration:
    """Simulated C_Pol(DOP) points and their quadratic fit."""

    dop: np.ndarray
    cpol: np.ndarray
    cpol_err: np.ndarray
    f_unfiltered: np.ndarray
    coeffs: np.ndarray
    f_prep: float

    def __call__(self, dop):
        val = np.polyval(self.coeffs, dop)
        return float(val) if np.ndim(val) == 0 else val


def calibrate_cpol(dop_values, emitter: EmitterModel, detection: DetectionChain, pulses: PulseTrain,
                   seed, bin_width=XCORR_BIN_PS, max_delay=XCORR_WINDOW_PS, max_rel_err=0.05,
                   workers=1) -> CpolCalibration:
    """Calibrate C_Pol against the injected preparation fidelity.

    For every DOP the cascade is simulated with and without the polarization
    filter. The filtered histogram is analyzed with ``c_pol = 1`` and C_Pol
    is the factor restoring the injected fidelity; the unfiltered run must
    recover the injected fidelity on its own and is kept as a diagnostic.
    The quadratic is an unweighted fit: every point has the same pulse
    count, and the scatter-based point errors are too noisy to weight by.
    """
    dops = np.asarray(sorted(float(d) for d in dop_values))
    if dops.size < 5 or dops[0] > 0.1 or dops[-1] < 0.9:
        raise ValidationError("dop_values", "need >= 5 DOP values spanning [0, 1]")
    if emitter.prep_fidelity is None:
        raise ValidationError("emitter", "calibration needs a fixed prep_fidelity")
    f_inj = emitter.prep_fidelity
    ss = as_seed_sequence(seed)
    cpol, err, f_unf = [], [], []
    for i, d in enumerate(dops):
        em = replace(emitter, dop=float(d))
        est = {}
        for filt in (True, False):
            det = replace(detection, polarization_filter=filt)
            stream = simulate_cascade_stream(em, det, pulses, _child(ss, i, int(filt)), workers=workers)
            hist = correlate(stream, CHANNEL_XX, CHANNEL_X, bin_width, max_delay)
            e = prep_fidelity_from_xcorr(hist, pulses.period, 1.0)
            rel = e.stderr / e.F if e.F > 0 else float("inf")
            if not rel <= max_rel_err:
                raise CalibrationError(
                    f"DOP={d:.3g} ({'filtered' if filt else 'unfiltered'}): relative error "
                    f"{rel:.3g} exceeds {max_rel_err}; increase n_pulses")
            est[filt] = e
        cpol.append(f_inj / est[True].F)
        err.append(cpol[-1] * est[True].stderr_total / est[True].F)
        f_unf.append(est[False].F)
    cpol = np.asarray(cpol)
    err = np.asarray(err)
    coeffs = np.polyfit(dops, cpol, 2)
    return CpolCalibration(dops, cpol, err, np.asarray(f_unf), coeffs, float(f_inj))


class PowerPoint(NamedTuple):
    power: float
    F: float
    stderr: float
    error: str | None


def prep_fidelity_vs_power(histograms, c_pol, period) -> list[PowerPoint]:
    """Map :func:`prep_fidelity_from_xcorr` over ``(power, Histogram)`` pairs.

    A failing entry is kept with ``F = nan`` and the error message.
    """
    out = []
    for power, hist in histograms:
        try:
            e = prep_fidelity_from_xcorr(hist, period, c_pol)
            out.append(PowerPoint(float(power), e.F, e.stderr, None))
        except (UndefinedFidelityError, ValidationError) as exc:
            out.append(PowerPoint(float(power), float("nan"), float("nan"), str(exc)))
    return out


# --- HOM --------------------------------------------------------------------

def visibility_from_areas(a_co, a_cross):
    """``V = 1 - A_co/A_cross``."""
    if not a_cross > 0:
        raise ValidationError("a_cross", "must be > 0")
    return 1.0 - a_co / a_cross


def _window_area(hist, center, window):
    sel = np.abs(hist.centers - center) <= window / 2.0
    return float(hist.counts[sel].sum())


def _side_noise(hist, window, period):
    """Per-unit-area noise estimated from mirrored side-peak differences.

    Blinking bunching is even in tau, so ``A_n - A_-n`` cancels it.
    """
    nmax = int((min(-hist.tau_min, hist.tau_max) - window / 2.0) // period)
    diffs, areas = [], []
    for n in range(2, nmax + 1):
        a_p = _window_area(hist, n * period, window)
        a_m = _window_area(hist, -n * period, window)
        diffs.append((a_p - a_m) / math.sqrt(2.0))
        areas.extend([a_p, a_m])
    if len(diffs) < 2 or np.mean(areas) <= 0:
        return float("nan")
    var = float(np.mean(np.square(diffs)))
    return var / float(np.mean(areas))


class Visibility(NamedTuple):
    V: float
    stderr: float
    a_co: float
    a_cross: float


def _require_normalized(hist, name):
    if hist.norm is None:
        raise ContractError(f"{name} histogram is not normalized; run normalize_histogram first")


def hom_visibility(co: Histogram, cross: Histogram, window, period=12_500) -> Visibility:
    """Visibility from the center-peak areas within ``|tau| <= window/2``.

    Both inputs must come from :func:`normalize_histogram`. The error uses
    the noise of the non-interfering side peaks (``|n| >= 2``) scaled to
    the center areas.
    """
    _require_normalized(co, "co")
    _require_normalized(cross, "cross")
    if not 0 < window <= period:
        raise ValidationError("window", f"must lie in (0, {period}]")
    if co.bin_width != cross.bin_width:
        raise ValidationError("bin_width", "co and cross histograms use different bins")
    a_co = _window_area(co, 0.0, window)
    a_cross = _window_area(cross, 0.0, window)
    V = visibility_from_areas(a_co, a_cross)
    k_co = _side_noise(co, window, period)
    k_cross = _side_noise(cross, window, period)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel2 = k_co / a_co + k_cross / a_cross if a_co > 0 else float("inf")
    stderr = (1.0 - V) * math.sqrt(rel2) if np.isfinite(rel2) else float("nan")
    return Visibility(V, stderr, a_co, a_cross)


class WindowPoint(NamedTuple):
    window: float
    V: float
    stderr: float
    captured_fraction: float


def visibility_vs_window(co: Histogram, cross: Histogram, windows, period=12_500) -> list[WindowPoint]:
    """Visibility and captured center-peak fraction for each window.

    The captured fraction is the cross-polarized center area inside the
    window relative to the full repetition period.
    """
    full = _window_area(cross, 0.0, period - cross.bin_width)
    out = []
    for w in windows:
        v = hom_visibility(co, cross, w, period)
        frac = _window_area(cross, 0.0, w) / full if full > 0 else float("nan")
        out.append(WindowPoint(float(w), v.V, v.stderr, frac))
    return out


# --- blinking and lifetimes ----------------------------------------------------

class BlinkingTimes(NamedTuple):
    tau_on: float
    tau_off: float
    qe: float


def blinking_derived(m, tau_blink) -> BlinkingTimes:
    """On/off dwell times and quantum efficiency from the bunching envelope.

    With ``m = tau_off/tau_on`` and ``1/tau_blink = 1/tau_on + 1/tau_off``:
    ``tau_off = (1+m)*tau_blink``, ``tau_on = tau_off/m``, ``QE = 1/(1+m)``.
    """
    if not m > 0:
        raise ModelDomainError("m must be > 0 to invert the blinking envelope")
    if not tau_blink > 0:
        raise ValidationError("tau_blink", "must be > 0")
    tau_off = (1.0 + m) * tau_blink
    return BlinkingTimes(tau_off / m, tau_off, 1.0 / (1.0 + m))


def v_max_tpe(t1_x, t1_xx):
    """Lifetime-ratio bound on cascade indistinguishability."""
    if not (t1_x > 0 and t1_xx > 0):
        raise ValidationError("t1", "lifetimes must be positive")
    return 1.0 / (1.0 + t1_xx / t1_x)
