"""
Task-level fits: Rabi scans, g², HOM, spectral doublets and lifetimes.

Count data are fitted in two stages. The first pass weights each bin by
``sqrt(max(count, 1))``; weights taken from the data itself pull the fit
towards low fluctuations, so the result is then refined with weights
``sqrt(max(model, 1))`` from the previous pass, held fixed within each pass.
The fixed point solves the Poisson likelihood equations for every bin with
``model >= 1``.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from ..core import FitResult, Histogram, PulseTrain
from ..errors import FitError, ValidationError
from .lm import nlls_fit, propagate
from .models import (gaussian, gaussian_doublet, model_g2, model_hom_co, model_hom_cross,
                     mono_exponential, occupancy, rabi_envelope, rabi_intensity)


def poisson_sigma(counts):
    return np.sqrt(np.maximum(np.asarray(counts, dtype=float), 1.0))


def poisson_refine(model, x, y, res: FitResult, bounds=None, fixed=(), max_passes=6,
                   tol=1e-3) -> FitResult:
    """Refit count data with model-based Poisson weights.

    Iterates until no free parameter moves by more than ``tol`` standard
    errors. The first-pass ``res`` is returned unchanged if a pass fails.
    """
    fixed = set(fixed)
    free = [k for k in res.params if k not in fixed]
    for _ in range(max_passes):
        mu = np.asarray(model(x, **res.params), dtype=float)
        try:
            new = nlls_fit(model, x, y, poisson_sigma(mu), dict(res.params), bounds=bounds,
                           fixed=fixed)
        except FitError:
            return res
        shift = max((abs(new[k] - res[k]) / new.err(k) if new.err(k) > 0 else 0.0)
                    for k in free) if free else 0.0
        res = new
        # a singular pass (unidentifiable parameter) does not improve further
        if not shift > tol or new.meta["singular"]:
            break
    return res


def with_derived(res: FitResult, **derived) -> FitResult:
    """Attach derived ``name=(value, stderr)`` quantities to a fit result."""
    params = dict(res.params)
    errs = dict(res.stderrs)
    for k, (v, e) in derived.items():
        params[k] = float(v)
        errs[k] = float(e)
    return FitResult(params, errs, res.residual_norm, res.converged, res.n_iter, dict(res.meta))


# --- Rabi -------------------------------------------------------------------

def _rabi_grid_init(p, y, s):
    w = 1.0 / s**2
    pmax = p.max()
    best = None
    for xi in (0.0, 0.03, 0.07, 0.12, 0.2, 0.3, 0.45):
        for p_pi in np.linspace(pmax / 40.0, pmax, 400):
            c = math.pi / p_pi
            shape = occupancy(c * p, xi)
            den = float(np.sum(w * shape * shape))
            if den <= 0:
                continue
            scale = float(np.sum(w * y * shape)) / den
            cost = float(np.sum(w * (y - scale * shape) ** 2))
            if scale > 0 and (best is None or cost < best[0]):
                best = (cost, xi, c, scale)
    if best is None:
        raise FitError("could not initialize Rabi fit")
    return {"xi": best[1], "c": best[2], "scale": best[3]}


def fit_rabi_scan(powers, intensities, sigma, init=None) -> FitResult:
    """Fit ``I(P) = scale * occupancy(c*P, xi)`` to a power scan.

    Adds the derived preparation fidelity ``F_prep = rabi_envelope(pi, xi)``
    and the pi-power ``P_pi = pi/c`` with propagated errors.
    """
    p = np.asarray(powers, dtype=float)
    y = np.asarray(intensities, dtype=float)
    s = np.broadcast_to(np.asarray(sigma, dtype=float), y.shape)
    if p.size < 10:
        raise ValidationError("powers", "need at least 10 scan points")
    if np.any(p < 0):
        raise ValidationError("powers", "must be >= 0")
    start = _rabi_grid_init(p, y, s)
    if init:
        start.update(init)
    bounds = {"xi": (0.0, 1.9), "c": (1e-300, np.inf), "scale": (0.0, np.inf)}
    res = nlls_fit(rabi_intensity, p, y, s, start, bounds=bounds)
    f = propagate(lambda xi, **_: rabi_envelope(math.pi, xi), res, ["xi"], bounds=bounds)
    ppi = propagate(lambda c, **_: math.pi / c, res, ["c"])
    return with_derived(res, F_prep=f, P_pi=ppi)


# --- peak-shape initialization helpers ---------------------------------------

def _shape_init(hist: Histogram, period, min_abs_n=1):
    """Rough decay time, far-peak height and blinking from peak areas."""
    from ..correlate import fit_blinking_envelope, integrate_peaks, _peak_index

    peaks = integrate_peaks(hist, period)
    if np.sum(peaks.n != 0) < 8:
        raise ValidationError("hist", "need at least 9 complete peaks")
    idx = _peak_index(hist, period)
    heights, areas = [], []
    for n, a in zip(peaks.n, peaks.area):
        if abs(n) >= min_abs_n and a > 0:
            heights.append(hist.counts[idx == n].max())
            areas.append(a)
    if not heights:
        raise ValidationError("hist", "side peaks hold no counts")
    bw = hist.bin_width
    tau1 = max(float(np.sum(areas)) * bw / (2.0 * float(np.sum(heights))), bw / 2.0)
    try:
        blink = fit_blinking_envelope(peaks, min_abs_n=min_abs_n)
        m, tau_b, a_inf = blink["m"], blink["tau_blink"], blink["a_inf"]
        if not (np.isfinite(m) and m > -0.9):
            raise FitError("blinking init failed")
    except FitError:
        far = peaks.area[np.abs(peaks.n) >= max(min_abs_n, 1)]
        m, tau_b, a_inf = 0.0, 2.0 * period, float(np.mean(far))
    m = max(m, 0.0)
    center = float(peaks.area[peaks.n == 0][0]) if 0 in peaks else 0.0
    c0 = a_inf * bw / (2.0 * tau1)
    return {"tau1": tau1, "m": m, "tau_blink": tau_b, "C0": max(c0, 1e-12),
            "a_inf": a_inf, "center": center}


# --- g2 ---------------------------------------------------------------------

def fit_g2(hist: Histogram, pulses: PulseTrain, init=None, fixed=()) -> FitResult:
    """Fit the pulsed auto-correlation model with blinking to a histogram."""
    tau0 = pulses.period
    guess = _shape_init(hist, tau0)
    g2_0 = guess["center"] / max(guess["a_inf"] * (1.0 + guess["m"]), 1e-12)
    start = {"g2_0": min(max(g2_0, 0.0), 5.0), "tau1": guess["tau1"], "tau0": float(tau0),
             "m": guess["m"], "tau_blink": guess["tau_blink"], "C0": guess["C0"]}
    if init:
        start.update(init)
    bounds = {"g2_0": (0.0, 10.0), "tau1": (1.0, 10.0 * tau0), "m": (-0.999, 1e3),
              "tau_blink": (0.01 * tau0, 1e4 * tau0), "C0": (0.0, np.inf)}
    fixed = {"tau0", *fixed}
    res = nlls_fit(model_g2, hist.centers, hist.counts, poisson_sigma(hist.counts), start,
                   bounds=bounds, fixed=fixed)
    return poisson_refine(model_g2, hist.centers, hist.counts, res, bounds, fixed)


# --- HOM --------------------------------------------------------------------

class HomFit(NamedTuple):
    co: FitResult
    cross: FitResult

    @property
    def V_ps(self):
        return self.co["V_ps"], self.co.err("V_ps")

    @property
    def tau2(self):
        return self.co["tau2"], self.co.err("tau2")

    @property
    def converged(self):
        return self.co.converged and self.cross.converged


_HOM_BOUNDS = {"A": (0.0, 100.0), "tau1": (1.0, None), "V_ps": (0.0, 1.0), "tau2": (1.0, None),
               "m": (-0.999, 1e3), "tau_blink": (None, None), "C0": (0.0, np.inf)}


def _hom_bounds(tau0):
    b = dict(_HOM_BOUNDS)
    b["tau1"] = (1.0, 10.0 * tau0)
    b["tau2"] = (1.0, 10.0 * tau0)
    b["tau_blink"] = (0.01 * tau0, 1e4 * tau0)
    return b


def _hom_start(hist, tau0):
    g = _shape_init(hist, tau0, min_abs_n=2)
    a = g["center"] / max(g["a_inf"] * (1.0 + g["m"]), 1e-12)
    return {"A": min(max(a, 0.01), 50.0), "tau1": g["tau1"], "tau0": float(tau0), "m": g["m"],
            "tau_blink": g["tau_blink"], "C0": g["C0"]}


def fit_hom(co_hist: Histogram, cross_hist: Histogram, pulses: PulseTrain) -> HomFit:
    """Fit cross-polarized data (no interference) first, then co-polarized.

    The co fit starts from the cross-fit center amplitude and decay time;
    blinking and normalization are fitted separately for each histogram.
    The dip width ``tau2`` is bounded below by the bin width, since a
    narrower dip trades off freely against ``V_ps``.
    """
    tau0 = pulses.period
    bounds = _hom_bounds(tau0)
    cross_start = _hom_start(cross_hist, tau0)
    b_cross = {k: bounds[k] for k in cross_start if k in bounds}
    cross = nlls_fit(model_hom_cross, cross_hist.centers, cross_hist.counts,
                     poisson_sigma(cross_hist.counts), cross_start, bounds=b_cross, fixed={"tau0"})
    cross = poisson_refine(model_hom_cross, cross_hist.centers, cross_hist.counts, cross,
                           b_cross, {"tau0"})
    co_start = _hom_start(co_hist, tau0)
    co_start.update(A=cross["A"], tau1=cross["tau1"], V_ps=0.5, tau2=0.5 * cross["tau1"])
    b_co = {k: bounds[k] for k in co_start if k in bounds}
    # a dip narrower than one bin is indistinguishable from no dip
    b_co["tau2"] = (max(b_co["tau2"][0], co_hist.bin_width), b_co["tau2"][1])
    co = nlls_fit(model_hom_co, co_hist.centers, co_hist.counts, poisson_sigma(co_hist.counts),
                  co_start, bounds=b_co, fixed={"tau0"})
    co = poisson_refine(model_hom_co, co_hist.centers, co_hist.counts, co, b_co, {"tau0"})
    return HomFit(co, cross)


# --- spectra ----------------------------------------------------------------

def fit_gaussian_doublet(energy, counts, sigma=None, fit_offset=True, equal_widths=False) -> FitResult:
    """Two overlapping Gaussians; reports the splitting ``|c2 - c1|``.

    ``meta['degenerate']`` is set when the splitting is not resolved:
    either its standard error is at least the splitting itself, or the
    second component fails a 99% chi-square test against one Gaussian.
    An unresolved splitting is reported as zero with the fitted
    separation as its standard error.
    """
    x = np.asarray(energy, dtype=float)
    y = np.asarray(counts, dtype=float)
    if x.size < 20:
        raise ValidationError("spectrum", "need at least 20 points")
    s = poisson_sigma(y) if sigma is None else np.broadcast_to(np.asarray(sigma, float), y.shape)
    order = np.argsort(x)
    x, y, s = x[order], y[order], s[order]

    base = float(np.percentile(y, 5)) if fit_offset else 0.0
    single = nlls_fit(lambda e, c, w, a, off: gaussian(e, c, w, a) + off, x, y, s,
                      {"c": float(x[np.argmax(y)]), "w": (x[-1] - x[0]) / 4.0,
                       "a": float(y.max() - base), "off": base},
                      bounds={"w": (1e-9, np.inf)}, fixed=() if fit_offset else {"off"})
    mu, width, amp = single["c"], abs(single["w"]), single["a"]

    if equal_widths:
        def model(e, c1, c2, fwhm, a1, a2, offset):
            return gaussian_doublet(e, c1, c2, fwhm, fwhm, a1, a2, offset)
    else:
        model = gaussian_doublet

    best = None
    for frac_split, frac_w in ((0.25, 0.8), (0.45, 0.6), (0.6, 0.45), (0.15, 0.9)):
        d = frac_split * width
        start = {"c1": mu - d / 2, "c2": mu + d / 2, "a1": amp / 1.5, "a2": amp / 1.5,
                 "offset": max(single["off"], 0.0) if fit_offset else 0.0}
        if equal_widths:
            start["fwhm"] = frac_w * width
        else:
            start["fwhm1"] = start["fwhm2"] = frac_w * width
        bounds = {k: (1e-9, np.inf) for k in ("fwhm", "fwhm1", "fwhm2", "a1", "a2") if k in start}
        try:
            res = nlls_fit(model, x, y, s, start, bounds=bounds,
                           fixed=() if fit_offset else {"offset"})
        except FitError:
            continue
        key = (not res.converged, res.residual_norm)
        if best is None or key < best[0]:
            best = (key, res)
    if best is None:
        raise FitError("doublet fit failed from every starting point")
    res = best[1]
    if sigma is None:
        res = poisson_refine(model, x, y, res, bounds, () if fit_offset else {"offset"})
    split = propagate(lambda c1, c2, **_: abs(c2 - c1), res, ["c1", "c2"])
    resolved = _second_component_significant(x, y, s if sigma is not None else None, res, model,
                                             single, fit_offset, 2 if equal_widths else 3)
    if equal_widths:
        p = dict(res.params)
        e = dict(res.stderrs)
        p["fwhm1"] = p["fwhm2"] = p.pop("fwhm")
        e["fwhm1"] = e["fwhm2"] = e.pop("fwhm")
        res = FitResult(p, e, res.residual_norm, res.converged, res.n_iter, dict(res.meta))
    if res["c1"] > res["c2"]:
        p = dict(res.params)
        e = dict(res.stderrs)
        for a, b in (("c1", "c2"), ("fwhm1", "fwhm2"), ("a1", "a2")):
            p[a], p[b] = p[b], p[a]
            if a in e and b in e:
                e[a], e[b] = e[b], e[a]
        res = FitResult(p, e, res.residual_norm, res.converged, res.n_iter, dict(res.meta))
    out = with_derived(res, splitting=split)
    degenerate = not (split[1] < split[0]) or bool(res.meta["singular"]) or not resolved
    if degenerate:
        out = with_derived(res, splitting=(0.0, max(split[0], split[1])))
    return FitResult(out.params, out.stderrs, out.residual_norm, out.converged, out.n_iter,
                     {**out.meta, "degenerate": degenerate})


# 99% points of the chi-square distribution for 2 and 3 degrees of freedom
_CHI2_99 = {2: 9.2103, 3: 11.3449}


def _second_component_significant(x, y, sigma, res, model, single, fit_offset, extra_dof):
    """Chi-square comparison of the doublet against a single Gaussian.

    Both fits share one weight vector: the given ``sigma`` or Poisson
    weights from the doublet model.
    """
    model_y = model(x, **res.params)
    s = sigma if sigma is not None else poisson_sigma(model_y)
    chi2_double = float(np.sum(((y - model_y) / s) ** 2))
    try:
        one = nlls_fit(lambda e, c, w, a, off: gaussian(e, c, w, a) + off, x, y, s,
                       dict(single.params), bounds={"w": (1e-9, np.inf)},
                       fixed=() if fit_offset else {"off"})
    except FitError:
        return True
    chi2_single = float(np.sum(((y - gaussian(x, one["c"], one["w"], one["a"]) - one["off"]) / s)
                               ** 2))
    return chi2_single - chi2_double > _CHI2_99[extra_dof]


# --- lifetimes --------------------------------------------------------------

def fit_lifetime(decay: Histogram, fit_window) -> FitResult:
    """Mono-exponential tail fit over bins with centers in ``[t_start, t_end)``.

    The amplitude refers to ``t_start``. No deconvolution or background term.
    """
    t_start, t_end = fit_window
    if not t_start < t_end:
        raise ValidationError("fit_window", "t_start must be < t_end")
    if t_start < decay.tau_min or t_end > decay.tau_max:
        raise ValidationError("fit_window",
                              f"window {fit_window} outside histogram [{decay.tau_min}, {decay.tau_max})")
    sel = decay.window_mask(t_start, t_end)
    if sel.sum() < 30:
        raise ValidationError("fit_window", "need at least 30 bins in the window")
    t = decay.centers[sel]
    y = decay.counts[sel]
    pos = y > 0
    if pos.sum() >= 2:
        slope, icpt = np.polyfit(t[pos] - t_start, np.log(y[pos]), 1, w=np.sqrt(y[pos]))
        tau0 = -1.0 / slope if slope < 0 else (t_end - t_start)
        amp0 = math.exp(icpt)
    else:
        tau0, amp0 = (t_end - t_start) / 3.0, max(float(y.max()), 1.0)

    def model(x, tau1, amplitude):
        return mono_exponential(x, tau1, amplitude, t_ref=t_start)

    bounds = {"tau1": (1e-3, np.inf), "amplitude": (0.0, np.inf)}
    res = nlls_fit(model, t, y, poisson_sigma(y), {"tau1": tau0, "amplitude": amp0}, bounds=bounds)
    return poisson_refine(model, t, y, res, bounds)
