"""
Coincidence histograms, per-period peak areas and blinking correction.

Delay convention: ``tau = t_stop - t_start`` with the start channel
``ch_a`` listed first; bins are half-open and ``tau = 0`` is a bin edge.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from numba import njit

from .core import Histogram, PeakSeries, TagStream
from .errors import FitError, NormalizationError, ValidationError
from .fit.lm import nlls_fit
from .fit.models import blinking_envelope, peak_envelope


@njit(cache=True, nogil=True)
def _xcorr_kernel(ta, tb, start, stop, same, bin_width, max_delay, counts):
    # two-pointer sweep: `lo` only moves forward, so the cost is O(n + pairs)
    nb = tb.size
    lo = 0
    if stop > start:
        t_first = ta[start] - max_delay
        # binary search for the first stop tag inside the window
        a, b = 0, nb
        while a < b:
            mid = (a + b) // 2
            if tb[mid] <= t_first:
                a = mid + 1
            else:
                b = mid
        lo = a
    for i in range(start, stop):
        t0 = ta[i]
        while lo < nb and tb[lo] <= t0 - max_delay:
            lo += 1
        j = lo
        hi_t = t0 + max_delay
        while j < nb and tb[j] < hi_t:
            if not (same and j == i):
                counts[(tb[j] - t0 + max_delay) // bin_width] += 1
            j += 1


def _validate_grid(stream, ch_a, ch_b, bin_width, max_delay):
    for name, ch in (("ch_a", ch_a), ("ch_b", ch_b)):
        if not 0 <= ch < stream.channel_count:
            raise ValidationError(name, f"unknown channel {ch} (channel_count={stream.channel_count})")
    if int(bin_width) != bin_width or bin_width <= 0:
        raise ValidationError("bin_width", "must be a positive integer")
    if int(max_delay) != max_delay or max_delay <= 0 or max_delay % bin_width:
        raise ValidationError("max_delay", "must be a positive multiple of bin_width")


def _hist(counts, bin_width, max_delay, ch_a, ch_b, **extra):
    meta = {"kind": "correlation", "ch_a": ch_a, "ch_b": ch_b, "max_delay_ps": max_delay}
    meta.update(extra)
    return Histogram(int(bin_width), -int(max_delay), counts.astype(np.float64), None, meta)


def correlate(stream: TagStream, ch_a, ch_b, bin_width, max_delay, workers=1) -> Histogram:
    """Histogram of ``t_b - t_a`` over all pairs with ``|t_b - t_a| < max_delay``.

    Single sweep over the sorted channels with a sliding window, O(n + p)
    for p produced pairs. For ``ch_a == ch_b`` a tag is never paired with
    itself. ``workers > 1`` splits the start tags into contiguous chunks
    whose integer histograms are summed, which reproduces the
    single-threaded result exactly.
    """
    _validate_grid(stream, ch_a, ch_b, bin_width, max_delay)
    ta = np.ascontiguousarray(stream.times(ch_a))
    tb = ta if ch_a == ch_b else np.ascontiguousarray(stream.times(ch_b))
    nbins = 2 * int(max_delay) // int(bin_width)
    args = (ch_a == ch_b, np.int64(bin_width), np.int64(max_delay))
    if workers <= 1 or ta.size < 2 * workers:
        counts = np.zeros(nbins, dtype=np.int64)
        _xcorr_kernel(ta, tb, 0, ta.size, *args, counts)
    else:
        bounds = np.linspace(0, ta.size, workers + 1).astype(np.int64)
        parts = [np.zeros(nbins, dtype=np.int64) for _ in range(workers)]
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(lambda k: _xcorr_kernel(ta, tb, bounds[k], bounds[k + 1], *args, parts[k]),
                          range(workers)))
        counts = np.sum(parts, axis=0)
    return _hist(counts, bin_width, max_delay, ch_a, ch_b)


def correlate_bruteforce(stream: TagStream, ch_a, ch_b, bin_width, max_delay) -> Histogram:
    """All-pairs reference for :func:`correlate` (quadratic; tests only)."""
    _validate_grid(stream, ch_a, ch_b, bin_width, max_delay)
    ta = stream.times(ch_a)
    tb = stream.times(ch_b)
    nbins = 2 * int(max_delay) // int(bin_width)
    counts = np.zeros(nbins, dtype=np.int64)
    if ta.size and tb.size:
        tau = np.subtract.outer(tb, ta)  # tau[j, i] = tb[j] - ta[i]
        keep = np.abs(tau) < max_delay
        if ch_a == ch_b:
            np.fill_diagonal(keep, False)
        idx = (tau[keep] + max_delay) // bin_width
        np.add.at(counts, idx, 1)
    return _hist(counts, bin_width, max_delay, ch_a, ch_b)


def decay_histogram(stream: TagStream, channel, period, bin_width, offset=0) -> Histogram:
    """Arrival times folded onto one excitation period (time-resolved PL)."""
    if period % bin_width:
        raise ValidationError("period", "must be a multiple of bin_width")
    t = stream.times(channel)
    phase = np.mod(t - int(offset), int(period))
    counts = np.bincount(phase // int(bin_width), minlength=int(period) // int(bin_width))
    return Histogram(int(bin_width), 0, counts.astype(np.float64), None,
                     {"kind": "decay", "channel": channel, "period_ps": period})


def _peak_index(hist, period):
    """Peak number of every bin, assigning bins by their center."""
    twice_center = 2 * hist.tau_min + (2 * np.arange(hist.n_bins, dtype=np.int64) + 1) * hist.bin_width
    return np.floor_divide(twice_center + period, 2 * period)


def integrate_peaks(hist: Histogram, period) -> PeakSeries:
    """Sum the counts of each full repetition period.

    Peak ``n`` collects the bins whose centers lie in
    ``[n*period - period/2, n*period + period/2)``; windows cut by the
    histogram edges are dropped. Errors are Poissonian, ``sqrt(area)``.
    """
    period = int(period)
    if period <= 0 or period % hist.bin_width:
        raise ValidationError("period", f"must be a positive multiple of bin_width ({hist.bin_width})")
    per = period // hist.bin_width
    if hist.n_bins < 3 * per:
        raise ValidationError("hist", "histogram must span at least 3 periods")
    idx = _peak_index(hist, period)
    n_vals, inverse, nbin = np.unique(idx, return_inverse=True, return_counts=True)
    areas = np.bincount(inverse, weights=hist.counts, minlength=n_vals.size)
    full = nbin == per
    n_vals, areas = n_vals[full], areas[full]
    return PeakSeries(n_vals, areas, np.sqrt(areas), period)


def _side_split(peaks, min_abs):
    sel = np.abs(peaks.n) >= min_abs
    return sel & (peaks.n > 0), sel & (peaks.n < 0)


def fit_blinking_envelope(peaks: PeakSeries, exclude_center=True, min_abs_n=1):
    """Fit ``area(n) = a_inf*(1 + m*exp(-|n*period|/tau_blink))``.

    Peaks with ``0 < |n| < min_abs_n`` are ignored (e.g. the 3/4-weighted
    neighbours of an HOM histogram).

    Returns
    -------
    FitResult
        Parameters ``a_inf``, ``m``, ``tau_blink``.
    """
    pos, neg = _side_split(peaks, max(min_abs_n, 1))
    if pos.sum() < 4 or neg.sum() < 4:
        raise FitError("blinking fit needs at least 4 side peaks on each side")
    use = pos | neg
    if not exclude_center:
        use |= peaks.n == 0
    n = peaks.n[use].astype(float)
    area = peaks.area[use]
    sigma = np.sqrt(np.maximum(area, 1.0))
    period = peaks.period

    absn = np.abs(n)
    order = np.argsort(absn)
    far = area[absn >= np.quantile(absn, 0.75)]
    a_inf = float(np.mean(far)) if far.size else float(np.mean(area))
    a_inf = max(a_inf, 1e-9)
    kmin = absn[order[0]]
    near = area[absn == kmin].mean() / a_inf - 1.0
    nxt = area[absn == kmin + 1].mean() / a_inf - 1.0 if np.any(absn == kmin + 1) else near / 2
    tau_b = period / math.log(near / nxt) if near > 0 and nxt > 0 and near > nxt else 2.0 * period
    tau_b = min(max(tau_b, 0.05 * period), 500.0 * period)
    m0 = max(near * math.exp(kmin * period / tau_b), 0.0)

    def model(x, a_inf, m, tau_blink):
        return peak_envelope(x, period, a_inf, m, tau_blink)

    res = nlls_fit(model, n, area, sigma,
                   init={"a_inf": a_inf, "m": min(m0, 1e3), "tau_blink": tau_b},
                   bounds={"a_inf": (0.0, np.inf), "m": (-0.999, 1e4),
                           "tau_blink": (0.01 * period, 1e4 * period)})
    return res


def correct_blinking(hist: Histogram, m, tau_blink) -> Histogram:
    """Divide every bin by ``1 + m*exp(-|tau|/tau_blink)`` at its center."""
    if not m > -1:
        raise ValidationError("m", "must be > -1")
    if not tau_blink > 0:
        raise ValidationError("tau_blink", "must be > 0")
    env = blinking_envelope(hist.centers, m, tau_blink)
    return hist.with_counts(hist.counts / env, blinking_m=repr(float(m)),
                            blinking_tau_ps=repr(float(tau_blink)))


def correct_peak_areas(peaks: PeakSeries, m, tau_blink) -> PeakSeries:
    """Divide each peak area by the envelope at its nominal delay n*period.

    The bunching acts on pulse pairs separated by n periods, so the center
    area is divided by exactly ``1 + m``.
    """
    if not m > -1:
        raise ValidationError("m", "must be > -1")
    if not tau_blink > 0:
        raise ValidationError("tau_blink", "must be > 0")
    env = blinking_envelope(peaks.n * float(peaks.period), m, tau_blink)
    return PeakSeries(peaks.n, peaks.area / env, peaks.stderr / env, peaks.period)


def normalize_histogram(hist: Histogram, period, far_peak_min_index, blinking=None) -> Histogram:
    """Scale a histogram to its Poisson level.

    The level ``C0`` is the mean per-bin count of the peaks with
    ``|n| >= far_peak_min_index`` after removing the blinking envelope.
    ``blinking`` is ``(m, tau_blink)``; when omitted the envelope is fitted
    to the peaks with ``|n| >= 2`` and applied only if ``m`` is significant.
    """
    peaks = integrate_peaks(hist, period)
    pos, neg = _side_split(peaks, far_peak_min_index)
    if pos.sum() < 1 or neg.sum() < 1:
        raise NormalizationError(f"no complete peaks with |n| >= {far_peak_min_index} on both sides")
    m, tau_b = 0.0, float(period)
    if blinking is not None:
        m, tau_b = blinking
    else:
        try:
            fit = fit_blinking_envelope(peaks, min_abs_n=2)
            if fit.converged and fit["m"] > 2.0 * fit.err("m"):
                m, tau_b = fit["m"], fit["tau_blink"]
        except FitError:
            pass
    far = pos | neg
    env = blinking_envelope(peaks.n[far] * float(period), m, tau_b)
    bins_per_period = period // hist.bin_width
    level = float(np.mean(peaks.area[far] / env)) / bins_per_period
    if not level > 0:
        raise NormalizationError("far peaks are empty")
    return hist.with_counts(hist.counts / level, norm=level, normalized="1",
                            norm_far_peak_min_index=far_peak_min_index,
                            norm_blinking_m=repr(float(m)), norm_blinking_tau_ps=repr(float(tau_b)))
