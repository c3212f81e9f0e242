"""
Monte Carlo time tags for a pulsed XX-X cascade and Poisson-sampled model
histograms.

Randomness is organized so that results never depend on how the work is
split: the telegraph trace has its own stream, and every block of
``BLOCK_PULSES`` pulses draws from a Philox generator keyed by
``(seed, block index)`` with a fixed per-pulse draw layout.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np
from numba import njit

from .core import (CHANNEL_X, CHANNEL_XX, DetectionChain, EmitterModel, Histogram,
                   PulseTrain, TagStream)
from .errors import ConfigurationError, ModelDomainError, ValidationError
from .fit.models import occupancy

BLOCK_PULSES = 1 << 16

_KEY_TELEGRAPH = 0
_KEY_PULSES = 1
_KEY_SCAN = 2


def as_seed_sequence(seed) -> np.random.SeedSequence:
    """Normalize an int, SeedSequence or Generator to a SeedSequence."""
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, np.random.Generator):
        return np.random.SeedSequence(int(seed.integers(0, 2**63)))
    if seed is None:
        raise ValidationError("seed", "a seed is required for reproducible simulation")
    return np.random.SeedSequence(int(seed))


def _child(ss, *key):
    return np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + tuple(key))


def _generator(ss, *key):
    return np.random.Generator(np.random.Philox(_child(ss, *key)))


class Interval(NamedTuple):
    start: float
    end: float
    state: str


@dataclass(frozen=True)
class TelegraphTrace:
    """Alternating on/off intervals tiling ``[0, duration]``."""

    boundaries: np.ndarray
    states: np.ndarray
    duration: float

    def __len__(self):
        return self.states.size

    def __iter__(self) -> Iterator[Interval]:
        b = self.boundaries
        for i, s in enumerate(self.states.tolist()):
            yield Interval(float(b[i]), float(b[i + 1]), "on" if s else "off")

    def state_at(self, t):
        """Boolean on-state at times ``t`` (right-continuous)."""
        idx = np.searchsorted(self.boundaries, t, side="right") - 1
        idx = np.clip(idx, 0, self.states.size - 1)
        return self.states[idx]

    @property
    def dwell_times(self):
        return np.diff(self.boundaries)

    def on_fraction(self):
        return float(np.sum(self.dwell_times[self.states]) / self.duration)


def sample_telegraph(tau_on, tau_off, duration, rng, initial_state=None) -> TelegraphTrace:
    """Two-state emitter trace with exponential dwell times.

    The initial state is drawn from the stationary distribution unless
    ``initial_state`` ("on"/"off" or bool) is given.
    """
    if not tau_on > 0:
        raise ValidationError("tau_on", "must be > 0")
    if not tau_off > 0:
        raise ValidationError("tau_off", "must be > 0")
    if not duration > 0:
        raise ValidationError("duration", "must be > 0")
    if not isinstance(rng, np.random.Generator):
        rng = _generator(as_seed_sequence(rng), _KEY_TELEGRAPH)
    p_on = tau_on / (tau_on + tau_off)
    if initial_state is None:
        on0 = bool(rng.random() < p_on)
    else:
        on0 = initial_state in (True, "on")
    means = np.array([tau_on, tau_off]) if on0 else np.array([tau_off, tau_on])
    chunk = int(min(max(16, 2 * duration / (tau_on + tau_off) + 16), 1 << 20))
    dwell = []
    total = 0.0
    while total < duration:
        d = rng.exponential(1.0, size=(chunk, 2)) * means
        d = d.ravel()
        dwell.append(d)
        total += float(d.sum())
    dwell = np.concatenate(dwell)
    ends = np.cumsum(dwell)
    k = int(np.searchsorted(ends, duration, side="left"))
    boundaries = np.concatenate(([0.0], ends[:k], [float(duration)]))
    states = (np.arange(k + 1) % 2 == 0) == on0
    return TelegraphTrace(boundaries, states, float(duration))


def _pulse_probability(emitter: EmitterModel):
    if emitter.prep_fidelity is not None:
        return emitter.prep_fidelity
    if emitter.pulse_area is None:
        raise ConfigurationError("emitter uses RabiParams but no pulse area is set; use at_power()")
    return float(np.clip(occupancy(emitter.pulse_area, emitter.rabi.xi), 0.0, 1.0))


@dataclass(frozen=True)
class EmissionRecord:
    """Ground truth of emitted cascades before detection."""

    pulse: np.ndarray
    t_xx: np.ndarray
    t_x: np.ndarray
    horizontal: np.ndarray
    n_pulses: int
    on: np.ndarray


def _block(emitter, detection, period, p_exc, on, ss, b, b0, b1, with_truth=False):
    g = _generator(ss, _KEY_PULSES, b)
    n = b1 - b0
    # fixed draw layout per pulse keeps results partition-independent
    u = g.random((2, n))
    e_xx = g.exponential(emitter.t1_xx, n)
    e_x = g.exponential(emitter.t1_x, n)
    u_det = g.random((2, n))
    jit = g.standard_normal((2, n))
    t_k = np.arange(b0, b1, dtype=np.int64) * period
    excite = on & (u[0] < p_exc)
    horizontal = u[1] < 0.5 * (1.0 + emitter.dop)
    keep = excite & horizontal if detection.polarization_filter else excite
    t_xx = t_k + e_xx
    t_x = t_xx + e_x
    if with_truth:
        return np.flatnonzero(excite) + b0, t_xx[excite], t_x[excite], horizontal[excite]
    sigma = detection.jitter_sigma
    out_t, out_c = [], []
    for ch, t_true in ((CHANNEL_XX, t_xx), (CHANNEL_X, t_x)):
        det = keep & (u_det[ch] < detection.efficiency[ch])
        t = t_true[det] + sigma * jit[ch][det]
        out_t.append(np.rint(t).astype(np.int64))
        out_c.append(np.full(out_t[-1].size, ch, dtype=np.uint16))
    span_ps = (b1 - b0) * period
    for ch in (CHANNEL_XX, CHANNEL_X):
        rate = detection.dark_rate[ch]
        if rate > 0:
            k = g.poisson(rate * span_ps * 1e-12)
            out_t.append(b0 * period + g.integers(0, span_ps, size=k, dtype=np.int64))
            out_c.append(np.full(k, ch, dtype=np.uint16))
    return np.concatenate(out_t), np.concatenate(out_c)


@njit(cache=True)
def _dead_time_keep(t, ch, dead):
    last = np.full(dead.size, np.iinfo(np.int64).min // 2, dtype=np.int64)
    keep = np.zeros(t.size, dtype=np.bool_)
    for i in range(t.size):
        c = ch[i]
        if t[i] - last[c] >= dead[c]:
            keep[i] = True
            last[c] = t[i]
    return keep


def apply_dead_time(t, ch, dead_time):
    """Mask of tags surviving a non-paralyzable per-channel dead time."""
    dead = np.asarray(dead_time, dtype=np.float64)
    return _dead_time_keep(np.asarray(t, dtype=np.int64), np.asarray(ch, dtype=np.intp), dead)


def _on_states(emitter, pulses, ss):
    if not emitter.blinking or pulses.n_pulses == 0:
        return np.ones(pulses.n_pulses, dtype=bool)
    trace = sample_telegraph(emitter.tau_on, emitter.tau_off, pulses.duration,
                             _generator(ss, _KEY_TELEGRAPH))
    return trace.state_at(np.arange(pulses.n_pulses, dtype=np.int64) * pulses.period)


def _blocks(n):
    return [(b, b0, min(b0 + BLOCK_PULSES, n)) for b, b0 in enumerate(range(0, n, BLOCK_PULSES))]


def emission_record(emitter: EmitterModel, pulses: PulseTrain, seed) -> EmissionRecord:
    """Emitted cascades (before filtering and detection) for the same seed.

    Uses exactly the draws of :func:`simulate_cascade_stream`.
    """
    ss = as_seed_sequence(seed)
    p_exc = _pulse_probability(emitter)
    on = _on_states(emitter, pulses, ss)
    det = DetectionChain()
    parts = [_block(emitter, det, pulses.period, p_exc, on[b0:b1], ss, b, b0, b1, with_truth=True)
             for b, b0, b1 in _blocks(pulses.n_pulses)]
    if not parts:
        empty = np.zeros(0)
        return EmissionRecord(empty.astype(np.int64), empty, empty, empty.astype(bool), 0, on)
    pulse, t_xx, t_x, h = (np.concatenate(x) for x in zip(*parts))
    return EmissionRecord(pulse, t_xx, t_x, h, pulses.n_pulses, on)


def simulate_cascade_stream(emitter: EmitterModel, detection: DetectionChain, pulses: PulseTrain,
                            seed, workers=1) -> TagStream:
    """Detected XX (channel 0) and X (channel 1) tags for a pulse train.

    Each pulse excites the cascade with the preparation probability while
    the telegraph state is on. The cascade is H-polarized with probability
    ``(1 + dop)/2``; with ``polarization_filter`` only H cascades reach the
    detectors. Each photon then survives with the channel efficiency, gets
    Gaussian jitter, and is merged with Poisson dark counts; finally a
    per-channel dead time is applied to the merged, sorted stream.
    """
    ss = as_seed_sequence(seed)
    p_exc = _pulse_probability(emitter)
    on = _on_states(emitter, pulses, ss)
    blocks = _blocks(pulses.n_pulses)

    def run(blk):
        b, b0, b1 = blk
        return _block(emitter, detection, pulses.period, p_exc, on[b0:b1], ss, b, b0, b1)

    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, blocks))
    else:
        parts = [run(blk) for blk in blocks]
    duration = pulses.duration
    if not parts:
        return TagStream(np.zeros(0, np.int64), np.zeros(0, np.uint16), duration, 2)
    t = np.concatenate([p[0] for p in parts])
    ch = np.concatenate([p[1] for p in parts])
    inside = (t >= 0) & (t <= duration)
    t, ch = t[inside], ch[inside]
    order = np.lexsort((ch, t))
    t, ch = t[order], ch[order]
    keep = apply_dead_time(t, ch, detection.dead_time)
    return TagStream(t[keep], ch[keep], duration, 2)


class ScanPoint(NamedTuple):
    power: float
    x_counts: int
    xx_counts: int
    stream: TagStream


def simulate_power_scan(emitter: EmitterModel, powers, detection: DetectionChain,
                        pulses: PulseTrain, seed, workers=1) -> list[ScanPoint]:
    """Cascade streams over a list of excitation powers.

    The inversion probability at power P is ``occupancy(c*P, xi)`` from the
    emitter's RabiParams; each power uses an independent derived seed.
    """
    if emitter.rabi is None:
        raise ConfigurationError("power scan requires an emitter with RabiParams")
    ss = as_seed_sequence(seed)
    out = []
    for i, power in enumerate(powers):
        if power < 0:
            raise ValidationError("powers", f"negative power {power}")
        stream = simulate_cascade_stream(emitter.at_power(power), detection, pulses,
                                         _child(ss, _KEY_SCAN, i), workers=workers)
        c = stream.counts()
        out.append(ScanPoint(float(power), int(c[CHANNEL_X]), int(c[CHANNEL_XX]), stream))
    return out


def histogram_grid(bin_width, max_delay=None, tau_min=None, n_bins=None):
    """Bin grid: symmetric ``[-max_delay, max_delay)`` or ``tau_min`` + ``n_bins``."""
    if max_delay is not None:
        if max_delay % bin_width:
            raise ValidationError("max_delay", "must be a multiple of bin_width")
        return -int(max_delay), 2 * int(max_delay) // int(bin_width)
    if tau_min is None or n_bins is None:
        raise ValidationError("grid", "give max_delay, or tau_min and n_bins")
    return int(tau_min), int(n_bins)


def synth_histogram(model, params, exposure, rng, *, bin_width, max_delay=None, tau_min=None,
                    n_bins=None) -> Histogram:
    """Poisson-sample ``exposure * model(bin center)`` on a bin grid."""
    if not exposure > 0:
        raise ValidationError("exposure", "must be > 0")
    t0, nb = histogram_grid(bin_width, max_delay, tau_min, n_bins)
    centers = t0 + bin_width * (np.arange(nb) + 0.5)
    mu = exposure * np.asarray(model(centers, **params), dtype=float)
    if np.any(mu < 0) or not np.all(np.isfinite(mu)):
        raise ModelDomainError(f"{getattr(model, '__name__', 'model')} returned negative or non-finite values")
    seed_note = str(rng) if isinstance(rng, (int, np.integer)) else "generator"
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    counts = rng.poisson(mu).astype(np.float64)
    meta = {
        "kind": "synthetic",
        "model": getattr(model, "__name__", repr(model)),
        "params": json.dumps({k: v for k, v in params.items()}, sort_keys=True),
        "exposure": repr(float(exposure)),
        "seed": seed_note,
    }
    return Histogram(int(bin_width), t0, counts, None, meta)


def expected_pair_rate(emitter: EmitterModel):
    """Per-pulse probability of an emitted cascade, ``F * p_on``."""
    return _pulse_probability(emitter) * emitter.on_probability
