"""
Domain types for the XX-X cascade toolkit.

All times are picoseconds. Timestamps are integers, model parameters are
floats. Every type validates itself on construction and is immutable
afterwards; array-backed types hand out read-only views.

Channel convention: 0 = XX detector, 1 = X detector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Iterator, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import ValidationError

CHANNEL_XX = 0
CHANNEL_X = 1
CHANNEL_NAMES = {CHANNEL_XX: "XX", CHANNEL_X: "X"}

#: 80 MHz laser repetition period
DEFAULT_PERIOD_PS = 12_500
#: Gaussian FWHM -> sigma
FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


def _readonly(arr):
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


def _check(cond, fieldname, message):
    if not cond:
        raise ValidationError(fieldname, message)


def _per_channel(value, fieldname, n=2):
    """Broadcast a scalar or length-n sequence to a tuple of n floats."""
    if np.ndim(value) == 0:
        return (float(value),) * n
    vals = tuple(float(v) for v in value)
    _check(len(vals) == n, fieldname, f"expected {n} per-channel values, got {len(vals)}")
    return vals


class TimeTag(NamedTuple):
    channel: int
    t: int


class TagStream:
    """Sorted, channel-labelled detector clicks.

    Parameters
    ----------
    t : array_like of int
        Timestamps in ps, sorted ascending (ties ordered by channel).
    channel : array_like of int
        Channel of each tag.
    duration : int
        Stream length in ps; every tag satisfies ``t <= duration``.
    channel_count : int
        Number of channels; every tag satisfies ``channel < channel_count``.
    """

    __slots__ = ("_t", "_channel", "duration", "channel_count")

    def __init__(self, t, channel, duration, channel_count=2):
        t = np.asarray(t, dtype=np.int64)
        channel = np.asarray(channel, dtype=np.uint16)
        _check(t.ndim == 1 and t.shape == channel.shape, "tags",
               "timestamp and channel arrays must be 1-d and of equal length")
        duration = int(duration)
        channel_count = int(channel_count)
        _check(duration >= 0, "duration", "must be >= 0")
        _check(0 < channel_count < 65536, "channel_count", "must be in [1, 65535]")
        if t.size:
            _check(t[0] >= 0, "t", "timestamps must be >= 0")
            _check(t[-1] <= duration, "t", f"timestamp {int(t[-1])} exceeds duration {duration}")
            _check(int(channel.max()) < channel_count, "channel",
                   f"channel {int(channel.max())} >= channel_count {channel_count}")
            bad = first_unsorted_index(t, channel)
            _check(bad < 0, "t", f"tags not sorted at index {bad}")
        object.__setattr__(self, "_t", _readonly(t))
        object.__setattr__(self, "_channel", _readonly(channel))
        object.__setattr__(self, "duration", duration)
        object.__setattr__(self, "channel_count", channel_count)

    def __setattr__(self, name, value):
        raise AttributeError("TagStream is immutable")

    @property
    def t(self):
        return self._t

    @property
    def channel(self):
        return self._channel

    def __len__(self):
        return self._t.size

    def __getitem__(self, i) -> TimeTag:
        return TimeTag(int(self._channel[i]), int(self._t[i]))

    def __iter__(self) -> Iterator[TimeTag]:
        for c, t in zip(self._channel.tolist(), self._t.tolist()):
            yield TimeTag(c, t)

    def __eq__(self, other):
        if not isinstance(other, TagStream):
            return NotImplemented
        return (self.duration == other.duration
                and self.channel_count == other.channel_count
                and np.array_equal(self._t, other._t)
                and np.array_equal(self._channel, other._channel))

    def __repr__(self):
        return (f"TagStream(n={len(self)}, duration={self.duration}, "
                f"channel_count={self.channel_count})")

    def times(self, channel):
        """Timestamps of one channel (sorted)."""
        _check(0 <= channel < self.channel_count, "channel",
               f"unknown channel {channel} (channel_count={self.channel_count})")
        return self._t[self._channel == channel]

    def counts(self):
        return np.bincount(self._channel, minlength=self.channel_count)

    @classmethod
    def from_tags(cls, tags, duration=None, channel_count=2, sort=False):
        tags = list(tags)
        ch = np.array([tg[0] for tg in tags], dtype=np.uint16)
        t = np.array([tg[1] for tg in tags], dtype=np.int64)
        if sort:
            order = np.lexsort((ch, t))
            t, ch = t[order], ch[order]
        if duration is None:
            duration = int(t.max()) if t.size else 0
        return cls(t, ch, duration, channel_count)


def first_unsorted_index(t, channel):
    """Index of the first tag violating (t, channel) order, or -1."""
    if t.size < 2:
        return -1
    dt = np.diff(t)
    bad = (dt < 0) | ((dt == 0) & (np.diff(channel.astype(np.int32)) < 0))
    idx = np.flatnonzero(bad)
    return int(idx[0]) + 1 if idx.size else -1


@dataclass(frozen=True)
class Histogram:
    """Uniformly binned coincidence counts over delay τ.

    Bin ``i`` covers ``[tau_min + i*bin_width, tau_min + (i+1)*bin_width)``.
    Counts are floats because blinking correction and normalization rescale
    them.
    """

    bin_width: int
    tau_min: int
    counts: np.ndarray
    norm: float | None = None
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        _check(int(self.bin_width) == self.bin_width and self.bin_width > 0,
               "bin_width", "must be a positive integer")
        _check(int(self.tau_min) == self.tau_min, "tau_min", "must be an integer")
        counts = np.asarray(self.counts, dtype=np.float64)
        _check(counts.ndim == 1, "counts", "must be 1-d")
        _check(bool(np.all(np.isfinite(counts))), "counts", "must be finite")
        _check(bool(np.all(counts >= 0)), "counts", "must be non-negative")
        _check(self.tau_min % self.bin_width == 0, "tau_min",
               "tau = 0 must lie on a bin boundary (tau_min multiple of bin_width)")
        if self.norm is not None:
            _check(math.isfinite(self.norm) and self.norm > 0, "norm", "must be positive")
        object.__setattr__(self, "bin_width", int(self.bin_width))
        object.__setattr__(self, "tau_min", int(self.tau_min))
        object.__setattr__(self, "counts", _readonly(counts))
        object.__setattr__(self, "metadata", MappingProxyType(
            {str(k): str(v) for k, v in dict(self.metadata).items()}))

    @property
    def n_bins(self):
        return self.counts.size

    @property
    def tau_max(self):
        """Upper edge of the last bin (exclusive)."""
        return self.tau_min + self.n_bins * self.bin_width

    @property
    def edges(self):
        return self.tau_min + self.bin_width * np.arange(self.n_bins + 1, dtype=np.int64)

    @property
    def centers(self):
        return self.tau_min + self.bin_width * (np.arange(self.n_bins) + 0.5)

    def with_counts(self, counts, norm=None, **metadata):
        """Copy with new counts; metadata is merged with ``metadata``."""
        meta = dict(self.metadata)
        meta.update({k: str(v) for k, v in metadata.items()})
        return Histogram(self.bin_width, self.tau_min, counts,
                         self.norm if norm is None else norm, meta)

    def window_mask(self, lo, hi):
        """Bins whose centers lie in [lo, hi)."""
        c = self.centers
        return (c >= lo) & (c < hi)

    def __eq__(self, other):
        if not isinstance(other, Histogram):
            return NotImplemented
        return (self.bin_width == other.bin_width and self.tau_min == other.tau_min
                and np.array_equal(self.counts, other.counts)
                and self.norm == other.norm and dict(self.metadata) == dict(other.metadata))


@dataclass(frozen=True)
class PulseTrain:
    period: int = DEFAULT_PERIOD_PS
    n_pulses: int = 1

    def __post_init__(self):
        _check(int(self.period) == self.period and self.period > 0, "period",
               "must be a positive integer (ps)")
        _check(int(self.n_pulses) == self.n_pulses and self.n_pulses >= 0, "n_pulses",
               "must be a non-negative integer")
        object.__setattr__(self, "period", int(self.period))
        object.__setattr__(self, "n_pulses", int(self.n_pulses))

    @property
    def duration(self):
        return self.period * self.n_pulses


@dataclass(frozen=True)
class RabiParams:
    """Damped Rabi drive: pulse area ``theta = power_to_area * power``."""

    xi: float
    power_to_area: float
    p_pi: float | None = None

    def __post_init__(self):
        _check(0.0 <= self.xi < 2.0, "xi", "must satisfy 0 <= xi < 2")
        _check(math.isfinite(self.power_to_area) and self.power_to_area > 0,
               "power_to_area", "must be positive")
        if self.p_pi is not None:
            _check(self.p_pi > 0, "p_pi", "must be positive")

    def pulse_area(self, power):
        return self.power_to_area * power


@dataclass(frozen=True)
class EmitterModel:
    """Physical parameters of the cascade source.

    Exactly one of ``prep_fidelity`` or ``rabi`` describes the drive. With
    ``rabi`` the pulse area must also be set (see :meth:`at_power`).
    ``tau_on``/``tau_off`` of ``None`` means no blinking.
    """

    t1_x: float
    t1_xx: float
    prep_fidelity: float | None = None
    rabi: RabiParams | None = None
    dop: float = 0.0
    tau_on: float | None = None
    tau_off: float | None = None
    pulse_area: float | None = None

    def __post_init__(self):
        _check(self.t1_x > 0, "t1_x", "must be positive")
        _check(self.t1_xx > 0, "t1_xx", "must be positive")
        _check((self.prep_fidelity is None) != (self.rabi is None), "prep_fidelity",
               "give exactly one of prep_fidelity or rabi")
        if self.prep_fidelity is not None:
            _check(0.0 <= self.prep_fidelity <= 1.0, "prep_fidelity", "must lie in [0, 1]")
        _check(0.0 <= self.dop <= 1.0, "dop", "must lie in [0, 1]")
        _check((self.tau_on is None) == (self.tau_off is None), "tau_on",
               "tau_on and tau_off must be given together")
        if self.tau_on is not None:
            _check(self.tau_on > 0, "tau_on", "must be positive")
            _check(self.tau_off > 0, "tau_off", "must be positive")
        if self.pulse_area is not None:
            _check(self.pulse_area >= 0, "pulse_area", "must be >= 0")

    @property
    def blinking(self):
        return self.tau_on is not None

    @property
    def on_probability(self):
        """Stationary probability of the bright state."""
        if not self.blinking:
            return 1.0
        return self.tau_on / (self.tau_on + self.tau_off)

    def at_power(self, power):
        if self.rabi is None:
            from .errors import ConfigurationError
            raise ConfigurationError("emitter has no RabiParams")
        _check(power >= 0, "power", "must be >= 0")
        return replace(self, pulse_area=self.rabi.pulse_area(power))


@dataclass(frozen=True)
class DetectionChain:
    """Detectors and filtering. Per-channel fields accept a scalar."""

    efficiency: float | Sequence[float] = 1.0
    jitter_fwhm: float = 0.0
    dead_time: float | Sequence[float] = 50_000.0
    dark_rate: float | Sequence[float] = 0.0
    polarization_filter: bool = False

    def __post_init__(self):
        eff = _per_channel(self.efficiency, "efficiency")
        _check(all(0.0 <= e <= 1.0 for e in eff), "efficiency", "must lie in [0, 1]")
        _check(self.jitter_fwhm >= 0, "jitter_fwhm", "must be >= 0")
        dead = _per_channel(self.dead_time, "dead_time")
        _check(all(d >= 0 for d in dead), "dead_time", "must be >= 0")
        dark = _per_channel(self.dark_rate, "dark_rate")
        _check(all(d >= 0 for d in dark), "dark_rate", "must be >= 0")
        object.__setattr__(self, "efficiency", eff)
        object.__setattr__(self, "dead_time", dead)
        object.__setattr__(self, "dark_rate", dark)
        object.__setattr__(self, "polarization_filter", bool(self.polarization_filter))

    @property
    def jitter_sigma(self):
        return self.jitter_fwhm * FWHM_TO_SIGMA


class Peak(NamedTuple):
    n: int
    area: float
    stderr: float


class PeakSeries:
    """Per-period integrated coincidence areas, indexed by peak number n."""

    __slots__ = ("n", "area", "stderr", "period")

    def __init__(self, n, area, stderr, period):
        n = np.asarray(n, dtype=np.int64)
        area = np.asarray(area, dtype=np.float64)
        stderr = np.asarray(stderr, dtype=np.float64)
        _check(n.ndim == 1 and n.shape == area.shape == stderr.shape, "entries",
               "n, area, stderr must be equal-length 1-d arrays")
        _check(np.unique(n).size == n.size, "n", "peak indices must be unique")
        _check(bool(np.all(area >= 0)), "area", "must be non-negative")
        _check(int(period) > 0, "period", "must be positive")
        order = np.argsort(n)
        object.__setattr__(self, "n", _readonly(n[order]))
        object.__setattr__(self, "area", _readonly(area[order]))
        object.__setattr__(self, "stderr", _readonly(stderr[order]))
        object.__setattr__(self, "period", int(period))

    def __setattr__(self, name, value):
        raise AttributeError("PeakSeries is immutable")

    def __len__(self):
        return self.n.size

    def __iter__(self) -> Iterator[Peak]:
        for n, a, s in zip(self.n.tolist(), self.area.tolist(), self.stderr.tolist()):
            yield Peak(n, a, s)

    def __getitem__(self, n) -> Peak:
        idx = np.flatnonzero(self.n == n)
        if not idx.size:
            raise KeyError(n)
        i = idx[0]
        return Peak(int(self.n[i]), float(self.area[i]), float(self.stderr[i]))

    def __contains__(self, n):
        return bool(np.any(self.n == n))

    def __repr__(self):
        return f"PeakSeries(n={self.n.tolist()}, period={self.period})"

    @property
    def side(self):
        """Mask of the non-center entries."""
        return self.n != 0


@dataclass(frozen=True)
class FitResult:
    """Outcome of a least-squares fit.

    ``meta`` carries extras (covariance, chi², flags) that do not fit the
    name→value maps.
    """

    params: Mapping[str, float]
    stderrs: Mapping[str, float]
    residual_norm: float
    converged: bool
    n_iter: int
    meta: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        _check(set(self.stderrs) <= set(self.params), "stderrs",
               "keys must be a subset of params")
        _check(self.residual_norm >= 0 or math.isnan(self.residual_norm), "residual_norm",
               "must be >= 0")
        object.__setattr__(self, "params", MappingProxyType(dict(self.params)))
        object.__setattr__(self, "stderrs", MappingProxyType(dict(self.stderrs)))
        object.__setattr__(self, "meta", MappingProxyType(dict(self.meta)))

    def __getitem__(self, name):
        return self.params[name]

    def err(self, name):
        return self.stderrs.get(name, float("nan"))

    def summary(self):
        lines = []
        for k, v in self.params.items():
            e = self.stderrs.get(k)
            lines.append(f"{k} = {v:.6g}" + (f" ± {e:.2g}" if e is not None else ""))
        lines.append(f"converged = {self.converged} ({self.n_iter} iterations)")
        return "\n".join(lines)
