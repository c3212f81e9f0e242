"""
Flat ``key = value`` experiment configuration.

Blank lines and ``#`` comments are ignored; unknown keys are rejected.
Per-channel detector fields take one value or a comma-separated pair.
"""

from __future__ import annotations

from dataclasses import dataclass

from .core import DEFAULT_PERIOD_PS, DetectionChain, EmitterModel, PulseTrain, RabiParams
from .errors import ValidationError


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s):
    vals = [float(x) for x in s.split(",") if x.strip()]
    if not vals:
        raise ValueError("empty list")
    return vals


def _per_channel(s):
    vals = _floats(s)
    if len(vals) not in (1, 2):
        raise ValueError("expected one value or two comma-separated values")
    return vals[0] if len(vals) == 1 else tuple(vals)


KEYS = {
    # emitter
    "t1_x_ps": float,
    "t1_xx_ps": float,
    "prep_fidelity": float,
    "dop": float,
    "tau_on_ps": float,
    "tau_off_ps": float,
    "rabi_xi": float,
    "rabi_power_to_area": float,
    "rabi_p_pi": float,
    # detection
    "efficiency": _per_channel,
    "jitter_fwhm_ps": float,
    "dead_time_ps": _per_channel,
    "dark_rate_cps": _per_channel,
    "polarization_filter": _bool,
    # pulses and randomness
    "period_ps": int,
    "n_pulses": int,
    "seed": int,
    "workers": int,
    # command options
    "powers": _floats,
    "dop_values": _floats,
    "xcorr_bin_ps": int,
    "xcorr_window_ps": int,
}


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict
    text: str = ""

    @classmethod
    def from_text(cls, text):
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"line {lineno}", f"expected key = value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in KEYS:
                raise ValidationError(key, "unknown configuration key")
            if key in values:
                raise ValidationError(key, "duplicate key")
            try:
                values[key] = KEYS[key](val)
            except ValueError as exc:
                raise ValidationError(key, str(exc)) from exc
        cfg = cls(values, text)
        cfg.emitter()
        cfg.detection()
        cfg.pulses()
        return cfg

    @classmethod
    def from_file(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.from_text(f.read())

    def get(self, key, default=None):
        return self.values.get(key, default)

    def require(self, key):
        if key not in self.values:
            raise ValidationError(key, "required configuration key missing")
        return self.values[key]

    def emitter(self):
        v = self.values
        if "t1_x_ps" not in v and "t1_xx_ps" not in v:
            return None
        rabi = None
        if "rabi_xi" in v or "rabi_power_to_area" in v:
            rabi = RabiParams(self.require("rabi_xi"), self.require("rabi_power_to_area"),
                              v.get("rabi_p_pi"))
        return EmitterModel(
            t1_x=self.require("t1_x_ps"), t1_xx=self.require("t1_xx_ps"),
            prep_fidelity=v.get("prep_fidelity"), rabi=rabi, dop=v.get("dop", 0.0),
            tau_on=v.get("tau_on_ps"), tau_off=v.get("tau_off_ps"))

    def detection(self):
        v = self.values
        kw = {}
        for key, name in (("efficiency", "efficiency"), ("jitter_fwhm_ps", "jitter_fwhm"),
                          ("dead_time_ps", "dead_time"), ("dark_rate_cps", "dark_rate"),
                          ("polarization_filter", "polarization_filter")):
            if key in v:
                kw[name] = v[key]
        return DetectionChain(**kw)

    def pulses(self):
        return PulseTrain(self.values.get("period_ps", DEFAULT_PERIOD_PS),
                          self.values.get("n_pulses", 1))

    def echo(self):
        """Canonical ``key -> text`` view of the parsed values."""
        out = {}
        for k in sorted(self.values):
            v = self.values[k]
            if isinstance(v, (list, tuple)):
                out[k] = ",".join(repr(float(x)) for x in v)
            elif isinstance(v, bool):
                out[k] = "true" if v else "false"
            elif isinstance(v, float):
                out[k] = repr(v)
            else:
                out[k] = str(v)
        return out

    def to_text(self):
        return "".join(f"{k} = {v}\n" for k, v in self.echo().items())
