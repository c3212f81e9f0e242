"""
Command-line entry point.

Every output file carries provenance in its ``# key=value`` header (tag
files in a ``.meta`` sidecar): the command, the full argv as JSON, the
package version, the seed, the parsed config echo and SHA-256 digests of
all inputs. :func:`replay` re-runs a command from that header.

Exit status: 0 success, 1 validation error, 2 fit non-convergence
(results are still written and flagged), 64 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__, io
from .analysis import (blinking_derived, calibrate_cpol, prep_fidelity_vs_power,
                       visibility_vs_window)
from .config import ExperimentConfig
from .core import DEFAULT_PERIOD_PS, PulseTrain
from .correlate import correlate, decay_histogram, integrate_peaks, normalize_histogram
from .errors import FitError, ModelDomainError, QDCascadeError
from .fit import fit_g2, fit_gaussian_doublet, fit_hom, fit_lifetime, fit_rabi_scan, poisson_sigma
from .simulate import simulate_cascade_stream, simulate_power_scan

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NOT_CONVERGED = 2
EXIT_USAGE = 64

BUNDLED_RABI_SCAN = "rabi_scan.csv"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


class _Run:
    """Collects provenance for one invocation."""

    def __init__(self, command, argv, args):
        self.command = command
        self.argv = list(argv)
        self.args = args
        self.config = None
        self.config_path = None
        self.seed = None
        self.inputs = []
        self.not_converged = False

    def load_config(self, required=False):
        path = getattr(self.args, "config", None)
        if path is None:
            if required:
                raise UsageError(f"{self.command}: --config is required")
            return None
        self.config = ExperimentConfig.from_file(path)
        self.config_path = path
        return self.config

    def option(self, value, key, default=None):
        """Command-line value, else config value, else default."""
        if value is not None:
            return value
        if self.config is not None and key in self.config.values:
            return self.config.values[key]
        return default

    def add_input(self, label, path):
        self.inputs.append((label, str(path), io.file_digest(path)))
        if self.seed is None:
            upstream = read_provenance(path)
            if "seed" in upstream:
                self.seed = upstream["seed"]
        return path

    def metadata(self, **extra):
        meta = {"provenance": self.command, "command": self.command,
                "argv": json.dumps(self.argv), "version": __version__}
        if self.seed is not None:
            meta["seed"] = str(self.seed)
        if self.config is not None:
            text = self.config.to_text()
            meta["config_path"] = self.config_path
            meta["config_sha256"] = hashlib.sha256(text.encode()).hexdigest()
            for k, v in self.config.echo().items():
                meta[f"config.{k}"] = v
        for i, (label, path, digest) in enumerate(self.inputs):
            meta[f"input.{i}.label"] = label
            meta[f"input.{i}.path"] = path
            meta[f"input.{i}.sha256"] = digest
        for k, v in extra.items():
            meta[k] = io.fmt_value(v)
        return meta

    def seed_from(self, value):
        seed = self.option(value, "seed")
        if seed is None:
            raise UsageError(f"{self.command}: a seed is required (--seed or 'seed' in the config)")
        self.seed = int(seed)
        return self.seed


def _fmt(v, e=None):
    if e is None or not np.isfinite(e):
        return f"{v:.6g}"
    return f"{v:.6g} ± {e:.2g}"


def _fit_rows(res, prefix=""):
    return [(prefix + k, v, res.stderrs.get(k, float("nan"))) for k, v in res.params.items()]


def _write_fit(run, path, rows, converged, **extra):
    if not converged:
        run.not_converged = True
    meta = run.metadata(converged=bool(converged), **extra)
    io.write_table(path, meta, ["name", "value", "stderr"], rows)


def _print_rows(rows):
    for name, v, e in rows:
        print(f"  {name:<14s} {_fmt(v, e)}")


def _period(run):
    return int(run.option(getattr(run.args, "period", None), "period_ps", DEFAULT_PERIOD_PS))


# --- subcommands ------------------------------------------------------------

def cmd_simulate(run):
    a = run.args
    cfg = run.load_config(required=True)
    emitter = cfg.emitter()
    if emitter is None:
        raise UsageError("simulate: the config defines no emitter (t1_x_ps, t1_xx_ps)")
    if emitter.rabi is not None and a.power is not None:
        emitter = emitter.at_power(a.power)
    pulses = PulseTrain(cfg.pulses().period, int(run.option(a.n_pulses, "n_pulses", 1)))
    seed = run.seed_from(a.seed)
    stream = simulate_cascade_stream(emitter, cfg.detection(), pulses, seed,
                                     workers=int(run.option(a.workers, "workers", 1)))
    meta = run.metadata(n_pulses=pulses.n_pulses, power="" if a.power is None else a.power)
    io.write_tags(a.out, stream, fmt=a.format, metadata=meta)
    c = stream.counts()
    print(f"simulated {pulses.n_pulses} pulses ({pulses.duration} ps)")
    print(f"  XX tags (ch0)  {int(c[0])}")
    print(f"  X tags  (ch1)  {int(c[1])}")
    print(f"wrote {a.out}")


def cmd_power_scan(run):
    a = run.args
    cfg = run.load_config(required=True)
    emitter = cfg.emitter()
    powers = a.powers if a.powers is not None else cfg.require("powers")
    pulses = PulseTrain(cfg.pulses().period, int(run.option(a.n_pulses, "n_pulses", 1)))
    seed = run.seed_from(a.seed)
    scan = simulate_power_scan(emitter, powers, cfg.detection(), pulses, seed,
                               workers=int(run.option(a.workers, "workers", 1)))
    rows = []
    for p in scan:
        rows.append((p.power, p.x_counts, p.xx_counts, float(p.xx_counts),
                     float(poisson_sigma(p.xx_counts))))
    io.write_table(a.out, run.metadata(n_pulses=pulses.n_pulses),
                   ["power", "x_counts", "xx_counts", "intensity", "sigma"], rows)
    print(f"{'power':>10s} {'X':>9s} {'XX':>9s}")
    for r in rows:
        print(f"{r[0]:10.4g} {r[1]:9d} {r[2]:9d}")
    print(f"wrote {a.out}")


def cmd_correlate(run):
    a = run.args
    run.load_config()
    stream = io.read_tags(run.add_input("tags", a.inp))
    bw = int(run.option(a.bin, "xcorr_bin_ps", 10))
    window = int(run.option(a.window, "xcorr_window_ps", 100_000))
    hist = correlate(stream, a.a, a.b, bw, window,
                     workers=int(run.option(a.workers, "workers", 1)))
    meta = {**hist.metadata, **run.metadata()}
    out = type(hist)(hist.bin_width, hist.tau_min, hist.counts, None, meta)
    io.write_histogram(a.out, out)
    print(f"correlated channel {a.a} -> {a.b}: {int(hist.counts.sum())} pairs in "
          f"{hist.n_bins} bins of {bw} ps over ±{window} ps")
    print(f"wrote {a.out}")


def cmd_peaks(run):
    a = run.args
    run.load_config()
    hist = io.read_histogram(run.add_input("hist", a.inp))
    period = _period(run)
    peaks = integrate_peaks(hist, period)
    rows = [(int(p.n), p.area, p.stderr) for p in peaks]
    io.write_table(a.out, run.metadata(period_ps=period), ["n", "area", "stderr"], rows)
    for n, area, err in rows:
        print(f"  n={n:+4d}  {_fmt(area, err)}")
    print(f"wrote {a.out}")


def cmd_fit_g2(run):
    a = run.args
    run.load_config()
    hist = io.read_histogram(run.add_input("hist", a.inp))
    pulses = PulseTrain(_period(run), 1)
    res = fit_g2(hist, pulses)
    rows = _fit_rows(res)
    if res["m"] > 0:
        try:
            b = blinking_derived(res["m"], res["tau_blink"])
            rows += [("tau_on", b.tau_on, float("nan")), ("tau_off", b.tau_off, float("nan")),
                     ("qe", b.qe, float("nan"))]
        except ModelDomainError:
            pass
    _write_fit(run, a.out, rows, res.converged, chi2=res.meta.get("chi2", float("nan")),
               dof=res.meta.get("dof", 0))
    print(f"g2 fit (converged={res.converged})")
    _print_rows(rows)
    print(f"wrote {a.out}")


def cmd_fit_hom(run):
    a = run.args
    run.load_config()
    co = io.read_histogram(run.add_input("co", a.co))
    cross = io.read_histogram(run.add_input("cross", a.cross))
    fit = fit_hom(co, cross, PulseTrain(_period(run), 1))
    rows = _fit_rows(fit.co, "co.") + _fit_rows(fit.cross, "cross.")
    _write_fit(run, a.out, rows, fit.converged)
    print(f"HOM fit (converged={fit.converged})")
    print(f"  V_ps           {_fmt(*fit.V_ps)}")
    print(f"  tau2           {_fmt(*fit.tau2)} ps")
    print(f"wrote {a.out}")


def cmd_fit_rabi(run):
    a = run.args
    run.load_config()
    path = a.inp if a.inp is not None else io.bundled_path(BUNDLED_RABI_SCAN)
    meta, cols, rows = io.read_table(run.add_input("scan", path))
    names = ["power", "intensity"] + (["sigma"] if "sigma" in cols else [])
    _, arrays = io.read_columns(path, *names)
    sigma = arrays[2] if len(arrays) == 3 else poisson_sigma(arrays[1])
    res = fit_rabi_scan(arrays[0], arrays[1], sigma)
    rows = _fit_rows(res)
    _write_fit(run, a.out, rows, res.converged)
    print(f"Rabi fit (converged={res.converged})")
    _print_rows(rows)
    print(f"wrote {a.out}")


def cmd_fit_lifetime(run):
    a = run.args
    run.load_config()
    run.add_input("decay", a.inp)
    if io.is_tag_file(a.inp):
        if a.channel is None or a.bin is None:
            raise UsageError("fit-lifetime: tag input needs --channel and --bin")
        stream = io.read_tags(a.inp)
        hist = decay_histogram(stream, a.channel, _period(run), a.bin, offset=a.offset)
    else:
        hist = io.read_histogram(a.inp)
    res = fit_lifetime(hist, (a.start, a.end))
    rows = _fit_rows(res)
    _write_fit(run, a.out, rows, res.converged)
    print(f"lifetime fit over [{a.start}, {a.end}) ps (converged={res.converged})")
    _print_rows(rows)
    print(f"wrote {a.out}")


def cmd_fit_spectrum(run):
    a = run.args
    run.load_config()
    _, cols, _ = io.read_table(run.add_input("spectrum", a.inp))
    names = ["energy", "counts"] + (["sigma"] if "sigma" in cols else [])
    _, arrays = io.read_columns(a.inp, *names)
    res = fit_gaussian_doublet(arrays[0], arrays[1], arrays[2] if len(arrays) == 3 else None,
                               fit_offset=not a.no_offset, equal_widths=a.equal_widths)
    rows = _fit_rows(res)
    _write_fit(run, a.out, rows, res.converged, degenerate=bool(res.meta["degenerate"]))
    print(f"doublet fit (converged={res.converged}, degenerate={res.meta['degenerate']})")
    _print_rows(rows)
    print(f"wrote {a.out}")


def _cpol_from_calibration(run, path, dop):
    meta = io.read_meta(run.add_input("calibration", path))
    if "coeffs" not in meta:
        raise UsageError("prep-fidelity: calibration file has no 'coeffs' header")
    coeffs = json.loads(meta["coeffs"])
    return float(np.polyval(coeffs, dop))


def cmd_prep_fidelity(run):
    a = run.args
    run.load_config()
    if (a.cpol is None) == (a.calibration is None):
        raise UsageError("prep-fidelity: give exactly one of --cpol or --calibration")
    if a.power is not None and len(a.power) != len(a.inp):
        raise UsageError("prep-fidelity: --power must be given once per --in")
    hists = [io.read_histogram(run.add_input(f"hist{i}", p)) for i, p in enumerate(a.inp)]
    if a.cpol is not None:
        c_pol = a.cpol
    else:
        dop = run.option(a.dop, "dop")
        if dop is None:
            raise UsageError("prep-fidelity: --calibration needs --dop (or 'dop' in the config)")
        c_pol = _cpol_from_calibration(run, a.calibration, dop)
    powers = a.power if a.power is not None else [float(i) for i in range(len(hists))]
    points = prep_fidelity_vs_power(list(zip(powers, hists)), c_pol, _period(run))
    rows = [(p.power, p.F, p.stderr, p.error or "") for p in points]
    io.write_table(a.out, run.metadata(c_pol=c_pol), ["power", "F", "stderr", "error"], rows)
    print(f"C_Pol = {c_pol:.4g}")
    for p in points:
        if p.error:
            print(f"  power {p.power:g}: F undefined ({p.error})")
        else:
            print(f"  power {p.power:g}: F = {_fmt(p.F, p.stderr)}")
    print(f"wrote {a.out}")
    if all(p.error for p in points):
        return EXIT_VALIDATION
    return EXIT_OK


def cmd_calibrate_cpol(run):
    a = run.args
    cfg = run.load_config(required=True)
    emitter = cfg.emitter()
    dops = cfg.require("dop_values")
    pulses = PulseTrain(cfg.pulses().period, int(run.option(a.n_pulses, "n_pulses", 1)))
    seed = run.seed_from(a.seed)
    cal = calibrate_cpol(dops, emitter, cfg.detection(), pulses, seed,
                         bin_width=int(cfg.get("xcorr_bin_ps", 10)),
                         max_delay=int(cfg.get("xcorr_window_ps", 100_000)),
                         max_rel_err=a.max_rel_err,
                         workers=int(run.option(a.workers, "workers", 1)))
    rows = list(zip(cal.dop.tolist(), cal.cpol.tolist(), cal.cpol_err.tolist(),
                    cal.f_unfiltered.tolist()))
    meta = run.metadata(coeffs=json.dumps([float(c) for c in cal.coeffs]), f_prep=cal.f_prep,
                        n_pulses=pulses.n_pulses)
    io.write_table(a.out, meta, ["dop", "cpol", "cpol_err", "f_unfiltered"], rows)
    print(f"{'DOP':>6s} {'C_Pol':>16s} {'F unfiltered':>13s}")
    for d, c, e, f in rows:
        print(f"{d:6.3f} {_fmt(c, e):>16s} {f:13.4f}")
    print(f"quadratic fit: C_Pol(DOP) = {cal.coeffs[0]:.4g} DOP^2 + {cal.coeffs[1]:.4g} DOP "
          f"+ {cal.coeffs[2]:.4g}")
    if "dop" in cfg.values:
        print(f"C_Pol at config DOP {cfg.values['dop']:g}: {cal(cfg.values['dop']):.4g}")
    print(f"wrote {a.out}")


def cmd_hom_visibility(run):
    a = run.args
    run.load_config()
    if (a.window is None) == (a.windows is None):
        raise UsageError("hom-visibility: give exactly one of --window or --windows")
    period = _period(run)
    co = io.read_histogram(run.add_input("co", a.co))
    cross = io.read_histogram(run.add_input("cross", a.cross))
    co = normalize_histogram(co, period, a.far_index)
    cross = normalize_histogram(cross, period, a.far_index)
    windows = [a.window] if a.window is not None else a.windows
    points = visibility_vs_window(co, cross, windows, period)
    rows = [(p.window, p.V, p.stderr, p.captured_fraction) for p in points]
    io.write_table(a.out, run.metadata(norm_co=co.norm, norm_cross=cross.norm),
                   ["window_ps", "V", "stderr", "captured_fraction"], rows)
    for w, v, e, f in rows:
        print(f"  window {w:8.0f} ps: V = {_fmt(v, e)}  (captures {100 * f:.1f}% of the peak)")
    print(f"wrote {a.out}")


def cmd_replay(run):
    return replay(run.args.path)


# --- parser -----------------------------------------------------------------

def _floats(s):
    return [float(x) for x in s.split(",") if x.strip()]


def build_parser():
    p = _Parser(prog="qdcascade", description="Quantum-dot cascade simulation and analysis.")
    p.add_argument("--version", action="version", version=f"qdcascade {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def add(name, func, help):
        sp = sub.add_parser(name, help=help, description=help)
        sp.set_defaults(func=func)
        sp.add_argument("--config", help="experiment config (key = value)")
        return sp

    def common_sim(sp):
        sp.add_argument("--seed", type=int)
        sp.add_argument("--n-pulses", type=int)
        sp.add_argument("--workers", type=int)

    sp = add("simulate", cmd_simulate, "simulate a two-channel XX/X tag stream")
    common_sim(sp)
    sp.add_argument("--power", type=float, help="excitation power (needs rabi_* keys)")
    sp.add_argument("--format", choices=("binary", "text"), default="binary")
    sp.add_argument("--out", required=True)

    sp = add("power-scan", cmd_power_scan, "simulate counts versus excitation power")
    common_sim(sp)
    sp.add_argument("--powers", type=_floats, help="comma-separated powers")
    sp.add_argument("--out", required=True)

    sp = add("correlate", cmd_correlate, "cross-correlate two channels of a tag file")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--a", type=int, default=0, help="start channel")
    sp.add_argument("--b", type=int, default=1, help="stop channel")
    sp.add_argument("--bin", type=int, help="bin width in ps")
    sp.add_argument("--window", type=int, help="max |delay| in ps")
    sp.add_argument("--workers", type=int)
    sp.add_argument("--out", required=True)

    sp = add("peaks", cmd_peaks, "integrate full-period peak areas")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--period", type=int)
    sp.add_argument("--out", required=True)

    sp = add("fit-g2", cmd_fit_g2, "fit the pulsed g2 model with blinking")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--period", type=int)
    sp.add_argument("--out", required=True)

    sp = add("fit-hom", cmd_fit_hom, "fit co- and cross-polarized HOM histograms")
    sp.add_argument("--co", required=True)
    sp.add_argument("--cross", required=True)
    sp.add_argument("--period", type=int)
    sp.add_argument("--out", required=True)

    sp = add("fit-rabi", cmd_fit_rabi, "fit a Rabi power scan")
    sp.add_argument("--in", dest="inp", help="scan table (default: bundled synthetic scan)")
    sp.add_argument("--out", required=True)

    sp = add("fit-lifetime", cmd_fit_lifetime, "mono-exponential lifetime fit")
    sp.add_argument("--in", dest="inp", required=True, help="decay histogram or tag file")
    sp.add_argument("--channel", type=int)
    sp.add_argument("--bin", type=int)
    sp.add_argument("--period", type=int)
    sp.add_argument("--offset", type=int, default=0)
    sp.add_argument("--start", type=float, required=True)
    sp.add_argument("--end", type=float, required=True)
    sp.add_argument("--out", required=True)

    sp = add("fit-spectrum", cmd_fit_spectrum, "fit a two-Gaussian spectral doublet")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--equal-widths", action="store_true")
    sp.add_argument("--no-offset", action="store_true")
    sp.add_argument("--out", required=True)

    sp = add("prep-fidelity", cmd_prep_fidelity, "preparation fidelity from XX-X correlations")
    sp.add_argument("--in", dest="inp", required=True, action="append")
    sp.add_argument("--power", type=float, action="append")
    sp.add_argument("--cpol", type=float)
    sp.add_argument("--calibration")
    sp.add_argument("--dop", type=float)
    sp.add_argument("--period", type=int)
    sp.add_argument("--out", required=True)

    sp = add("calibrate-cpol", cmd_calibrate_cpol, "simulate the C_Pol(DOP) calibration curve")
    common_sim(sp)
    sp.add_argument("--max-rel-err", type=float, default=0.05)
    sp.add_argument("--out", required=True)

    sp = add("hom-visibility", cmd_hom_visibility, "HOM visibility versus integration window")
    sp.add_argument("--co", required=True)
    sp.add_argument("--cross", required=True)
    sp.add_argument("--window", type=float)
    sp.add_argument("--windows", type=_floats)
    sp.add_argument("--far-index", type=int, default=3)
    sp.add_argument("--period", type=int)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("replay", help="re-run the command recorded in an output file")
    sp.set_defaults(func=cmd_replay)
    sp.add_argument("path")
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("qdcascade: error: a command is required")
        run = _Run(args.command, argv, args)
        status = args.func(run)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        print(parser.format_usage().rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except FitError as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except (QDCascadeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    if status:
        return status
    if run.not_converged:
        print("warning: fit did not converge; results written and flagged", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


# --- replay -----------------------------------------------------------------

def read_provenance(path):
    """Provenance header of an output file (tag files use their sidecar)."""
    path = str(path)
    if os.path.exists(path + ".meta"):
        return io.read_meta(path + ".meta")
    if io.is_tag_file(path):
        return {}
    try:
        return io.read_meta(path)
    except UnicodeDecodeError:
        return {}


def replay(path):
    """Re-run the command that produced ``path``.

    Recorded input digests are checked first. A missing config file is
    restored from the embedded echo, whose digest is what the header
    records, so the regenerated output is byte-identical; an existing
    config must still match that echo.
    """
    meta = read_provenance(path)
    if "argv" not in meta:
        print(f"error: {path} carries no provenance", file=sys.stderr)
        return EXIT_VALIDATION
    argv = json.loads(meta["argv"])
    if "config_path" in meta:
        cfg_text = "".join(f"{k[len('config.'):]} = {v}\n" for k, v in meta.items()
                           if k.startswith("config."))
        digest = hashlib.sha256(cfg_text.encode()).hexdigest()
        if digest != meta.get("config_sha256"):
            print("error: embedded config echo does not match its digest", file=sys.stderr)
            return EXIT_VALIDATION
        cfg_path = meta["config_path"]
        if not os.path.exists(cfg_path):
            with open(cfg_path, "w", encoding="utf-8", newline="\n") as f:
                f.write(cfg_text)
        else:
            try:
                current = ExperimentConfig.from_file(cfg_path).to_text()
            except QDCascadeError:
                current = None
            if current != cfg_text:
                print(f"error: config {cfg_path} changed since the recorded run", file=sys.stderr)
                return EXIT_VALIDATION
    i = 0
    while f"input.{i}.path" in meta:
        p, want = meta[f"input.{i}.path"], meta[f"input.{i}.sha256"]
        if not os.path.exists(p) or io.file_digest(p) != want:
            print(f"error: input {p} is missing or changed since the recorded run", file=sys.stderr)
            return EXIT_VALIDATION
        i += 1
    return main(argv)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
