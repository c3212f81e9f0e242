"""
Single-emitter characterization: Rabi rotations, lifetimes, spectra.

Fits the bundled synthetic power scan with the damped-rotation model,
extracts the X and XX lifetimes from a simulated jittered decay, and
resolves the fine-structure doublets with a two-Gaussian fit.
Run: python3 demos/rabi_spectra_lifetimes.py
"""
import math

import numpy as np

from qdcascade import CHANNEL_X, CHANNEL_XX, DetectionChain, EmitterModel, PulseTrain, io
from qdcascade.correlate import decay_histogram
from qdcascade.fit import (fit_gaussian_doublet, fit_lifetime, fit_rabi_scan, gaussian_doublet,
                           occupancy, rabi_envelope)
from qdcascade.simulate import simulate_cascade_stream

# =============================================================================
# Rabi rotations
_, (power, intensity, sigma) = io.read_columns(io.bundled_path("rabi_scan.csv"),
                                               "power", "intensity", "sigma")
res = fit_rabi_scan(power, intensity, sigma)
print("Rabi scan (bundled, 61 powers)")
for k in ("xi", "P_pi", "F_prep"):
    print(f"  {k:<7s} {res[k]:.4f} ± {res.err(k):.4f}")
print(f"  occupancy at pi / 2pi: {occupancy(math.pi, res['xi']):.3f} / "
      f"{occupancy(2 * math.pi, res['xi']):.3f}")
print(f"  envelope at pi: {rabi_envelope(math.pi, res['xi']):.4f}\n")

# =============================================================================
# Lifetimes from a simulated decay with 50 ps detector jitter
emitter = EmitterModel(1210.0, 340.0, prep_fidelity=1.0)
det = DetectionChain(efficiency=1.0, jitter_fwhm=50.0, dead_time=0.0)
stream = simulate_cascade_stream(emitter, det, PulseTrain(12_500, 100_000), 3)
for name, ch, window in (("X", CHANNEL_X, (2000, 9000)), ("XX", CHANNEL_XX, (200, 2200))):
    r = fit_lifetime(decay_histogram(stream, ch, 12_500, 10), window)
    print(f"{name:<2s} lifetime {r['tau1']:6.0f} ± {r.err('tau1'):.0f} ps  "
          f"(fit window {window[0]}-{window[1]} ps)")
print()

# =============================================================================
# Fine-structure doublets on an 8 ueV spectrometer grid
energy = np.arange(-400.0, 400.0, 8.0)
rng = np.random.default_rng(5)
for name, split, fwhm, amp in (("XX", 91.0, 47.0, 80.0), ("X", 83.0, 119.0, 340.0),
                               ("single line", 0.0, 60.0, 300.0)):
    y = rng.poisson(gaussian_doublet(energy, -split / 2, split / 2, fwhm, fwhm, amp, amp, 2.0))
    r = fit_gaussian_doublet(energy, y.astype(float))
    flag = "  (unresolved)" if r.meta["degenerate"] else ""
    print(f"{name:<12s} splitting {r['splitting']:5.1f} ± {r.err('splitting'):4.1f} ueV, "
          f"FWHM {r['fwhm1']:5.1f} / {r['fwhm2']:5.1f} ueV{flag}")
