"""
Two-photon interference of consecutive XX photons.

Builds co- and cross-polarized HOM histograms from the unbalanced
Mach-Zehnder model, fits the post-selected visibility and the dip width,
then integrates the normalized center peaks over shrinking windows with
and without a flat background of uncorrelated coincidences.
Run: python3 demos/hom_visibility.py
"""
from qdcascade import PulseTrain
from qdcascade.analysis import v_max_tpe, visibility_from_areas, visibility_vs_window
from qdcascade.correlate import normalize_histogram
from qdcascade.fit import fit_hom, model_hom_co, model_hom_cross
from qdcascade.simulate import synth_histogram

# =============================================================================
PERIOD = 12_500
COMMON = dict(A=0.5, tau1=360.0, tau0=PERIOD, m=1.41, tau_blink=32_000.0, C0=1.0)
CO = dict(COMMON, V_ps=0.73, tau2=150.0)
EXPOSURE = 1e5 / 72.0         # 1e5 counts in each far peak
WINDOWS = [12_500, 8000, 4000, 2000, 1000, 500, 200]
# =============================================================================

print(f"lifetime-ratio bound V_max = {v_max_tpe(1210.0, 340.0):.3f}")
print(f"table areas 2.48 / 3.88 -> V = {visibility_from_areas(2.48, 3.88):.3f}\n")


def pair(floor, seed):
    out = []
    for i, (model, p) in enumerate(((model_hom_co, CO), (model_hom_cross, COMMON))):
        h = synth_histogram(lambda tau, **kw: model(tau, **kw) + floor, p, EXPOSURE, seed + i,
                            bin_width=10, max_delay=100_000)
        out.append(h)
    return out


co, cross = pair(0.0, 1)
fit = fit_hom(co, cross, PulseTrain(PERIOD, 1))
print(f"model fit: V_ps = {fit.V_ps[0]:.3f} ± {fit.V_ps[1]:.3f}, "
      f"tau2 = {fit.tau2[0]:.0f} ± {fit.tau2[1]:.0f} ps (injected 0.73, 150 ps)\n")

for floor in (0.0, 0.05):
    co, cross = pair(floor, 10)
    co, cross = normalize_histogram(co, PERIOD, 3), normalize_histogram(cross, PERIOD, 3)
    print(f"background {floor:.2f} of the peak height")
    print(f"  {'window':>8s} {'V':>14s} {'captured':>9s}")
    for p in visibility_vs_window(co, cross, WINDOWS, PERIOD):
        print(f"  {p.window:8.0f} {p.V:7.3f} ± {p.stderr:.3f} {100 * p.captured_fraction:8.1f}%")
    print()
