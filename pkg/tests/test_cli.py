import json
import os
import shutil
import subprocess
import sys

import numpy as np
import pytest

from qdcascade import Histogram, io
from qdcascade.cli import (EXIT_NOT_CONVERGED, EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, main,
                           read_provenance, replay)
from qdcascade.fit import gaussian_doublet, model_g2, model_hom_co, model_hom_cross
from qdcascade.simulate import synth_histogram

CONFIG = """\
# small paper-like scenario
t1_x_ps = 1210
t1_xx_ps = 340
prep_fidelity = 0.81
dop = 0.33
tau_on_ps = 20300
tau_off_ps = 100700
efficiency = 1.0
jitter_fwhm_ps = 50
dead_time_ps = 5000
dark_rate_cps = 0
polarization_filter = true
period_ps = 12500
n_pulses = 200000
seed = 7
dop_values = 0, 0.25, 0.5, 0.75, 1
xcorr_bin_ps = 10
xcorr_window_ps = 100000
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """Directory holding a config and one output of every subcommand."""
    d = tmp_path_factory.mktemp("cli")
    cwd = os.getcwd()
    os.chdir(d)
    try:
        (d / "exp.cfg").write_text(CONFIG)
        rabi = CONFIG.replace("prep_fidelity = 0.81\n", "rabi_xi = 0.1\nrabi_power_to_area = "
                              "3.141592653589793\npowers = 0.5, 1.0, 1.5\n")
        (d / "rabi.cfg").write_text(rabi)
        g2 = synth_histogram(model_g2, dict(g2_0=0.015, tau1=1440.0, tau0=12_500.0, m=4.96,
                                            tau_blink=16_900.0, C0=1.0), 40.0, 1,
                             bin_width=10, max_delay=100_000)
        io.write_histogram("g2.hist", g2)
        hom = dict(A=0.5, tau1=360.0, tau0=12_500.0, m=1.41, tau_blink=32_000.0, C0=1.0)
        io.write_histogram("co.hist", synth_histogram(model_hom_co, dict(hom, V_ps=0.73, tau2=150.0),
                                                      139.0, 2, bin_width=10, max_delay=100_000))
        io.write_histogram("cross.hist", synth_histogram(model_hom_cross, hom, 139.0, 3,
                                                         bin_width=10, max_delay=100_000))
        e = np.arange(-400.0, 400.0, 8.0)
        y = np.random.default_rng(4).poisson(gaussian_doublet(e, -45.5, 45.5, 47, 47, 60, 60, 2))
        io.write_table("spectrum.csv", {"kind": "spectrum"}, ["energy", "counts"],
                       list(zip(e.tolist(), y.astype(float).tolist())))
        commands = {
            "tags.bin": ["simulate", "--config", "exp.cfg", "--out", "tags.bin"],
            "tags.txt": ["simulate", "--config", "exp.cfg", "--n-pulses", "20000", "--format",
                         "text", "--out", "tags.txt"],
            "scan.csv": ["power-scan", "--config", "rabi.cfg", "--n-pulses", "20000",
                         "--out", "scan.csv"],
            "xcorr.hist": ["correlate", "--config", "exp.cfg", "--in", "tags.bin",
                           "--out", "xcorr.hist"],
            "peaks.csv": ["peaks", "--in", "xcorr.hist", "--period", "12500", "--out", "peaks.csv"],
            "g2fit.csv": ["fit-g2", "--in", "g2.hist", "--out", "g2fit.csv"],
            "homfit.csv": ["fit-hom", "--co", "co.hist", "--cross", "cross.hist",
                           "--out", "homfit.csv"],
            "rabi.csv": ["fit-rabi", "--out", "rabi.csv"],
            "life.csv": ["fit-lifetime", "--in", "tags.bin", "--channel", "0", "--bin", "10",
                         "--period", "12500", "--start", "200", "--end", "2200",
                         "--out", "life.csv"],
            "doublet.csv": ["fit-spectrum", "--in", "spectrum.csv", "--out", "doublet.csv"],
            "cal.csv": ["calibrate-cpol", "--config", "exp.cfg", "--n-pulses", "500000",
                        "--out", "cal.csv"],
            "fid.csv": ["prep-fidelity", "--config", "exp.cfg", "--in", "xcorr.hist",
                        "--calibration", "cal.csv", "--out", "fid.csv"],
            "vis.csv": ["hom-visibility", "--co", "co.hist", "--cross", "cross.hist",
                        "--windows", "12500,4000,1000", "--out", "vis.csv"],
        }
        status = {out: main(argv) for out, argv in commands.items()}
        yield d, commands, status
    finally:
        os.chdir(cwd)


def test_every_subcommand_succeeds(work):
    _, _, status = work
    assert status == {k: EXIT_OK for k in status}


@pytest.mark.parametrize("out", ["tags.bin", "tags.txt", "scan.csv", "xcorr.hist", "peaks.csv",
                                 "g2fit.csv", "homfit.csv", "rabi.csv", "life.csv", "doublet.csv",
                                 "cal.csv", "fid.csv", "vis.csv"])
def test_replay_is_byte_identical(work, out, monkeypatch):
    d, _, _ = work
    monkeypatch.chdir(d)
    before = (d / out).read_bytes()
    os.utime(d / out, (0, 0))
    assert replay(out) == EXIT_OK
    assert os.stat(d / out).st_mtime > 0  # regenerated in place
    assert (d / out).read_bytes() == before


def table(d, name):
    return io.read_table(d / name)


def values(d, name):
    _, _, rows = table(d, name)
    return {r[0]: float(r[1]) for r in rows}


def test_provenance_fields(work):
    d, commands, _ = work
    meta = read_provenance(d / "xcorr.hist")
    assert meta["command"] == "correlate"
    assert json.loads(meta["argv"]) == commands["xcorr.hist"]
    assert meta["seed"] == "7"
    assert meta["config.prep_fidelity"] == "0.81"
    assert meta["input.0.sha256"] == io.file_digest(d / "tags.bin")
    assert read_provenance(d / "tags.bin")["n_pulses"] == "200000"


def test_fit_outputs(work):
    d, _, _ = work
    g2 = values(d, "g2fit.csv")
    assert g2["g2_0"] == pytest.approx(0.015, abs=0.01)
    assert g2["qe"] == pytest.approx(1.0 / (1.0 + g2["m"]))
    hom = values(d, "homfit.csv")
    assert hom["co.V_ps"] == pytest.approx(0.73, abs=0.06)
    rabi = values(d, "rabi.csv")
    assert rabi["xi"] == pytest.approx(0.1, abs=0.03)
    assert values(d, "life.csv")["tau1"] == pytest.approx(340, abs=30)
    assert values(d, "doublet.csv")["splitting"] == pytest.approx(91, abs=6)
    meta, _, _ = table(d, "g2fit.csv")
    assert meta["converged"] == "true"


def test_fidelity_pipeline(work):
    d, _, _ = work
    _, cols, rows = table(d, "fid.csv")
    assert cols == ["power", "F", "stderr", "error"]
    assert float(rows[0][1]) == pytest.approx(0.81, abs=0.06)
    meta, _, _ = table(d, "cal.csv")
    assert len(json.loads(meta["coeffs"])) == 3


def test_visibility_table(work):
    d, _, _ = work
    _, _, rows = table(d, "vis.csv")
    v = [float(r[1]) for r in rows]
    frac = [float(r[3]) for r in rows]
    assert v[2] > v[1]
    assert v[0] == pytest.approx(v[1], abs=0.02)
    assert frac[1] >= 0.99


def test_power_scan_columns(work):
    d, _, _ = work
    _, cols, rows = table(d, "scan.csv")
    assert cols == ["power", "x_counts", "xx_counts", "intensity", "sigma"]
    assert len(rows) == 3


def test_simulate_is_deterministic(work, monkeypatch):
    d, _, _ = work
    monkeypatch.chdir(d)
    assert main(["simulate", "--config", "exp.cfg", "--n-pulses", "20000", "--format", "text",
                 "--workers", "1", "--out", "again.txt"]) == EXIT_OK
    a = io.read_tags(d / "again.txt")
    b = io.read_tags(d / "tags.txt")
    assert np.array_equal(a.t, b.t)
    assert np.array_equal(a.channel, b.channel)


class TestExitCodes:
    def test_no_command(self, capsys):
        assert main([]) == EXIT_USAGE
        err = capsys.readouterr().err
        assert "a command is required" in err
        assert err.count("usage:") == 1

    def test_unknown_option(self):
        assert main(["correlate", "--bogus"]) == EXIT_USAGE

    def test_missing_config(self, tmp_path):
        assert main(["simulate", "--out", str(tmp_path / "x.bin")]) == EXIT_USAGE

    def test_bad_config_is_validation_error(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("t1_x_ps = -5\nt1_xx_ps = 340\nprep_fidelity = 0.8\n")
        assert main(["simulate", "--config", str(cfg), "--seed", "1",
                     "--out", str(tmp_path / "x.bin")]) == EXIT_VALIDATION

    def test_unknown_key(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("t1_x_ps = 1210\ncolour = blue\n")
        assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "x.bin")]) \
            == EXIT_VALIDATION

    def test_missing_input(self, tmp_path):
        assert main(["peaks", "--in", str(tmp_path / "none.hist"),
                     "--out", str(tmp_path / "p.csv")]) == EXIT_VALIDATION

    def test_empty_histogram(self, tmp_path):
        io.write_histogram(tmp_path / "zero.hist", Histogram(10, -100_000, np.zeros(20_000)))
        assert main(["fit-g2", "--in", str(tmp_path / "zero.hist"),
                     "--out", str(tmp_path / "g.csv")]) == EXIT_VALIDATION

    def test_not_converged_is_written_and_flagged(self, tmp_path):
        # a flat decay drives the lifetime to infinity
        io.write_histogram(tmp_path / "flat.hist", Histogram(10, 0, np.full(500, 5.0)))
        out = tmp_path / "life.csv"
        assert main(["fit-lifetime", "--in", str(tmp_path / "flat.hist"), "--start", "0",
                     "--end", "5000", "--out", str(out)]) == EXIT_NOT_CONVERGED
        assert io.read_meta(out)["converged"] == "false"

    def test_all_fidelities_undefined(self, tmp_path):
        counts = np.zeros(20_000)
        counts[:625] = 1.0
        h = Histogram(10, -100_000, counts)
        io.write_histogram(tmp_path / "empty.hist", h)
        assert main(["prep-fidelity", "--in", str(tmp_path / "empty.hist"), "--cpol", "1.5",
                     "--out", str(tmp_path / "f.csv")]) == EXIT_VALIDATION

    def test_cpol_source_is_exclusive(self, tmp_path):
        assert main(["prep-fidelity", "--in", "x", "--out", str(tmp_path / "f.csv")]) == EXIT_USAGE


class TestReplayChecks:
    def test_changed_input_is_refused(self, work, tmp_path, monkeypatch):
        d, _, _ = work
        monkeypatch.chdir(tmp_path)
        shutil.copy(d / "g2.hist", "g2.hist")
        assert main(["fit-g2", "--in", "g2.hist", "--out", "fit.csv"]) == EXIT_OK
        with open("g2.hist", "a") as f:
            f.write("# tampered\n")
        assert replay("fit.csv") == EXIT_VALIDATION

    def test_missing_config_is_restored(self, work, tmp_path, monkeypatch):
        d, _, _ = work
        monkeypatch.chdir(tmp_path)
        shutil.copy(d / "exp.cfg", "exp.cfg")
        assert main(["simulate", "--config", "exp.cfg", "--n-pulses", "5000", "--format", "text",
                     "--out", "t.txt"]) == EXIT_OK
        before = open("t.txt", "rb").read()
        os.remove("exp.cfg")
        os.remove("t.txt")
        assert replay("t.txt") == EXIT_OK
        assert open("t.txt", "rb").read() == before

    def test_edited_config_is_refused(self, work, tmp_path, monkeypatch):
        d, _, _ = work
        monkeypatch.chdir(tmp_path)
        shutil.copy(d / "exp.cfg", "exp.cfg")
        assert main(["simulate", "--config", "exp.cfg", "--n-pulses", "5000", "--format", "text",
                     "--out", "t.txt"]) == EXIT_OK
        with open("exp.cfg", "a") as f:
            f.write("workers = 2\n")
        assert replay("t.txt") == EXIT_VALIDATION

    def test_file_without_provenance(self, tmp_path):
        p = tmp_path / "plain.csv"
        io.write_table(p, {}, ["a"], [(1.0,)])
        assert replay(str(p)) == EXIT_VALIDATION


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "qdcascade.cli", "--help"], capture_output=True,
                         text=True, check=True).stdout
    for cmd in ("simulate", "correlate", "fit-g2", "prep-fidelity", "calibrate-cpol", "replay"):
        assert cmd in out
