import json
import math

import numpy as np
import pytest

from linedistort import cli
from linedistort.cli import main, read_columns, read_spectrum, write_spectrum
from linedistort.forward import Spectrum

NH3_STEP = """
[synth]
mode = "step"
direction = "both"
[line]
nu0 = 0.0
dnu_dop = 49.9
dnu_coll = 13.6
[filter]
order = 2
q = 0.5
tau_d = 3.0
[sweep]
start = -400.0
stop = 400.0
delta_nu = 1.5
delta_t = 0.0688
"""

CONT = """
[synth]
mode = "continuous"
noise_sigma = {sigma}
[line]
nu0 = 1.0
dnu_dop = 10.0
dnu_coll = 2.0
area = 5.0
baseline_level = 0.01
[filter]
order = 2
q = 0.5
tau_d = 1.0
[sweep]
start = -80.0
stop = 80.0
delta_nu = 0.25
nu_d = {nu_d}
"""


def write(tmp_path, text, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def run(*argv):
    return main([str(a) for a in argv])


class TestSynth:
    def test_minimal_undistorted(self, tmp_path):
        cfg = write(tmp_path, CONT.format(sigma=0.0, nu_d=0.0))
        out = tmp_path / "s.txt"
        assert run("synth", "--config", cfg, "--output", out) == 0
        spec = read_spectrum(out)
        from linedistort import forward, profiles
        p = profiles.LineParams(1.0, 10.0, 2.0, area=5.0, baseline_level=0.01)
        np.testing.assert_allclose(spec.signal, forward.evaluate(p, spec.freqs, "voigt"),
                                   rtol=1e-12)
        assert spec.meta["generator"] == "linedistort synth"
        assert spec.meta["config"]["line"]["dnu_dop"] == 10.0

    def test_nh3_both_directions(self, tmp_path):
        cfg = write(tmp_path, NH3_STEP)
        out = tmp_path / "nh3.txt"
        assert run("synth", "--config", cfg, "--output", out) == 0
        up, down = read_spectrum(tmp_path / "nh3_up.txt"), read_spectrum(tmp_path / "nh3_down.txt")
        split = up.freqs[np.argmax(up.signal)] - down.freqs[np.argmax(down.signal)]
        assert split == pytest.approx(180, abs=15)

    def test_deterministic_bytes(self, tmp_path):
        cfg = write(tmp_path, CONT.format(sigma=1e-3, nu_d=3.0))
        a, b = tmp_path / "a.txt", tmp_path / "b.txt"
        run("synth", "--config", cfg, "--output", a, "--seed", 7)
        run("synth", "--config", cfg, "--output", b, "--seed", 7)
        assert a.read_bytes() == b.read_bytes()
        run("synth", "--config", cfg, "--output", b, "--seed", 8)
        assert a.read_bytes() != b.read_bytes()

    def test_unknown_key(self, tmp_path, capsys):
        cfg = write(tmp_path, CONT.format(sigma=0.0, nu_d=0.0) + "typo = 1\n")
        assert run("synth", "--config", cfg) == 1
        assert "sweep.typo" in capsys.readouterr().err

    def test_wrong_type(self, tmp_path, capsys):
        cfg = write(tmp_path, CONT.format(sigma='"big"', nu_d=0.0))
        assert run("synth", "--config", cfg) == 1
        assert "synth.noise_sigma" in capsys.readouterr().err

    def test_bad_choice(self, tmp_path):
        cfg = write(tmp_path, CONT.format(sigma=0.0, nu_d=0.0).replace('"continuous"', '"ramp"'))
        assert run("synth", "--config", cfg) == 1

    def test_missing_config(self, tmp_path):
        assert run("synth", "--config", tmp_path / "nope.toml") == 2

    def test_bad_flag(self):
        with pytest.raises(SystemExit) as exc:
            run("synth", "--bogus")
        assert exc.value.code == 1


class TestFit:
    def test_round_trip(self, tmp_path):
        cfg = write(tmp_path, CONT.format(sigma=0.0, nu_d=4.0))
        spec = tmp_path / "s.txt"
        run("synth", "--config", cfg, "--output", spec)
        fcfg = write(tmp_path, "[fit]\nmodel = \"voigt\"\n", "fit.toml")
        out = tmp_path / "r.json"
        assert run("fit", spec, "--config", fcfg, "--output", out) == 0
        rec = json.loads(out.read_text())
        assert rec["converged"]
        truth = dict(nu0=1.0, dnu_dop=10.0, dnu_coll=2.0, area=5.0, baseline_level=0.01)
        for k, v in truth.items():
            assert rec["params"][k] == pytest.approx(v, rel=1e-6)
        meta, cols, data = read_columns(tmp_path / "r_residuals.txt")
        assert cols == list(cli.RESIDUAL_COLUMNS) and data.shape[1] == 2
        assert np.max(np.abs(data[:, 1])) < 1e-9

    def test_uncorrected_biased(self, tmp_path):
        cfg = write(tmp_path, CONT.format(sigma=0.0, nu_d=1.0))
        spec = tmp_path / "s.txt"
        run("synth", "--config", cfg, "--output", spec)
        fcfg = write(tmp_path, "[fit]\ncorrection = false\n", "fit.toml")
        out = tmp_path / "r.json"
        run("fit", spec, "--config", fcfg, "--output", out)
        rec = json.loads(out.read_text())
        # lowest order: the centre moves by nu_D
        assert rec["params"]["nu0"] - 1.0 == pytest.approx(1.0, rel=0.05)

    def test_non_convergence_exit(self, tmp_path):
        cfg = write(tmp_path, CONT.format(sigma=1e-3, nu_d=4.0))
        spec = tmp_path / "s.txt"
        run("synth", "--config", cfg, "--output", spec)
        fcfg = write(tmp_path, "[fit]\nmax_nfev = 1\n[fit.initial]\nnu0 = 20.0\ndnu_dop = 3.0\n"
                     "dnu_coll = 1.0\narea = 1.0\n", "fit.toml")
        out = tmp_path / "r.json"
        assert run("fit", spec, "--config", fcfg, "--output", out) == 3
        assert json.loads(out.read_text())["converged"] is False

    def test_missing_spectrum(self, tmp_path):
        assert run("fit", tmp_path / "none.txt") == 2

    def test_malformed_spectrum(self, tmp_path):
        bad = tmp_path / "bad.txt"
        bad.write_text("# columns: frequency_MHz signal\n1 2\n3\n")
        assert run("fit", bad) == 2

    def test_batch(self, tmp_path):
        d = tmp_path / "batch"
        d.mkdir()
        for i, nu_d in enumerate((0.0, 2.0, 4.0)):
            cfg = write(tmp_path, CONT.format(sigma=0.0, nu_d=nu_d), f"c{i}.toml")
            run("synth", "--config", cfg, "--output", d / f"s{i}.txt")
        assert run("fit", d) == 0
        _, cols, rows = cli.read_table(d / "fits.tsv")
        assert [r[0] for r in rows] == ["s0.txt", "s1.txt", "s2.txt"]
        k = cols.index("nu0 [MHz]")
        assert all(float(r[k]) == pytest.approx(1.0, rel=1e-6) for r in rows)


class TestScan:
    def test_av_table(self, tmp_path):
        cfg = write(tmp_path, "[filter]\norder = 1\n[scan]\nratios = [0.5, 1.0, 2.0]\n")
        out = tmp_path / "av.tsv"
        assert run("scan", "av", "--config", cfg, "--output", out) == 0
        meta, cols, rows = cli.read_table(out)
        assert cols == ["tau_d/delta_t [1]", "a_nu [1]"]
        got = [float(r[1]) for r in rows]
        assert got == pytest.approx([0.31, 0.58, 0.77], abs=0.02)

    def test_budget_header(self, tmp_path):
        cfg = write(tmp_path, "[scan]\ndelta_nu_rel_grid = [0.0030303]\nratios = [0.1, 0.25, 1.0]\n")
        out = tmp_path / "b.tsv"
        assert run("scan", "budget", "--config", cfg, "--output", out) == 0
        meta, cols, rows = cli.read_table(out)
        assert len(rows) == 3 and cols[-1] == "admissible [bool]"
        assert meta["continuous_threshold"] == pytest.approx(1.5e-3, rel=0.3)
        assert meta["warnings"]

    def test_center_continuous(self, tmp_path):
        cfg = write(tmp_path, "[scan]\ncontinuous = true\nnu_d_rel_grid = [0.1, 0.5]\n")
        out = tmp_path / "c.tsv"
        assert run("scan", "center", "--config", cfg, "--output", out) == 0
        _, _, rows = cli.read_table(out)
        assert float(rows[0][2]) == pytest.approx(0.1, rel=0.01)

    def test_kind_required(self, tmp_path):
        assert run("scan", "--output", tmp_path / "x.tsv") == 1


class TestCalibrate:
    def test_continuous_pair(self, tmp_path):
        base = CONT.replace("tau_d = 1.0", "tau_d = 1.1")
        files = []
        for i, nu_d in enumerate((4.0, -4.0, 2.0)):
            cfg = write(tmp_path, base.format(sigma=0.0, nu_d=nu_d), f"c{i}.toml")
            run("synth", "--config", cfg, "--output", tmp_path / f"s{i}.txt")
            files.append(f"s{i}.txt")
        ds = ", ".join(f'{{file = "{f}", nu0 = 1.0}}' for f in files)
        cfg = write(tmp_path, f"[filter]\ntau_d = 1.0\n[calibrate]\ndatasets = [{ds}]\n", "cal.toml")
        out = tmp_path / "cal.json"
        assert run("calibrate-tau", "--config", cfg, "--output", out) == 0
        assert json.loads(out.read_text())["tau_d"] == pytest.approx(1.1, rel=1e-4)

    def test_needs_datasets(self, tmp_path):
        cfg = write(tmp_path, "[calibrate]\nmethod = \"step\"\n")
        assert run("calibrate-tau", "--config", cfg) == 1


def test_columns_round_trip(tmp_path):
    f = np.linspace(-1, 1, 11)
    s = np.sin(f) / 3
    write_spectrum(tmp_path / "x.txt", Spectrum(f, s), {"a": [1, 2], "b": "t"})
    back = read_spectrum(tmp_path / "x.txt")
    assert np.array_equal(back.freqs, f) and np.array_equal(back.signal, s)
    assert back.meta["a"] == [1, 2]
