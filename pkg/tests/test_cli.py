import csv
import json
import math

import pytest

from nmsa.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main
from nmsa.config import default_config

NOISELESS = """\
[sim]
noiseless = true
duffing_xi = 0.0
[protocol]
pre = 12e-6
post = 12e-6
[ensemble]
n_traj = {n}
master_seed = 1
"""


def table(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def kv(path):
    return {r["key"]: r["value"] for r in table(path)}


def write_cfg(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


@pytest.fixture(scope="module")
def tuned(tmp_path_factory):
    d = tmp_path_factory.mktemp("tune")
    cfg = write_cfg(d, NOISELESS.format(n=20000))
    assert main(["tune", "--config", cfg, "--out", str(d / "tune")]) == EXIT_OK
    return d, cfg


def test_config_command_prints_reference_point(capsys):
    assert main(["config"]) == EXIT_OK
    text = capsys.readouterr().out
    assert "tau2 = 1.8e-06" in text and "n_traj = 165000" in text


def test_simulate_manifest_and_determinism(tmp_path):
    cfg = write_cfg(tmp_path, "[ensemble]\nn_traj = 10\n[protocol]\npre = 12e-6\npost = 12e-6\n")
    for name in ("a", "b"):
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / name), "--seed", "7"]) == EXIT_OK
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert ma["parameters"]["f_c_kHz"] == pytest.approx(131.455)
    assert ma["parameters"]["tau2_us"] == pytest.approx(1.8)
    assert ma["seed"] == 7
    assert len(list((tmp_path / "a" / "trajectories").glob("traj_*.leva"))) == 10
    # config.ini differs only by the output directory
    data = lambda m: {k: v for k, v in m["files"].items() if k != "config.ini"}
    assert data(ma) == data(mb) and len(data(ma)) == 11
    assert ma["ensemble_sha256"] == mb["ensemble_sha256"]


def test_default_manifest_parameters():
    cfg = default_config()
    p = cfg.sim_params()
    assert p.omega_c / (2 * math.pi) / 1e3 == pytest.approx(131.455)
    assert cfg.protocol.tau2 * 1e6 == pytest.approx(1.8)
    assert cfg.ensemble.n_traj == 165000


def test_bad_dt_is_config_error(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "[sim]\ndt = -1e-9\n")
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "sim.dt" in capsys.readouterr().err


def test_amplify_without_timing_is_config_error(tmp_path, capsys):
    assert main(["amplify", "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "nmsa tune" in capsys.readouterr().err


def test_missing_input_is_data_error(tmp_path):
    cfg = write_cfg(tmp_path, f"[ensemble]\ninput = {tmp_path / 'nothing'}\n")
    assert main(["postselect", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_tune_finds_four_modes(tuned):
    d, _ = tuned
    best = {r["mode"] for r in table(d / "tune" / "minima.csv") if r["best"] == "1"}
    assert best == {"position", "position_inverting", "velocity", "velocity_inverting"}
    assert len(table(d / "tune" / "scan.csv")) > 1000


def test_amplify_agrees_with_tune(tuned):
    d, cfg = tuned
    minima = d / "tune" / "minima.csv"
    text = open(cfg).read() + f"[amplify]\nmode = position\nminima = {minima}\n"
    cfg2 = write_cfg(d, text, "amp.ini")
    assert main(["amplify", "--config", cfg2, "--out", str(d / "amp")]) == EXIT_OK
    tuned_g = next(float(r["G_zz"]) for r in table(minima) if r["best"] == "1" and r["mode"] == "position")
    rep = kv(d / "amp" / "report.csv")
    assert float(rep["G_zz"]) == pytest.approx(tuned_g, rel=0.02)
    sweep = table(d / "amp" / "nf_sweep.csv")
    assert list(sweep[0]) == ["theta0", "NF", "NF_dB"]
    assert [float(r["theta0"]) for r in sweep] == [0.015, 0.03, 0.1, 0.3, 1.0]
    for r in sweep:
        assert float(r["NF_dB"]) == pytest.approx(10 * math.log10(float(r["NF"])), abs=1e-12)
    assert (d / "amp" / "shd_curve.csv").exists() and (d / "amp" / "pdf_final_0.csv").exists()


def test_reference_protocol_is_a_noiseless_rotation(tmp_path):
    # tau2 = 0 and tau1 + tau3 = one period: the map is the identity
    period = 2 * math.pi / (2 * math.pi * 131.455e3)
    text = NOISELESS.format(n=8000).replace("[protocol]\n", "[protocol]\ntau2 = 0.0\n")
    text += f"[amplify]\ntau1 = {0.3 * period!r}\ntau3 = {0.7 * period!r}\n"
    cfg = write_cfg(tmp_path, text)
    assert main(["amplify", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_OK
    rep = kv(tmp_path / "o" / "report.csv")
    assert float(rep["G_zz"]) == pytest.approx(1, abs=0.03)
    assert float(rep["G_vv"]) == pytest.approx(1, abs=0.03)
    assert float(rep["det"]) == pytest.approx(1, abs=0.01)
    for r in table(tmp_path / "o" / "nf_sweep.csv"):
        assert float(r["NF"]) == pytest.approx(1, abs=0.1)


@pytest.mark.filterwarnings("ignore::nmsa.postselect.CoverageWarning")
def test_postselect_command(tmp_path):
    text = NOISELESS.format(n=20000) + "[postselect]\ntheta0 = 0.1\nmean_z = 0.5\nmean_v = 0.5\n"
    cfg = write_cfg(tmp_path, text)
    assert main(["postselect", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_OK
    rep = kv(tmp_path / "o" / "selection.csv")
    assert int(rep["selected"]) >= 500
    assert float(rep["theta_zz"]) == pytest.approx(0.1, rel=0.2)
    assert len(table(tmp_path / "o" / "indices.csv")) == int(rep["selected"])


def test_calibrate_synthetic(tmp_path):
    text = "[sim]\ngamma = 12566.0\nduffing_xi = 0.0\n[ensemble]\nmaster_seed = 1\n"
    cfg = write_cfg(tmp_path, text)
    assert main(["calibrate", "--config", cfg, "--out", str(tmp_path / "o"), "--samples", "1000000"]) == EXIT_OK
    rep = kv(tmp_path / "o" / "calibration.csv")
    assert float(rep["f_Hz"]) == pytest.approx(131.455e3, rel=0.005)
    assert rep["consistent"] == "1"
