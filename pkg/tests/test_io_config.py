import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nmsa.config import ConfigError, RunConfig, default_config
from nmsa.ensemble import TrajectoryRecord, generate_ensemble
from nmsa.io import (FormatError, read_ensemble, read_indices_csv, read_leva, read_minima_csv,
                     read_trajectory_csv, write_ensemble, write_indices_csv, write_leva,
                     write_minima_csv, write_trajectory_csv)
from nmsa.protocol import build_schedule
from nmsa.tuning import Minimum, TimingScan

FS = 9.76e6


def record(n=64, seed=3):
    t = np.arange(n) / FS
    z = 1e-8 * np.sin(2 * math.pi * 131e3 * t) + 1e-10 * np.random.default_rng(seed).standard_normal(n)
    return TrajectoryRecord(t, z, 20, 12345678901234567890)


def test_leva_round_trip(tmp_path):
    rec = record()
    write_leva(tmp_path / "a.leva", rec)
    back = read_leva(tmp_path / "a.leva")
    np.testing.assert_array_equal(back.z, rec.z)
    np.testing.assert_allclose(back.t, rec.t, rtol=1e-15)
    assert back.switch_index == 20 and back.seed == rec.seed
    assert back.v_flags[0] and back.v_flags[-1]


def test_leva_stored_velocity(tmp_path):
    rec = record()
    v = np.linspace(-1, 1, len(rec.z))
    write_leva(tmp_path / "b.leva", TrajectoryRecord(rec.t, rec.z, 20, 1, v), store_v=True)
    np.testing.assert_array_equal(read_leva(tmp_path / "b.leva").v, v)


def test_leva_rejects_bad_files(tmp_path):
    p = tmp_path / "c.leva"
    write_leva(p, record())
    data = bytearray(p.read_bytes())
    bad = tmp_path / "bad.leva"
    bad.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        read_leva(bad)
    bad.write_bytes(data[:-8])
    with pytest.raises(FormatError):
        read_leva(bad)
    bad.write_bytes(data[:10])
    with pytest.raises(FormatError):
        read_leva(bad)


def test_csv_round_trip(tmp_path):
    rec = record()
    write_trajectory_csv(tmp_path / "a.csv", rec)
    back = read_trajectory_csv(tmp_path / "a.csv", 20, rec.seed)
    np.testing.assert_array_equal(back.z, rec.z)
    assert back.v_flags.sum() == 2


def test_ensemble_directory_round_trip(tmp_path, params):
    sched = build_schedule(0, 1.8e-6, 0, params.omega_c, params.omega_i, pre=2e-6, post=2e-6)
    ens = generate_ensemble(params, sched, 5, 3)
    write_ensemble(tmp_path, ens)
    back = read_ensemble(tmp_path)
    np.testing.assert_array_equal(back.z, ens.z)
    assert back.switch_index == ens.switch_index
    np.testing.assert_array_equal(back.indices, ens.indices)
    with pytest.raises(FormatError):
        read_ensemble(tmp_path / "missing")


def test_indices_csv(tmp_path):
    write_indices_csv(tmp_path / "i.csv", [4, 0, 17])
    assert read_indices_csv(tmp_path / "i.csv").tolist() == [4, 0, 17]


def test_minima_table(tmp_path):
    G = np.diag([2.28, 0.44])
    ms = [Minimum(1, 2, 2e-6, 4e-6, 0.03, "position", G), Minimum(1, 5, 2e-6, 5e-6, 0.08, "position", G),
          Minimum(3, 1, 1e-6, 6e-6, 0.05, "velocity", G[::-1, ::-1])]
    scan = TimingScan(np.zeros(4), np.zeros(6), None, None, None, None, None, [], [], ms)
    write_minima_csv(tmp_path / "m.csv", scan, 1.0)
    assert read_minima_csv(tmp_path / "m.csv") == {"position": (2e-6, 4e-6), "velocity": (1e-6, 6e-6)}


# --- configuration ---------------------------------------------------------------------

def test_default_config_is_reference_point():
    cfg = default_config().validate()
    assert cfg.protocol.tau2 == 1.8e-6 and cfg.ensemble.n_traj == 165000
    p = cfg.sim_params()
    assert p.omega_c / (2 * math.pi) == pytest.approx(131.455e3)
    assert p.omega_i / p.omega_c == pytest.approx(0.41)


def test_text_round_trip_default():
    cfg = default_config()
    assert RunConfig.from_text(cfg.to_text()) == cfg


@given(st.floats(1e-7, 1e-5), st.integers(0, 2**64 - 1), st.integers(1, 10**6),
       st.lists(st.floats(1e-4, 10), min_size=1, max_size=6), st.booleans(),
       st.one_of(st.none(), st.floats(1, 500)))
def test_text_round_trip(tau2, seed, n, sweep, noiseless, t_c):
    cfg = default_config().with_overrides(
        protocol={"tau2": tau2}, ensemble={"master_seed": seed, "n_traj": n},
        amplify={"theta0_sweep": tuple(sweep)}, sim={"noiseless": noiseless, "T_c": t_c})
    back = RunConfig.from_text(cfg.to_text())
    assert back == cfg
    assert back.digest() == cfg.digest()


@pytest.mark.parametrize("text,path", [
    ("[sim]\ndt = -1\n", "sim.dt"),
    ("[sim]\ngamma = abc\n", "sim.gamma"),
    ("[sim]\nbogus = 1\n", "sim.bogus"),
    ("[nonsense]\n", "nonsense"),
    ("[protocol]\nkind = PP\n", "protocol.kind"),
    ("[protocol]\ntau2 = -1e-6\n", "protocol.tau2"),
    ("[ensemble]\nn_traj = 0\n", "ensemble.n_traj"),
    ("[ensemble]\nsample_rate = 1e12\n", "ensemble.sample_rate"),
    ("[amplify]\nmode = sideways\n", "amplify.mode"),
    ("[scan]\ntau1_periods = 100\n", "scan.tau1_periods"),
    ("[output]\ntrajectory_format = hdf5\n", "output.trajectory_format"),
])
def test_errors_name_the_field(text, path):
    with pytest.raises(ConfigError) as exc:
        RunConfig.from_text(text).validate()
    assert exc.value.path == path
    assert str(exc.value).startswith(path)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "nope.ini")
