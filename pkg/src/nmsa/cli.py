"""Command-line front end: ``nmsa simulate|tune|amplify|calibrate|postselect``."""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import io
from ._kernel import set_threads
from .config import ConfigError, RunConfig, default_config
from .dynamics import PhaseState, ScheduleError
from .ensemble import (DETECTOR_GAIN, Calibration, CalibrationError, Ensemble, evolve_trajectory,
                       generate_ensemble, iter_ensemble, psd_calibrate)
from .estimation import RankError
from .postselect import (DegenerateSamples, EmptySelection, PrescribedState, reconstruct_pdf,
                         select_gaussian, select_zero_cov)
from .protocol import MODES, build_schedule
from .tuning import ScanError, circle_targets, default_grid, scan_timing

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(RuntimeError):
    pass


def _versions() -> dict:
    import numba

    from . import __version__
    return {"nmsa": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, command: str, cfg: RunConfig, files: list[Path], extra=None) -> Path:
    p = cfg.sim_params()
    manifest = {
        "command": command,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "config_sha256": cfg.digest(),
        "seed": cfg.ensemble.master_seed,
        "versions": _versions(),
        "parameters": {
            "f_c_kHz": p.omega_c / (2 * math.pi) / 1e3,
            "omega_i_over_omega_c": p.omega_i / p.omega_c,
            "tau2_us": cfg.protocol.tau2 * 1e6,
            "n_traj": cfg.ensemble.n_traj,
            "sample_rate_MHz": cfg.ensemble.sample_rate / 1e6,
        },
        "files": {str(f.relative_to(out)): _sha256(f) for f in files},
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.output.directory)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc.strerror}") from None
    (out / "config.ini").write_text(cfg.to_text())
    return out


def _ensemble(cfg: RunConfig) -> Ensemble:
    if cfg.ensemble.input:
        try:
            return io.read_ensemble(cfg.ensemble.input)
        except OSError as exc:
            raise DataError(f"{cfg.ensemble.input}: {exc.strerror}") from None
    e = cfg.ensemble
    return generate_ensemble(cfg.sim_params(), cfg.schedule(), e.n_traj, e.master_seed,
                             sample_rate=e.sample_rate, T_init=e.T_init, chunk_size=e.chunk_size)


def _calibration(cfg: RunConfig, ens: Ensemble) -> Calibration:
    return Calibration.empirical(ens, cfg.sim_params().omega_c)


# --- commands --------------------------------------------------------------

def cmd_simulate(cfg: RunConfig) -> Path:
    """Trajectory files (one per realization), summary statistics and a manifest."""
    out = _prepare_out(cfg)
    e = cfg.ensemble
    params = cfg.sim_params()
    files: list[Path] = [out / "config.ini"]
    traj_dir = out / "trajectories"
    digest = hashlib.sha256()
    n = 0
    acc = None
    switch_index = None
    for chunk in iter_ensemble(params, cfg.schedule(), e.n_traj, e.master_seed,
                               sample_rate=e.sample_rate, T_init=e.T_init, chunk_size=e.chunk_size):
        if cfg.output.write_trajectories:
            files += io.write_ensemble(traj_dir, chunk, cfg.output.trajectory_format)
        digest.update(np.ascontiguousarray(chunk.z, "<f8").tobytes())
        n += len(chunk)
        sw = chunk.switch_index
        switch_index = sw
        cols = [1, max(sw - 1, 1), min(sw + 1, chunk.n_samples - 2), chunk.n_samples - 2]
        st = np.concatenate([chunk.phase(k) for k in cols], axis=1)
        part = np.stack([np.full(st.shape[1], len(st)), st.sum(0), (st**2).sum(0)])
        acc = part if acc is None else acc + part
    cal = Calibration.thermal(params)
    mean = acc[1] / acc[0]
    var = acc[2] / acc[0] - mean**2
    scale = np.tile([cal.z_scale, cal.v_scale], 4)
    names = ["start", "pre_switch", "post_switch", "end"]
    rows = [["n_traj", n], ["n_samples", chunk.n_samples], ["switch_index", switch_index],
            ["sample_interval", chunk.sample_interval], ["theta_zz", params.theta_zz],
            ["ensemble_sha256", digest.hexdigest()]]
    for j, nm in enumerate(names):
        for c, ax in enumerate("zv"):
            k = 2 * j + c
            rows.append([f"mean_{ax}_bar_{nm}", mean[k] / scale[k]])
            rows.append([f"var_{ax}_bar_{nm}", var[k] / scale[k] ** 2])
    summary = out / "summary.csv"
    io.write_rows(summary, ["key", "value"], rows)
    files.append(summary)
    _write_manifest(out, "simulate", cfg, files, {"ensemble_sha256": digest.hexdigest()})
    print(f"simulated {n} trajectories -> {out}")
    return out


def cmd_tune(cfg: RunConfig) -> Path:
    out = _prepare_out(cfg)
    ens = _ensemble(cfg)
    cal = _calibration(cfg, ens)
    sc = cfg.scan
    tau1, tau3 = default_grid(ens, cfg.protocol.tau2, cal.omega, sc.tau1_periods, sc.tau3_periods,
                              sc.upsample)
    targets = circle_targets(sc.radii, sc.per_unit_radius)
    scan = scan_timing(ens, cfg.protocol.tau2, tau1, tau3, targets, sc.n_select, cal,
                       max_radius=sc.max_radius, upsample=sc.upsample)
    heat, minima = out / "scan.csv", out / "minima.csv"
    io.write_scan_csv(heat, scan, cal.omega)
    io.write_minima_csv(minima, scan, cal.omega)
    for mode in MODES:
        m = scan.best.get(mode)
        if m is None:
            print(f"{mode:20s} not found")
        else:
            print(f"{mode:20s} tau1_bar={cal.omega * m.tau1:.4f} tau3_bar={cal.omega * m.tau3:.4f} "
                  f"G_zz={m.G[0, 0]:+.4f} G_vv={m.G[1, 1]:+.4f} objective={m.objective:.4g}")
    if scan.skipped_targets:
        print(f"skipped {scan.skipped_targets} target selections (max_radius)")
    _write_manifest(out, "tune", cfg, [out / "config.ini", heat, minima],
                    {"skipped_targets": scan.skipped_targets})
    return out


def _timing(cfg: RunConfig) -> tuple[float, float]:
    a = cfg.amplify
    if a.tau1 is not None and a.tau3 is not None:
        return a.tau1, a.tau3
    if a.minima:
        try:
            table = io.read_minima_csv(a.minima)
        except OSError as exc:
            raise DataError(f"{a.minima}: {exc.strerror}") from None
        if a.mode in table:
            return table[a.mode]
        raise ConfigError("amplify.minima", f"{a.minima} has no {a.mode!r} operating point; "
                          "rerun `nmsa tune` on a wider grid or set amplify.tau1/amplify.tau3")
    raise ConfigError("amplify.tau1", f"no timing for mode {a.mode!r}: run `nmsa tune` first and set "
                      "amplify.minima = <tune-out>/minima.csv, or give amplify.tau1 and amplify.tau3 "
                      "(seconds)")


def cmd_amplify(cfg: RunConfig) -> Path:
    from .pipeline import amplify

    tau1, tau3 = _timing(cfg)
    out = _prepare_out(cfg)
    ens = _ensemble(cfg)
    cal = _calibration(cfg, ens)
    a = cfg.amplify
    dt = ens.sample_interval
    k0 = int(round((ens.switch_time - tau1 - ens.t[0]) / dt))
    k3 = int(round((ens.switch_time + cfg.protocol.tau2 + tau3 - ens.t[0]) / dt))
    res = amplify(ens, cal, k0, k3, a.mode, a.theta0_sweep, (a.mean_z, a.mean_v), a.shd_radius,
                  a.shd_angles, cfg.scan.n_select, cfg.postselect.seed)
    files = [out / "config.ini"]

    g = res.gain
    rows = [["mode", a.mode], ["t0_index", k0], ["t3_index", k3],
            ["tau1_bar", cal.omega * (ens.switch_time - ens.t[k0])],
            ["tau3_bar", cal.omega * (ens.t[k3] - ens.switch_time - cfg.protocol.tau2)]]
    for (i, j), nm in np.ndenumerate(np.array([["G_zz", "G_zv"], ["G_vz", "G_vv"]])):
        rows.append([nm, float(g.G[i, j])])
        if g.stderr is not None:
            rows.append([nm + "_stderr", float(g.stderr[i, j])])
    rows += [["offset_z", float(g.offset[0])], ["offset_v", float(g.offset[1])], ["det", g.det]]
    rows += [[k, v] for k, v in vars(res.metrics).items()]
    report = out / "report.csv"
    io.write_rows(report, ["key", "value"], rows)

    sweep = out / "nf_sweep.csv"
    io.write_rows(sweep, ["theta0", "NF", "NF_dB"],
                  ([p.theta0, p.nf, 10 * math.log10(p.nf) if p.nf > 0 else -math.inf] for p in res.sweep))
    detail = out / "sweep_detail.csv"
    io.write_rows(detail, ["theta0", "survivors", "theta_in_zz", "theta_in_vv", "theta_out_zz",
                           "theta_out_vv", "mean_out_z", "mean_out_v", "clamped"],
                  ([p.theta0, p.n, p.theta_in[0, 0], p.theta_in[1, 1], p.theta_out[0, 0],
                    p.theta_out[1, 1], p.mean_out[0], p.mean_out[1], int(p.clamped)] for p in res.sweep))
    from .estimation import snr_force
    snr = out / "snr_sweep.csv"
    io.write_rows(snr, ["theta0", "SNR_F"],
                  ([p.theta0, snr_force(float(g.offset[res.axis]), res.G, p.theta0, res.added_noise)]
                   for p in res.sweep))
    shdf = out / "shd_curve.csv"
    io.write_rows(shdf, ["phi", "z_bar_final", "v_bar_final"],
                  zip(res.shd_angles, res.shd_finals[:, 0], res.shd_finals[:, 1]))
    files += [report, sweep, detail, snr, shdf]
    for i, (gi, gf) in enumerate(res.pdfs):
        for tag, grid in (("initial", gi), ("final", gf)):
            p = out / f"pdf_{tag}_{i}.csv"
            io.write_density_csv(p, grid)
            files.append(p)
    print(res.metrics.report())
    _write_manifest(out, "amplify", cfg, files)
    return out


def cmd_calibrate(cfg: RunConfig, input_path: str | None, volts: bool = False,
                  synthetic_samples: int = 2**23) -> Path:
    out = _prepare_out(cfg)
    p = cfg.sim_params()
    if input_path:
        path = Path(input_path)
        try:
            rec = io.read_leva(path) if path.suffix == ".leva" else io.read_trajectory_csv(path)
        except OSError as exc:
            raise DataError(f"{path}: {exc.strerror}") from None
    else:
        fs = cfg.ensemble.sample_rate
        # equilibrium motion in the trap: a zero-length Step II inside one long PP window
        sched = build_schedule(0.0, 0.0, 0.0, p.omega_c, p.omega_i,
                               pre=(synthetic_samples - 1) / fs, duffing_xi=p.duffing_xi)
        s = math.sqrt(p.theta_zz)
        rng = np.random.default_rng(cfg.ensemble.master_seed)
        init = PhaseState(s * rng.standard_normal(), p.omega_c * s * rng.standard_normal())
        rec = evolve_trajectory(init, sched, p, fs, seed=cfg.ensemble.master_seed)
    cal = psd_calibrate(rec, detector_gain=DETECTOR_GAIN if volts else None)
    rows = [["omega", cal.omega], ["f_Hz", cal.omega / (2 * math.pi)], ["var_z", cal.var_z],
            ["var_v", cal.var_v], ["sqrt_theta_zz", math.sqrt(cal.var_z)],
            ["linewidth", cal.linewidth], ["consistent", int(cal.consistent())]]
    path = out / "calibration.csv"
    io.write_rows(path, ["key", "value"], rows)
    print(f"f = {cal.omega / (2 * math.pi):.1f} Hz, sqrt(theta_zz) = {math.sqrt(cal.var_z) * 1e9:.3f} nm")
    _write_manifest(out, "calibrate", cfg, [out / "config.ini", path],
                    {"input": str(input_path) if input_path else "synthetic"})
    return out


def cmd_postselect(cfg: RunConfig) -> Path:
    out = _prepare_out(cfg)
    ens = _ensemble(cfg)
    cal = _calibration(cfg, ens)
    ps = cfg.postselect
    k0 = int(round((ens.switch_time - ps.tau1 - ens.t[0]) / ens.sample_interval))
    states = ens.phase(k0, cal)
    density = reconstruct_pdf(states)
    if ps.mode == "gaussian":
        prescribed = PrescribedState.isotropic((ps.mean_z, ps.mean_v), ps.theta0)
        idx = select_gaussian(states, prescribed, ps.seed, density=density)
    else:
        idx = select_zero_cov(states, (ps.mean_z, ps.mean_v), ps.count, ps.radius)
    if idx.size < 2:
        raise EmptySelection(f"only {idx.size} trajectories selected")
    sel = states[idx]
    cov = np.cov(sel.T)
    rows = [["t0_index", k0], ["selected", idx.size], ["mean_z_bar", sel[:, 0].mean()],
            ["mean_v_bar", sel[:, 1].mean()], ["theta_zz", cov[0, 0]], ["theta_zv", cov[0, 1]],
            ["theta_vv", cov[1, 1]]]
    f_idx, f_sum, f_den = out / "indices.csv", out / "selection.csv", out / "density.csv"
    io.write_indices_csv(f_idx, ens.indices[idx])
    io.write_rows(f_sum, ["key", "value"], rows)
    io.write_density_csv(f_den, density)
    print(f"selected {idx.size} of {len(ens)} trajectories")
    _write_manifest(out, "postselect", cfg, [out / "config.ini", f_idx, f_sum, f_den])
    return out


# --- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nmsa", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI run configuration (defaults built in)")
    common.add_argument("--seed", type=int, help="override ensemble.master_seed")
    common.add_argument("--out", metavar="DIR", help="override output.directory")
    common.add_argument("--threads", type=int, default=0, help="worker threads (0 = auto)")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="simulate an ensemble and write trajectories")
    sub.add_parser("tune", parents=[common], help="scan (tau1, tau3) for the four operating points")
    sub.add_parser("amplify", parents=[common], help="characterize one operating point")
    c = sub.add_parser("calibrate", parents=[common], help="PSD calibration of an equilibrium record")
    c.add_argument("input", nargs="?", help="LEVA or CSV record (synthetic record if omitted)")
    c.add_argument("--volts", action="store_true", help="record is in detector volts")
    c.add_argument("--samples", type=int, default=2**23, help="length of the synthetic record")
    sub.add_parser("postselect", parents=[common], help="select a trajectory subset at t0")
    sub.add_parser("config", parents=[common], help="print the resolved configuration")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config) if args.config else default_config()
        if args.seed is not None:
            cfg = cfg.with_overrides(ensemble={"master_seed": args.seed})
        if args.out is not None:
            cfg = cfg.with_overrides(output={"directory": args.out})
        if args.threads < 0:
            raise ConfigError("--threads", "must be >= 0")
        cfg.validate()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.threads:
        set_threads(args.threads)
    try:
        if args.command == "simulate":
            cmd_simulate(cfg)
        elif args.command == "tune":
            cmd_tune(cfg)
        elif args.command == "amplify":
            cmd_amplify(cfg)
        elif args.command == "calibrate":
            cmd_calibrate(cfg, args.input, args.volts, args.samples)
        elif args.command == "postselect":
            cmd_postselect(cfg)
        elif args.command == "config":
            sys.stdout.write(cfg.to_text())
    except (ConfigError, ScheduleError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, io.FormatError, CalibrationError, EmptySelection, DegenerateSamples,
            ScanError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (RankError, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
