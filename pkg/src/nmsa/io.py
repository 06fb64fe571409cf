"""Trajectory files (LEVA binary, CSV) and plain-CSV exports of analysis results."""
from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .ensemble import Ensemble, TrajectoryRecord, central_difference

MAGIC = b"LEVA"
VERSION = 1
V_STORED = 1 << 31  # version flag bit: a velocity array follows the positions
HEADER = struct.Struct("<4sIQdQQ")


class FormatError(ValueError):
    pass


def write_leva(path, record: TrajectoryRecord, store_v: bool = False) -> None:
    """Header {magic, version, n_samples, dt, switch_index, seed} then f64 z (and v)."""
    z = np.ascontiguousarray(record.z, dtype="<f8")
    version = VERSION | (V_STORED if store_v else 0)
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, version, z.size, record.dt, record.switch_index, record.seed))
        fh.write(z.tobytes())
        if store_v:
            v = record.v if record.v is not None else central_difference(record.z, record.dt)[0]
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def read_leva(path) -> TrajectoryRecord:
    """Load a LEVA file; velocities are recomputed unless stored."""
    data = Path(path).read_bytes()
    if len(data) < HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, n, dt, switch_index, seed = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version & ~V_STORED != VERSION:
        raise FormatError(f"{path}: unsupported version {version & ~V_STORED}")
    n_arrays = 2 if version & V_STORED else 1
    if len(data) != HEADER.size + 8 * n * n_arrays:
        raise FormatError(f"{path}: expected {n} samples per array, got {len(data) - HEADER.size} bytes")
    z = np.frombuffer(data, "<f8", n, HEADER.size).astype(float)
    t = np.arange(n) * dt
    if version & V_STORED:
        v = np.frombuffer(data, "<f8", n, HEADER.size + 8 * n).astype(float)
        flags = np.zeros(n, bool)
        flags[[0, -1]] = True
    else:
        v, flags = central_difference(z, dt)
    return TrajectoryRecord(t, z, int(switch_index), int(seed), v, flags)


def write_trajectory_csv(path, record: TrajectoryRecord) -> None:
    v, flags = (record.v, record.v_flags) if record.v is not None else central_difference(record.z, record.dt)
    if flags is None:
        flags = np.zeros(len(record.z), bool)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "z", "v", "flags"])
        for row in zip(record.t, record.z, v, flags):
            w.writerow([repr(float(row[0])), repr(float(row[1])), repr(float(row[2])), int(row[3])])


def read_trajectory_csv(path, switch_index: int = 0, seed: int = 0) -> TrajectoryRecord:
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if arr.shape[1] != 4:
        raise FormatError(f"{path}: expected columns t,z,v,flags")
    return TrajectoryRecord(arr[:, 0], arr[:, 1], switch_index, seed, arr[:, 2], arr[:, 3].astype(bool))


def trajectory_name(index: int, fmt: str = "leva") -> str:
    return f"traj_{index:07d}.{fmt}"


def write_ensemble(directory, ensemble: Ensemble, fmt: str = "leva") -> list[Path]:
    """One file per trajectory, named by the global trajectory index."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for j, rec in enumerate(ensemble):
        p = directory / trajectory_name(int(ensemble.indices[j]), fmt)
        if fmt == "leva":
            write_leva(p, rec)
        elif fmt == "csv":
            write_trajectory_csv(p, rec)
        else:
            raise ValueError(f"unknown trajectory format {fmt!r}")
        paths.append(p)
    return paths


def read_ensemble(directory) -> Ensemble:
    """Ensemble from a directory of LEVA files sharing one time grid."""
    paths = sorted(Path(directory).glob("traj_*.leva"))
    if not paths:
        raise FormatError(f"{directory}: no traj_*.leva files")
    recs = [read_leva(p) for p in paths]
    n = len(recs[0].z)
    if any(len(r.z) != n or r.switch_index != recs[0].switch_index or r.dt != recs[0].dt for r in recs):
        raise FormatError(f"{directory}: trajectories do not share a time grid")
    t = recs[0].t
    k = recs[0].switch_index
    idx = np.array([int(p.stem.split("_")[1]) for p in paths])
    return Ensemble(t, np.stack([r.z for r in recs]), np.array([r.seed for r in recs], np.uint64),
                    k, float(t[k]), idx)


def write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def write_indices_csv(path, indices) -> None:
    write_rows(path, ["index"], ([int(i)] for i in indices))


def read_indices_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=1)


def write_density_csv(path, grid) -> None:
    """Density matrix with the axis values as the first row/column (2D) or two columns (1D)."""
    if len(grid.axes) == 1:
        write_rows(path, ["x", "density"], zip(grid.axes[0], grid.values))
        return
    x, y = grid.axes
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["z\\v"] + [repr(float(b)) for b in y])
        for a, row in zip(x, grid.values):
            w.writerow([repr(float(a))] + [repr(float(c)) for c in row])


def write_scan_csv(path, scan, omega_c: float) -> None:
    write_rows(path, ["tau1_bar", "tau3_bar", "objective"], scan.heatmap_rows(omega_c))


MODE_NUMBER = {"position": 1, "position_inverting": 2, "velocity": 3, "velocity_inverting": 4}


def write_minima_csv(path, scan, omega_c: float) -> None:
    best = scan.best
    rows = []
    for m in scan.minima:
        rows.append([MODE_NUMBER[m.mode], m.mode, int(best[m.mode] is m), omega_c * m.tau1,
                     omega_c * m.tau3, m.tau1, m.tau3, m.objective,
                     float(m.G[0, 0]), float(m.G[0, 1]), float(m.G[1, 0]), float(m.G[1, 1])])
    write_rows(path, ["class", "mode", "best", "tau1_bar", "tau3_bar", "tau1", "tau3", "objective",
                      "G_zz", "G_zv", "G_vz", "G_vv"], rows)


def read_minima_csv(path) -> dict[str, tuple[float, float]]:
    """Best (tau1, tau3) per mode from a minima table."""
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["best"] == "1":
                out[row["mode"]] = (float(row["tau1"]), float(row["tau3"]))
    return out
