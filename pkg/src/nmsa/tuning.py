"""Search over (tau1, tau3) for the four NMSA operating points."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .ensemble import Calibration, Ensemble
from .estimation import GainEstimate, fit_gain, fit_gain_batch
from .postselect import EmptySelection, select_zero_cov_many


class ScanError(ValueError):
    pass


def circle_targets(radii=(0.5, 1.0, 1.5), per_unit_radius: int = 32) -> np.ndarray:
    """Initial mean states on concentric circles, angle count proportional to radius."""
    pts = []
    for r in radii:
        n = max(8, int(round(per_unit_radius * r)))
        phi = 2 * np.pi * np.arange(n) / n
        pts.append(np.column_stack([r * np.cos(phi), r * np.sin(phi)]))
    return np.concatenate(pts)


def classify(G: np.ndarray) -> str:
    g = G[0, 0]
    if abs(g) >= 1:
        return "position" if g > 0 else "position_inverting"
    return "velocity" if g > 0 else "velocity_inverting"


def _lagrange_weights(frac: float) -> np.ndarray:
    # cubic through offsets -1, 0, 1, 2
    x = frac
    return np.array([-x * (x - 1) * (x - 2) / 6, (x + 1) * (x - 1) * (x - 2) / 2,
                     -(x + 1) * x * (x - 2) / 2, (x + 1) * x * (x - 1) / 6])


def positions_at(z: np.ndarray, f: float) -> np.ndarray:
    """Positions at fractional sample index ``f`` (cubic interpolation between samples)."""
    k = int(math.floor(f + 1e-12))
    frac = f - k
    if frac < 1e-9:
        return z[..., k]
    w = _lagrange_weights(frac)
    return z[..., k - 1:k + 3] @ w


def phase_at(z: np.ndarray, f: float, dt: float, cal: Calibration) -> np.ndarray:
    zc = positions_at(z, f)
    v = (positions_at(z, f + 1) - positions_at(z, f - 1)) / (2 * dt)
    return np.stack([zc / cal.z_scale, v / cal.v_scale], axis=-1)


@dataclass
class Minimum:
    i: int
    j: int
    tau1: float
    tau3: float
    objective: float
    mode: str
    G: np.ndarray


@dataclass
class TimingScan:
    tau1: np.ndarray
    tau3: np.ndarray
    t0_index: np.ndarray      # fractional sample indices
    t3_index: np.ndarray
    objective: np.ndarray     # (n1, n3)
    G: np.ndarray             # (n1, n3, 2, 2)
    offset: np.ndarray        # (n1, n3, 2)
    initial_means: list       # per tau1 row: (k, 2)
    final_means: list         # per tau1 row: (n3, k, 2)
    minima: list[Minimum] = field(default_factory=list)
    skipped_targets: int = 0

    def gain_at(self, i: int, j: int) -> GainEstimate:
        return fit_gain(self.initial_means[i], self.final_means[i][j])

    @property
    def best(self) -> dict[str, Minimum]:
        out: dict[str, Minimum] = {}
        for m in self.minima:
            if m.mode not in out or m.objective < out[m.mode].objective:
                out[m.mode] = m
        return out

    def heatmap_rows(self, omega_c: float):
        """(tau1_bar, tau3_bar, objective) rows in grid order."""
        for i, a in enumerate(self.tau1):
            for j, b in enumerate(self.tau3):
                yield omega_c * a, omega_c * b, float(self.objective[i, j])


def default_grid(ensemble: Ensemble, tau2: float, omega_c: float, tau1_periods: float = 0.75,
                 tau3_periods: float = 1.25, upsample: int = 1):
    """Sample-aligned (tau1, tau3) grids within the recorded windows."""
    period = 2 * math.pi / omega_c
    t = ensemble.t
    dt = ensemble.sample_interval / upsample
    t_sw = ensemble.switch_time
    t_end = t_sw + tau2
    k_first = (t_sw - t[0]) / ensemble.sample_interval
    # t0 candidates: the velocity stencil must end before the switch
    margin = 2 if upsample > 1 else 1
    f0 = np.arange(math.floor((k_first - 1) * upsample + 1e-9) / upsample, margin - 1e-9,
                   -1.0 / upsample)
    tau1 = t_sw - (t[0] + f0 * ensemble.sample_interval)
    keep = (tau1 > 0) & (tau1 <= tau1_periods * period + 1e-15)
    f3_start = math.ceil((t_end - t[0]) / dt - 1e-9) * dt / ensemble.sample_interval
    f3 = np.arange(f3_start, ensemble.n_samples - 1 - margin + 1e-9, 1.0 / upsample)
    tau3 = t[0] + f3 * ensemble.sample_interval - t_end
    keep3 = (tau3 >= 0) & (tau3 <= tau3_periods * period + 1e-15)
    order = np.argsort(tau1[keep])
    return tau1[keep][order], tau3[keep3].copy()


def _indices_for(ensemble: Ensemble, times: np.ndarray, upsample: int) -> np.ndarray:
    f = (times - ensemble.t[0]) / ensemble.sample_interval
    q = np.round(f * upsample) / upsample
    if np.any(np.abs(q - f) > 1e-6):
        raise ScanError("timing grid is not aligned with the (upsampled) sample grid")
    return q


def scan_timing(ensemble: Ensemble, tau2: float, tau1_grid=None, tau3_grid=None, targets=None,
                n_select: int = 200, cal: Calibration | None = None, omega_c: float | None = None,
                max_radius: float | None = None, upsample: int = 1) -> TimingScan:
    """Fit the gain matrix for every (tau1, tau3) pair and locate its diagonal points.

    For each tau1 the zero-covariance subsets (``n_select`` nearest
    trajectories around each target) are formed once at t0 and followed to
    every t3.  ``upsample > 1`` interpolates the records in time.
    """
    if cal is None:
        if omega_c is None:
            raise ValueError("need either a calibration or omega_c")
        cal = Calibration.empirical(ensemble, omega_c)
    omega_c = cal.omega if omega_c is None else omega_c
    targets = circle_targets() if targets is None else np.asarray(targets, float)
    if tau1_grid is None or tau3_grid is None:
        d1, d3 = default_grid(ensemble, tau2, omega_c, upsample=upsample)
        tau1_grid = d1 if tau1_grid is None else tau1_grid
        tau3_grid = d3 if tau3_grid is None else tau3_grid
    tau1_grid = np.asarray(tau1_grid, float)
    tau3_grid = np.asarray(tau3_grid, float)
    f0 = _indices_for(ensemble, ensemble.switch_time - tau1_grid, upsample)
    f3 = _indices_for(ensemble, ensemble.switch_time + tau2 + tau3_grid, upsample)
    margin = 2 if upsample > 1 else 1
    sw_f = (ensemble.switch_time - ensemble.t[0]) / ensemble.sample_interval
    if np.any(f0 < margin) or np.any(f0 + 1 > sw_f + 1e-9):
        raise ScanError("tau1 grid reaches outside the recorded pre-switch window")
    if np.any(f3 > ensemble.n_samples - 1 - margin) or np.any(tau3_grid < 0):
        raise ScanError("tau3 grid reaches outside the recorded post-switch window")

    dt = ensemble.sample_interval
    lo = int(math.floor(f3.min())) - margin
    hi = int(math.ceil(f3.max())) + margin + 1
    n1, n3 = len(f0), len(f3)
    G = np.full((n1, n3, 2, 2), np.nan)
    off = np.full((n1, n3, 2), np.nan)
    X_rows, Y_rows = [], []
    skipped = 0
    for i, f in enumerate(f0):
        states = phase_at(ensemble.z, f, dt, cal)
        tree = cKDTree(states)
        idx = select_zero_cov_many(states, targets, n_select, tree)
        if max_radius is not None:
            far = np.hypot(*(states[idx[:, -1]] - targets).T) > max_radius
            skipped += int(far.sum())
            idx = idx[~far]
        if idx.shape[0] < 3:
            raise EmptySelection("fewer than 3 usable targets for the gain fit")
        X = states[idx].mean(axis=1)
        # mean trajectories are linear in z, so velocities follow from them
        zmean = ensemble.z[idx.ravel(), lo:hi].reshape(idx.shape[0], idx.shape[1], hi - lo).mean(axis=1)
        Y = np.stack([phase_at(zmean, g - lo, dt, cal) for g in f3])  # (n3, k, 2)
        Gi, oi = fit_gain_batch(X, Y)
        G[i], off[i] = Gi, oi
        X_rows.append(X)
        Y_rows.append(Y)
    obj = np.abs(G[..., 0, 1]) + np.abs(G[..., 1, 0])
    scan = TimingScan(tau1_grid, tau3_grid, f0, f3, obj, G, off, X_rows, Y_rows,
                      skipped_targets=skipped)
    scan.minima = find_minima(scan)
    return scan


def find_minima(scan: TimingScan) -> list[Minimum]:
    """Interior 8-neighbour local minima of the objective, sorted by depth."""
    obj = scan.objective
    if obj.shape[0] < 3 or obj.shape[1] < 3:
        return []
    local = ndimage.minimum_filter(obj, size=3, mode="nearest") == obj
    local[[0, -1], :] = False
    local[:, [0, -1]] = False
    out = []
    for i, j in zip(*np.nonzero(local)):
        Gij = scan.G[i, j]
        out.append(Minimum(int(i), int(j), float(scan.tau1[i]), float(scan.tau3[j]),
                           float(obj[i, j]), classify(Gij), Gij.copy()))
    out.sort(key=lambda m: m.objective)
    return out


def measure_gain(ensemble: Ensemble, t0_index: float, t3_index: float, cal: Calibration,
                 targets=None, n_select: int = 200) -> GainEstimate:
    """Gain matrix at one fixed timing from zero-covariance subsets."""
    targets = circle_targets() if targets is None else np.asarray(targets, float)
    dt = ensemble.sample_interval
    states = phase_at(ensemble.z, t0_index, dt, cal)
    idx = select_zero_cov_many(states, targets, n_select)
    X = states[idx].mean(axis=1)
    k = int(math.floor(t3_index))
    lo, hi = k - 2, k + 4
    zmean = ensemble.z[idx.ravel(), lo:hi].reshape(idx.shape[0], idx.shape[1], hi - lo).mean(axis=1)
    Y = phase_at(zmean, t3_index - lo, dt, cal)
    return fit_gain(X, Y)
