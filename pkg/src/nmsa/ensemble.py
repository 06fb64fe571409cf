"""Trajectory ensembles, velocity estimation, normalization and PSD calibration."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np
from scipy import optimize, signal

from .dynamics import (PhaseState, SimParams, derive_seed, detector_stream, init_stream,
                       noise_stream, plan_steps, run_plan)
from .protocol import ProtocolSchedule

SAMPLE_RATE = 9.76e6
DETECTOR_GAIN = 290e-9  # m/V


class CalibrationError(RuntimeError):
    pass


@dataclass
class TrajectoryRecord:
    t: np.ndarray
    z: np.ndarray
    switch_index: int
    seed: int
    v: np.ndarray | None = None
    v_flags: np.ndarray | None = None  # True where the velocity is a one-sided estimate

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0]) if len(self.t) > 1 else float("nan")

    def __len__(self):
        return len(self.z)


def central_difference(z: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Velocity from positions along the last axis.

    Interior samples use (z[i+1] - z[i-1]) / (2 dt); the two endpoints use
    one-sided differences and are flagged.
    """
    z = np.asarray(z, float)
    if z.shape[-1] < 3:
        raise ValueError("velocity estimation needs at least 3 samples")
    v = np.empty_like(z)
    v[..., 1:-1] = (z[..., 2:] - z[..., :-2]) / (2 * dt)
    v[..., 0] = (z[..., 1] - z[..., 0]) / dt
    v[..., -1] = (z[..., -1] - z[..., -2]) / dt
    flags = np.zeros(z.shape[-1], bool)
    flags[[0, -1]] = True
    return v, flags


def estimate_velocity(record: TrajectoryRecord) -> TrajectoryRecord:
    v, flags = central_difference(record.z, record.dt)
    return replace(record, v=v, v_flags=flags)


@dataclass(frozen=True)
class Calibration:
    """Thermal reference of the normalized coordinates."""

    omega: float
    var_z: float
    var_v: float
    detector_gain: float | None = None
    linewidth: float | None = None  # fitted damping rate (rad/s), PSD calibration only

    def __post_init__(self):
        if not (self.var_z > 0 and self.var_v > 0):
            raise CalibrationError("calibration variances must be positive")

    @classmethod
    def thermal(cls, params: SimParams) -> "Calibration":
        return cls(params.omega_c, params.theta_zz, params.theta_vv)

    @classmethod
    def empirical(cls, ensemble: "Ensemble", omega: float) -> "Calibration":
        """Variances pooled over the pre-switch samples of an ensemble."""
        hi = max(ensemble.switch_index - 1, 3)
        acc = np.zeros((2, 3))  # rows z, v: count, sum, sum of squares
        for r in range(0, len(ensemble), 8192):
            z = ensemble.z[r:r + 8192, :hi]
            v, _ = central_difference(z, ensemble.sample_interval)
            for row, x in zip(acc, (z[:, 1:-1], v[:, 1:-1])):
                row += (x.size, x.sum(), np.square(x).sum())
        n, s1, s2 = acc.T
        var = s2 / n - (s1 / n) ** 2
        return cls(omega, float(var[0]), float(var[1]))

    @property
    def z_scale(self) -> float:
        return math.sqrt(self.var_z)

    @property
    def v_scale(self) -> float:
        return math.sqrt(self.var_v)

    def consistent(self, rtol: float = 0.1) -> bool:
        return abs(self.var_v / (self.omega**2 * self.var_z) - 1) <= rtol


@dataclass(frozen=True)
class EnsembleStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int
    normalized: bool = False

    @classmethod
    def from_states(cls, states: np.ndarray, normalized: bool = False) -> "EnsembleStats":
        states = np.asarray(states, float)
        n = states.shape[0]
        cov = np.cov(states, rowvar=False) if n > 1 else np.zeros((2, 2))
        return cls(states.mean(axis=0), np.atleast_2d(cov), n, normalized)

    def standard_errors(self) -> np.ndarray:
        """Approximate standard errors of the covariance entries (Gaussian)."""
        c = self.cov
        d = np.diag(c)
        return np.sqrt((np.outer(d, d) + c**2) / max(self.n - 1, 1))


def _scales(cal: Calibration):
    return np.array([cal.z_scale, cal.v_scale])


def normalize(obj, cal: Calibration, omega_c: float | None = None):
    """Map physical quantities onto thermal-normalized coordinates.

    Accepts a :class:`PhaseState`, :class:`TrajectoryRecord`,
    :class:`EnsembleStats` or an array whose last axis is (z, v).
    """
    omega_c = cal.omega if omega_c is None else omega_c
    s = _scales(cal)
    if isinstance(obj, PhaseState):
        if obj.normalized:
            return obj
        return PhaseState(np.asarray(obj.z) / s[0], np.asarray(obj.v) / s[1], normalized=True)
    if isinstance(obj, EnsembleStats):
        if obj.normalized:
            return obj
        return EnsembleStats(obj.mean / s, obj.cov / np.outer(s, s), obj.n, True)
    if isinstance(obj, TrajectoryRecord):
        return replace(obj, t=obj.t * omega_c, z=obj.z / s[0],
                       v=None if obj.v is None else obj.v / s[1])
    return np.asarray(obj, float) / s


def denormalize(obj, cal: Calibration, omega_c: float | None = None):
    omega_c = cal.omega if omega_c is None else omega_c
    s = _scales(cal)
    if isinstance(obj, PhaseState):
        if not obj.normalized:
            return obj
        return PhaseState(np.asarray(obj.z) * s[0], np.asarray(obj.v) * s[1])
    if isinstance(obj, EnsembleStats):
        return EnsembleStats(obj.mean * s, obj.cov * np.outer(s, s), obj.n, False)
    if isinstance(obj, TrajectoryRecord):
        return replace(obj, t=obj.t / omega_c, z=obj.z * s[0],
                       v=None if obj.v is None else obj.v * s[1])
    return np.asarray(obj, float) * s


@dataclass
class Ensemble:
    """Positions of many independent protocol realizations on a shared time grid."""

    t: np.ndarray
    z: np.ndarray            # (n_traj, n_samples)
    seeds: np.ndarray        # per-trajectory 64-bit seeds
    switch_index: int
    switch_time: float
    indices: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.indices is None:
            self.indices = np.arange(self.z.shape[0])

    def __len__(self):
        return self.z.shape[0]

    def __getitem__(self, i: int) -> TrajectoryRecord:
        return TrajectoryRecord(self.t, self.z[i], self.switch_index, int(self.seeds[i]))

    def __iter__(self) -> Iterator[TrajectoryRecord]:
        return (self[i] for i in range(len(self)))

    @property
    def sample_interval(self) -> float:
        return float(self.t[1] - self.t[0])

    @property
    def n_samples(self) -> int:
        return self.z.shape[1]

    def positions(self, k: int) -> np.ndarray:
        return self.z[:, k]

    def velocities(self, k) -> np.ndarray:
        """Central-difference velocity at interior sample(s) ``k``."""
        k = np.asarray(k)
        if np.any(k < 1) or np.any(k > self.n_samples - 2):
            raise IndexError("velocity needs both neighbouring samples")
        return (self.z[:, k + 1] - self.z[:, k - 1]) / (2 * self.sample_interval)

    def phase(self, k: int, cal: Calibration | None = None) -> np.ndarray:
        """(n_traj, 2) states at sample ``k``, normalized when ``cal`` is given."""
        x = np.stack([self.positions(k), self.velocities(k)], axis=1)
        return normalize(x, cal) if cal is not None else x

    def subset(self, idx) -> "Ensemble":
        idx = np.asarray(idx)
        return Ensemble(self.t, self.z[idx], self.seeds[idx], self.switch_index,
                        self.switch_time, self.indices[idx])

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.seeds, dtype="<u8").tobytes())
        h.update(np.ascontiguousarray(self.z, dtype="<f8").tobytes())
        return h.hexdigest()

    @staticmethod
    def concatenate(parts: Sequence["Ensemble"]) -> "Ensemble":
        p0 = parts[0]
        return Ensemble(p0.t, np.concatenate([p.z for p in parts]),
                        np.concatenate([p.seeds for p in parts]), p0.switch_index,
                        p0.switch_time, np.concatenate([p.indices for p in parts]))


def _switch_index(times: np.ndarray, switch_time: float) -> int:
    tol = 1e-9 * (times[1] - times[0]) if len(times) > 1 else 0.0
    return int(np.searchsorted(times, switch_time - tol))


def _initial_states(init, seeds, params: SimParams, T_init: float | None):
    n = len(seeds)
    if isinstance(init, str):
        if init != "thermal":
            raise ValueError(f"unknown init mode {init!r}")
        T0 = params.calibration_temperature if T_init is None else T_init
        if T0 <= 0:
            raise ValueError("thermal initialization needs a positive temperature")
        sz = math.sqrt(params.k_B * T0 / (params.m * params.omega_c**2))
        sv = math.sqrt(params.k_B * T0 / params.m)
        z0 = np.empty(n)
        v0 = np.empty(n)
        for j, s in enumerate(seeds):
            a, b = init_stream(s).standard_normal(2)
            z0[j], v0[j] = sz * a, sv * b
        return z0, v0
    arr = np.array([s.as_array() if isinstance(s, PhaseState) else s for s in init], float)
    arr = arr.reshape(n, 2)
    return arr[:, 0].copy(), arr[:, 1].copy()


def _run_chunk(plan, params, seeds, z0, v0, times, schedule) -> Ensemble:
    noise = None
    if plan.has_noise:
        noise = np.empty((len(seeds), plan.n_steps))
        for j, s in enumerate(seeds):
            noise[j] = noise_stream(s).standard_normal(plan.n_steps)
    z, _, _ = run_plan(plan, z0, v0, noise)
    if params.position_noise > 0:
        for j, s in enumerate(seeds):
            z[j] += params.position_noise * detector_stream(s).standard_normal(z.shape[1])
    return Ensemble(times, z, np.asarray(seeds, dtype=np.uint64),
                    _switch_index(times, schedule.switch_time), schedule.switch_time)


def iter_ensemble(params: SimParams, schedule: ProtocolSchedule, n_traj: int, master_seed: int,
                  init="thermal", sample_rate: float = SAMPLE_RATE, T_init: float | None = None,
                  chunk_size: int = 4096) -> Iterator[Ensemble]:
    """Generate an ensemble chunk by chunk (bounded memory)."""
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    plan = plan_steps(schedule.timeline(), params, sample_rate)
    explicit = not isinstance(init, str)
    if explicit and len(init) != n_traj:
        raise ValueError("explicit init must list one state per trajectory")
    for start in range(0, n_traj, chunk_size):
        stop = min(start + chunk_size, n_traj)
        seeds = [derive_seed(master_seed, i) for i in range(start, stop)]
        chunk_init = init[start:stop] if explicit else init
        z0, v0 = _initial_states(chunk_init, seeds, params, T_init)
        ens = _run_chunk(plan, params, seeds, z0, v0, plan.sample_times, schedule)
        ens.indices = np.arange(start, stop)
        yield ens


def generate_ensemble(params: SimParams, schedule: ProtocolSchedule, n_traj: int,
                      master_seed: int, init="thermal", sample_rate: float = SAMPLE_RATE,
                      T_init: float | None = None, chunk_size: int = 4096) -> Ensemble:
    """Simulate ``n_traj`` independent realizations of ``schedule``.

    Trajectory ``i`` draws from streams seeded by ``derive_seed(master_seed, i)``
    only, so any trajectory can be regenerated alone with
    :func:`evolve_trajectory`.
    """
    parts = list(iter_ensemble(params, schedule, n_traj, master_seed, init, sample_rate,
                               T_init, chunk_size))
    return parts[0] if len(parts) == 1 else Ensemble.concatenate(parts)


def evolve_trajectory(initial: PhaseState, schedule: ProtocolSchedule, params: SimParams,
                      sample_rate: float = SAMPLE_RATE, seed: int = 0) -> TrajectoryRecord:
    """One sampled realization of ``schedule`` from a physical-unit initial state."""
    if initial.normalized:
        raise ValueError("initial state must be in physical units")
    plan = plan_steps(schedule.timeline(), params, sample_rate)
    ens = _run_chunk(plan, params, [seed], np.array([float(initial.z)]),
                     np.array([float(initial.v)]), plan.sample_times, schedule)
    return ens[0]


def evolve_states(z0, v0, schedule: ProtocolSchedule, params: SimParams,
                  master_seed: int | None = None):
    """Final physical states after the whole schedule, without recording.

    Noise is drawn only when ``master_seed`` is given (per-particle streams).
    """
    plan = plan_steps(schedule.timeline(), params, None)
    z0 = np.atleast_1d(np.asarray(z0, float))
    v0 = np.atleast_1d(np.asarray(v0, float))
    noise = None
    if master_seed is not None and plan.has_noise:
        noise = np.stack([noise_stream(derive_seed(master_seed, i)).standard_normal(plan.n_steps)
                          for i in range(len(z0))])
    _, zf, vf = run_plan(plan, z0, v0, noise, record=False)
    return zf, vf


def _dho(f, A, f0, g, floor):
    return A / ((f0**2 - f**2) ** 2 + (g * f) ** 2) + floor


def psd_calibrate(data, sample_rate: float | None = None, *, detector_gain: float | None = None,
                  nperseg: int = 2**16, fit_halfwidth: float = 10.0) -> Calibration:
    """Calibrate thermal variances and the trap frequency from an equilibrium record.

    ``data`` is a :class:`TrajectoryRecord` or a position array (meters, or
    volts when ``detector_gain`` in m/V is supplied).  The position PSD is a
    Welch average (Hann window, 50% overlap); the trap frequency comes from a
    damped-oscillator line-shape fit within ``fit_halfwidth`` linewidths of
    the peak; the variances are the integrals of the position and velocity
    PSDs.
    """
    if isinstance(data, TrajectoryRecord):
        z = np.asarray(data.z, float)
        fs = 1.0 / data.dt
    else:
        z = np.asarray(data, float)
        if sample_rate is None:
            raise ValueError("sample_rate is required for raw arrays")
        fs = sample_rate
    if detector_gain is not None:
        z = z * detector_gain
    if z.size < 16:
        raise CalibrationError("record too short")
    nseg = min(nperseg, z.size)
    f, Pz = signal.welch(z, fs=fs, window="hann", nperseg=nseg, noverlap=nseg // 2,
                         detrend="constant")
    v, _ = central_difference(z, 1.0 / fs)
    _, Pv = signal.welch(v[1:-1], fs=fs, window="hann", nperseg=nseg, noverlap=nseg // 2,
                         detrend="constant")
    df = f[1] - f[0]
    var_z = float(np.sum(Pz) * df)
    var_v = float(np.sum(Pv) * df)

    pos = slice(1, None)
    k = int(np.argmax(Pz[pos])) + 1
    peak = Pz[k]
    background = np.median(Pz[1:])
    if not np.isfinite(peak) or peak < 20 * background:
        raise CalibrationError("no resolvable resonance in the position PSD")
    half = np.nonzero(Pz[1:k] < peak / 2)[0]
    lo = f[half[-1] + 1] if half.size else f[1]
    above = np.nonzero(Pz[k:] < peak / 2)[0]
    hi = f[k + above[0]] if above.size else f[-1]
    g0 = max(hi - lo, 2 * df)
    f0 = f[k]
    win = (f > f0 - fit_halfwidth * g0) & (f < f0 + fit_halfwidth * g0)
    if win.sum() < 6:
        win = (f > f0 - 6 * df) & (f < f0 + 6 * df)
    fw, Pw = f[win], Pz[win]
    A0 = peak * (g0 * f0) ** 2

    def resid(p):
        return np.log(_dho(fw, *p)) - np.log(Pw)

    x0 = np.array([A0, f0, g0, max(Pw.min() * 0.01, 1e-300)])
    sc = np.abs(x0)
    sol = optimize.least_squares(lambda y: resid(y * sc), x0 / sc,
                                 bounds=(np.array([0, 0, 0, 0]), np.inf), x_scale="jac")
    if not sol.success:
        raise CalibrationError(f"line-shape fit failed: {sol.message}")
    A, f0_fit, g_fit, _ = sol.x * sc
    return Calibration(2 * math.pi * f0_fit, var_z, var_v, detector_gain, 2 * math.pi * g_fit)
