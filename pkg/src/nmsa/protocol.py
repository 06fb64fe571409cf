"""Amplifier schedules and their noiseless (and linear-noise) gain matrices."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.linalg import expm

from .dynamics import (Kind, PotentialSpec, PropagatorMatrix, ScheduleError, SimParams,
                       Stage, analytic_propagator)

MODES = ("position", "position_inverting", "velocity", "velocity_inverting")


@dataclass(frozen=True)
class ProtocolSchedule:
    """Ordered potential stages of one amplifier run.

    ``stages`` is the amplifier core (normally PP(tau1), IPP(tau2), PP(tau3));
    ``rest`` is the trapping potential held during the pre/post recording
    windows.  ``step2_offset`` is the time from the core start to the start of
    Step II.
    """

    stages: tuple[Stage, ...]
    pre_window: float = 0.0
    post_window: float = 0.0
    rest: PotentialSpec | None = None
    step2_index: int = 1
    step2_offset: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if not self.stages:
            raise ScheduleError("schedule needs at least one stage")
        for st in self.stages:
            if not (st.duration >= 0 and math.isfinite(st.duration)):
                raise ScheduleError(f"stage duration {st.duration!r} must be >= 0")
        if self.pre_window < 0 or self.post_window < 0:
            raise ScheduleError("recording windows must be >= 0")
        if self.rest is None:
            pp = [s.spec for s in self.stages if s.spec.kind is Kind.PP]
            if not pp:
                raise ScheduleError("no trapping PP stage to infer the rest potential from")
            object.__setattr__(self, "rest", pp[0])
        if self.step2_offset is None:
            k = min(self.step2_index, len(self.stages) - 1)
            object.__setattr__(self, "step2_offset", sum(s.duration for s in self.stages[:k]))

    @classmethod
    def from_intervals(cls, intervals: Sequence[tuple[PotentialSpec, float, float]], **kw):
        """Build from ``(spec, start, duration)`` triples; they must tile time contiguously."""
        ivs = sorted(intervals, key=lambda x: x[1])
        t = ivs[0][1] if ivs else 0.0
        for spec, start, dur in ivs:
            if dur < 0:
                raise ScheduleError(f"negative duration {dur!r}")
            if start < t - 1e-15 * max(1.0, abs(t)):
                raise ScheduleError(f"stage starting at {start!r} overlaps the previous one")
            if start > t + 1e-15 * max(1.0, abs(t)) + 1e-18:
                raise ScheduleError(f"gap before stage starting at {start!r}")
            t = start + dur
        return cls(tuple(Stage(s, d) for s, _, d in ivs), **kw)

    @property
    def omega_c(self) -> float:
        return self.rest.omega

    @property
    def step2(self) -> Stage:
        return self.stages[self.step2_index]

    @property
    def switch_time(self) -> float:
        """Absolute start time of Step II within the recorded timeline."""
        return self.pre_window + self.step2_offset

    @property
    def core_duration(self) -> float:
        return sum(s.duration for s in self.stages)

    @property
    def total_duration(self) -> float:
        return self.pre_window + self.core_duration + self.post_window

    def timeline(self) -> tuple[Stage, ...]:
        """Stages including the recording windows, zero-length stages dropped."""
        out = []
        if self.pre_window > 0:
            out.append(Stage(self.rest, self.pre_window))
        out.extend(s for s in self.stages if s.duration > 0)
        if self.post_window > 0:
            out.append(Stage(self.rest, self.post_window))
        if not out:
            raise ScheduleError("schedule has zero total duration")
        return tuple(out)

    def with_step2(self, **changes) -> "ProtocolSchedule":
        stages = list(self.stages)
        st = stages[self.step2_index]
        stages[self.step2_index] = Stage(replace(st.spec, **changes), st.duration)
        return replace(self, stages=tuple(stages))

    def with_duffing(self, xi: float) -> "ProtocolSchedule":
        stages = tuple(Stage(replace(s.spec, duffing_xi=xi), s.duration) if s.spec.kind.parabolic else s
                       for s in self.stages)
        rest = replace(self.rest, duffing_xi=xi)
        return replace(self, stages=stages, rest=rest)


def build_schedule(tau1: float, tau2: float, tau3: float, omega_c: float, omega_i: float,
                   delta: float = 0.0, pre: float = 0.0, post: float = 0.0, *,
                   kind: Kind | str = Kind.IPP, force: float = 0.0,
                   duffing_xi: float = 0.0) -> ProtocolSchedule:
    """PP(tau1) -> step II(tau2, center shifted by ``delta``) -> PP(tau3) inside PP windows.

    ``kind`` selects the Step II potential (IPP by default; WEAK_PP uses
    ``omega_i`` as its frequency, FREE ignores it).
    """
    for name, val in (("tau1", tau1), ("tau2", tau2), ("tau3", tau3), ("pre", pre), ("post", post)):
        if val < 0 or not math.isfinite(val):
            raise ScheduleError(f"{name}={val!r} must be >= 0")
    kind = Kind(kind)
    pp = PotentialSpec(Kind.PP, omega_c, duffing_xi=duffing_xi)
    if kind is Kind.FREE:
        mid = PotentialSpec(Kind.FREE, 0.0, center=delta, force=force)
    elif kind is Kind.IPP:
        mid = PotentialSpec(Kind.IPP, omega_i, center=delta, force=force)
    else:
        mid = PotentialSpec(kind, omega_i, center=delta, force=force, duffing_xi=duffing_xi)
    stages = (Stage(pp, tau1), Stage(mid, tau2), Stage(pp, tau3))
    return ProtocolSchedule(stages, pre, post, rest=pp, step2_index=1, step2_offset=tau1)


def _stage_propagator(st: Stage, omega_c: float, params: SimParams | None) -> PropagatorMatrix:
    spec = st.spec
    omega = 0.0 if spec.kind is Kind.FREE else spec.omega
    has_drift = bool(spec.center or spec.force)
    return analytic_propagator(spec.kind, omega, st.duration, omega_c,
                               const_force=spec.force, params=params if has_drift else None,
                               center=spec.center)


def ideal_gain_matrix(schedule: ProtocolSchedule, params: SimParams | None = None):
    """Noiseless linear map of the amplifier core on normalized coordinates.

    Returns ``(M, drift)``; the drift (normalized by the thermal deviations of
    ``params``) is the final-state shift caused by a displaced center or a
    constant force during the stages.
    """
    omega_c = schedule.omega_c
    total = PropagatorMatrix(1.0, 0.0, 0.0, 1.0)
    for st in schedule.stages:
        if (st.spec.center or st.spec.force) and params is None:
            raise ValueError("params are needed to normalize the drift of a displaced stage")
        total = _stage_propagator(st, omega_c, params) @ total
    return total.matrix, np.asarray(total.drift)


def approx_gain(tau2_bar: float, kind: Kind | str = Kind.IPP, omega_ratio: float = 0.0) -> float:
    """Short-time gain estimate 1 + kappa * tau2_bar / 2."""
    if tau2_bar < 0:
        raise ValueError("tau2_bar must be >= 0")
    return 1.0 + kappa_pot(kind, omega_ratio) * tau2_bar / 2.0


def kappa_pot(kind: Kind | str, omega_ratio: float = 0.0) -> float:
    kind = Kind(kind)
    if kind is Kind.IPP:
        return 1.0 + omega_ratio**2
    if kind.parabolic:
        return 1.0 - omega_ratio**2
    return 1.0


def force_offset(F_c: float, schedule: ProtocolSchedule, params: SimParams):
    """Equivalent IPP displacement and normalized output offset of a Step II force.

    Returns ``(delta_equiv, offset)``.  For a Step II without curvature the
    displacement is undefined (``nan``) and the offset is the ballistic
    response to the force.
    """
    if not math.isfinite(F_c):
        raise ValueError("F_c must be finite")
    spec = schedule.step2.spec
    if F_c == 0:
        return 0.0, np.zeros(2)
    if spec.kind is Kind.FREE or spec.omega == 0:
        shifted = schedule.with_step2(force=spec.force + F_c)
        delta = float("nan")
    else:
        if spec.kind is Kind.IPP:
            delta = -F_c / (params.m * spec.omega**2)
        else:
            delta = F_c / (params.m * spec.omega**2)
        shifted = schedule.with_step2(center=spec.center + delta)
    _, d1 = ideal_gain_matrix(shifted, params)
    needs = bool(spec.center or spec.force) or any(s.spec.center or s.spec.force for s in schedule.stages)
    d0 = ideal_gain_matrix(schedule, params)[1] if needs else np.zeros(2)
    return delta, d1 - d0


def chain_gain(schedule_or_matrix, n_stages: int) -> np.ndarray:
    """Gain matrix of ``n_stages`` identical amplifiers in series."""
    if n_stages < 1:
        raise ValueError("n_stages must be >= 1")
    if isinstance(schedule_or_matrix, ProtocolSchedule):
        M = ideal_gain_matrix(schedule_or_matrix)[0]
    else:
        M = np.asarray(schedule_or_matrix, float)
    return np.linalg.matrix_power(M, n_stages)


def _rotation_angle(R: np.ndarray) -> float:
    # R = [[cos, sin], [-sin, cos]] (clockwise PP rotation in normalized phase space)
    return math.atan2(R[0, 1], R[0, 0])


def optimal_timings(omega_c: float, omega_i: float, tau2: float,
                    kind: Kind | str = Kind.IPP) -> dict[str, tuple[float, float]]:
    """Exact (tau1, tau3) that diagonalize the gain matrix, for each NMSA mode.

    Obtained from the singular value decomposition of the Step II map: tau1
    rotates the input axes onto its right singular vectors, tau3 rotates the
    left singular vectors back onto the coordinate axes.  tau1 is reported in
    [0, half period), tau3 in [0, period).
    """
    kind = Kind(kind)
    omega = 0.0 if kind is Kind.FREE else omega_i
    H = analytic_propagator(kind, omega, tau2, omega_c).matrix
    U, S, Vt = np.linalg.svd(H)
    V = Vt.T
    if np.linalg.det(U) < 0:
        U[:, 1] *= -1
        V[:, 1] *= -1
    th1 = _rotation_angle(V)
    th3 = -_rotation_angle(U)
    base = {
        "position": (th1, th3),
        "position_inverting": (th1, th3 + math.pi),
        "velocity": (th1 - math.pi / 2, th3 + math.pi / 2),
        "velocity_inverting": (th1 - math.pi / 2, th3 + 3 * math.pi / 2),
    }
    out = {}
    for mode, (a1, a3) in base.items():
        # shifting tau1 by half a period negates M; compensate in tau3
        k = math.floor(a1 / math.pi)
        a1 -= k * math.pi
        a3 -= k * math.pi
        a3 %= 2 * math.pi
        out[mode] = (a1 / omega_c, a3 / omega_c)
    return out


@dataclass(frozen=True)
class QuantizedTiming:
    t0_index: int
    t3_index: int
    tau1: float
    tau3: float


def quantize_timing(tau1: float, tau3: float, sample_times: np.ndarray, switch_time: float,
                    tau2: float) -> QuantizedTiming:
    """Snap exact timings onto the recorded sample grid."""
    t = np.asarray(sample_times)
    k0 = int(np.argmin(np.abs(t - (switch_time - tau1))))
    k3 = int(np.argmin(np.abs(t - (switch_time + tau2 + tau3))))
    return QuantizedTiming(k0, k3, switch_time - t[k0], t[k3] - switch_time - tau2)


def _drift_matrix(spec: PotentialSpec, gamma: float) -> np.ndarray:
    if spec.kind.parabolic:
        k = -spec.omega**2
    elif spec.kind is Kind.IPP:
        k = spec.omega**2
    else:
        k = 0.0
    return np.array([[0.0, 1.0], [k, -gamma]])


def linear_moments(stages: Sequence[Stage], params: SimParams):
    """Exact first/second moment propagation of the linear damped Langevin model.

    Returns ``(M, N)`` in normalized coordinates: the mean map (including
    damping) and the covariance added by the bath and recoil noise, so that
    an initial Gaussian (mu, Theta) ends as (M mu, M Theta M^T + N).  Duffing
    terms and constant forces are ignored.  Discretization uses the Van Loan
    block exponential per stage.
    """
    q = params.velocity_diffusion()
    Q = np.array([[0.0, 0.0], [0.0, q]])
    Phi = np.eye(2)
    Sig = np.zeros((2, 2))
    for st in stages:
        if st.duration == 0:
            continue
        A = _drift_matrix(st.spec, params.gamma)
        blk = np.zeros((4, 4))
        blk[:2, :2] = -A
        blk[:2, 2:] = Q
        blk[2:, 2:] = A.T
        E = expm(blk * st.duration)
        F = E[2:, 2:].T
        Qd = F @ E[:2, 2:]
        Sig = F @ Sig @ F.T + Qd
        Phi = F @ Phi
    z_scale = math.sqrt(params.theta_zz)
    Nm = np.diag([1.0 / z_scale, 1.0 / (params.omega_c * z_scale)])
    Ni = np.diag([z_scale, params.omega_c * z_scale])
    M = Nm @ Phi @ Ni
    N = Nm @ Sig @ Nm.T
    return M, 0.5 * (N + N.T)
