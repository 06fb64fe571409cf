"""Potentials, exact linear propagators and the stochastic Langevin integrator.

The particle moves along z in a piecewise-constant potential landscape.  Each
stage is one of

* ``PP``      -- trapping parabolic potential, attractive about ``center``
* ``WEAK_PP`` -- a shallower parabolic potential (same physics, other omega)
* ``IPP``     -- inverted parabolic potential, repulsive about ``center``
* ``FREE``    -- no potential

The integrator splits one step ``h`` as::

    cubic kick (h/2) -> exact linear flow (h/2) -> exact OU (h) -> exact linear flow (h/2) -> cubic kick (h/2)

The linear flow is the closed-form harmonic / hyperbolic / ballistic solution
(including a constant force), so without damping, noise and Duffing term the
scheme reproduces :func:`analytic_propagator` to round-off.  The OU sub-step
samples the velocity damping and the white force noise exactly, which keeps
the canonical distribution of the linear trap invariant.
"""
from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

K_B = 1.380649e-23

# 10% cubic correction at 70 nm excursion
DEFAULT_DUFFING_XI = 0.1 / (70e-9) ** 2


class ConfigurationError(ValueError):
    """Raised when physical parameters violate a precondition."""


class ScheduleError(ValueError):
    """Raised for malformed potential schedules."""


class Kind(str, enum.Enum):
    PP = "PP"
    IPP = "IPP"
    WEAK_PP = "WEAK_PP"
    FREE = "FREE"

    @property
    def parabolic(self) -> bool:
        return self in (Kind.PP, Kind.WEAK_PP)


def sphere_mass(radius: float, density: float) -> float:
    return 4.0 / 3.0 * math.pi * radius**3 * density


@dataclass(frozen=True)
class SimParams:
    """Physical constants of the stochastic dynamics (SI units).

    ``T_c`` is the temperature of the thermal state used for normalization;
    it defaults to the bath temperature ``T``.  Noiseless studies set ``T=0``
    and keep ``T_c`` at room temperature.
    """

    m: float = sphere_mass(150e-9, 2200.0)
    T: float = 300.0
    gamma: float = 2.2e3
    omega_c: float = 2 * math.pi * 131.455e3
    omega_i: float = 0.41 * 2 * math.pi * 131.455e3
    duffing_xi: float = DEFAULT_DUFFING_XI  # trap calibration; schedules carry their own copy
    recoil_psd: float = 0.0
    dt: float = 1.0 / (4 * 9.76e6)
    k_B: float = K_B
    T_c: float | None = None
    position_noise: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            ("m", self.m > 0),
            ("T", self.T >= 0),
            ("gamma", self.gamma >= 0),
            ("omega_c", self.omega_c > 0),
            ("omega_i", self.omega_i >= 0),
            ("dt", self.dt > 0),
            ("recoil_psd", self.recoil_psd >= 0),
            ("duffing_xi", self.duffing_xi >= 0),
            ("k_B", self.k_B > 0),
            ("position_noise", self.position_noise >= 0),
        ]
        if self.T_c is not None:
            checks.append(("T_c", self.T_c > 0))
        for name, ok in checks:
            value = getattr(self, name)
            if not ok or not math.isfinite(value):
                raise ConfigurationError(f"{name}={value!r} out of range")
        if self.omega_c * self.dt >= 0.1:
            raise ConfigurationError(
                f"dt={self.dt!r} too coarse: omega_c*dt={self.omega_c * self.dt:.3g} must be < 0.1"
            )

    @property
    def calibration_temperature(self) -> float:
        return self.T if self.T_c is None else self.T_c

    @property
    def theta_zz(self) -> float:
        """Thermal position variance k_B T_c / (m omega_c^2)."""
        return self.k_B * self.calibration_temperature / (self.m * self.omega_c**2)

    @property
    def theta_vv(self) -> float:
        return self.k_B * self.calibration_temperature / self.m

    def noiseless(self) -> "SimParams":
        """Copy without bath, damping and recoil; keeps the calibration temperature."""
        return replace(self, T=0.0, gamma=0.0, recoil_psd=0.0, position_noise=0.0,
                       T_c=self.calibration_temperature)

    def linear(self) -> "SimParams":
        """Copy with a harmonic trap calibration.

        The integrator reads the cubic term from each stage's PotentialSpec;
        pass ``duffing_xi=params.duffing_xi`` to ``build_schedule`` (as
        ``RunConfig.schedule`` does) to simulate the anharmonic trap.
        """
        return replace(self, duffing_xi=0.0)

    def velocity_diffusion(self) -> float:
        """Velocity diffusion rate q in dv = ... + sqrt(q) dW (m^2/s^3)."""
        return 2 * self.gamma * self.k_B * self.T / self.m + self.recoil_psd / (2 * self.m**2)


@dataclass(frozen=True)
class PhaseState:
    """Position / velocity pair; z and v may be scalars or equally shaped arrays."""

    z: float | np.ndarray
    v: float | np.ndarray
    normalized: bool = False

    def __post_init__(self):
        if not (np.all(np.isfinite(self.z)) and np.all(np.isfinite(self.v))):
            raise ValueError("phase state must be finite")

    def as_array(self) -> np.ndarray:
        return np.stack(np.broadcast_arrays(np.asarray(self.z, float), np.asarray(self.v, float)), axis=-1)


@dataclass(frozen=True)
class PotentialSpec:
    kind: Kind
    omega: float = 0.0
    center: float = 0.0
    duffing_xi: float = 0.0
    force: float = 0.0  # additional constant force (N)

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.omega < 0 or not math.isfinite(self.omega):
            raise ConfigurationError(f"omega={self.omega!r} must be finite and >= 0")
        if self.kind is not Kind.FREE and self.omega == 0:
            raise ConfigurationError(f"{self.kind.value} requires omega > 0")
        if self.kind is Kind.IPP and self.duffing_xi:
            raise ConfigurationError("duffing_xi applies to parabolic potentials only")


def potential_force(spec: PotentialSpec, z, params: SimParams):
    """Force (N) on the particle at position ``z``."""
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("position must be finite")
    u = z - spec.center
    k = params.m * spec.omega**2
    if spec.kind.parabolic:
        f = -k * u - k * spec.duffing_xi * u**3
    elif spec.kind is Kind.IPP:
        f = k * u
    else:
        f = np.zeros_like(u)
    f = f + spec.force
    return f if f.ndim else float(f)


def equivalent_center(spec: PotentialSpec, m: float) -> float:
    """Center of the linear potential after absorbing the constant force."""
    if spec.kind is Kind.FREE or spec.force == 0:
        return spec.center
    k = m * spec.omega**2
    if spec.kind.parabolic:
        return spec.center + spec.force / k
    return spec.center - spec.force / k


def _linear_matrix(kind: Kind, omega: float, h: float) -> np.ndarray:
    """Physical-unit flow matrix acting on (z - c, v)."""
    if kind.parabolic:
        c, s = math.cos(omega * h), math.sin(omega * h)
        return np.array([[c, s / omega], [-omega * s, c]])
    if kind is Kind.IPP:
        c, s = math.cosh(omega * h), math.sinh(omega * h)
        return np.array([[c, s / omega], [omega * s, c]])
    return np.array([[1.0, h], [0.0, 1.0]])


def linear_flow(spec: PotentialSpec, h: float, m: float) -> tuple[np.ndarray, np.ndarray]:
    """Affine map x -> A x + b of the noiseless, undamped linear dynamics over ``h``."""
    A = _linear_matrix(spec.kind, spec.omega, h)
    if spec.kind is Kind.FREE:
        a = spec.force / m
        b = np.array([0.5 * a * h * h, a * h])
    else:
        c = np.array([equivalent_center(spec, m), 0.0])
        b = c - A @ c
    return A, b


@dataclass(frozen=True)
class PropagatorMatrix:
    """2x2 map on normalized (z_bar, v_bar) plus the drift of a constant force."""

    m11: float
    m12: float
    m21: float
    m22: float
    drift: tuple[float, float] = (0.0, 0.0)

    @classmethod
    def from_array(cls, M, drift=(0.0, 0.0)) -> "PropagatorMatrix":
        M = np.asarray(M, float)
        return cls(float(M[0, 0]), float(M[0, 1]), float(M[1, 0]), float(M[1, 1]),
                   (float(drift[0]), float(drift[1])))

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.m11, self.m12], [self.m21, self.m22]])

    @property
    def det(self) -> float:
        return self.m11 * self.m22 - self.m12 * self.m21

    def __matmul__(self, other: "PropagatorMatrix") -> "PropagatorMatrix":
        # self applied after other
        M = self.matrix @ other.matrix
        d = self.matrix @ np.asarray(other.drift) + np.asarray(self.drift)
        return PropagatorMatrix.from_array(M, d)

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        return x @ self.matrix.T + np.asarray(self.drift)


def normalization_matrix(omega_c: float, z_scale: float) -> np.ndarray:
    """Diagonal map from physical (z, v) to normalized (z_bar, v_bar)."""
    return np.diag([1.0 / z_scale, 1.0 / (omega_c * z_scale)])


def analytic_propagator(kind, omega: float, duration: float, omega_c_ref: float,
                        const_force: float = 0.0, params: SimParams | None = None,
                        center: float = 0.0) -> PropagatorMatrix:
    """Closed-form noiseless propagator in normalized coordinates.

    The drift is the response to ``const_force`` (and to a displaced
    ``center``) starting from rest at the origin; it is expressed in units of
    the thermal deviations of ``params``.
    """
    kind = Kind(kind)
    if duration < 0 or not math.isfinite(duration):
        raise ValueError(f"duration={duration!r} must be >= 0")
    if kind is Kind.FREE and omega:
        warnings.warn("omega is ignored for FREE propagation", stacklevel=2)
        omega = 0.0
    spec = PotentialSpec(kind, omega, center=center, force=const_force)
    if (const_force or center) and params is None:
        raise ValueError("params are required to normalize a drift")
    m = params.m if params is not None else 1.0
    A, b = linear_flow(spec, duration, m)
    if params is not None and (const_force or center):
        if params.calibration_temperature <= 0:
            raise ConfigurationError("normalizing a drift needs T_c > 0")
        z_scale = math.sqrt(params.theta_zz)
    else:
        z_scale = 1.0
    N = normalization_matrix(omega_c_ref, z_scale)
    Ninv = np.diag([z_scale, omega_c_ref * z_scale])
    return PropagatorMatrix.from_array(N @ A @ Ninv, N @ b)


def ou_coefficients(params: SimParams, h: float) -> tuple[float, float]:
    """Decay factor and noise std of the exact velocity OU update over ``h``."""
    g = params.gamma
    q = params.velocity_diffusion()
    decay = math.exp(-g * h)
    if g > 0:
        var = q * -math.expm1(-2 * g * h) / (2 * g)
    else:
        var = q * h
    return decay, math.sqrt(var)


def sde_step(state: PhaseState, spec: PotentialSpec, params: SimParams, noise=0.0,
             h: float | None = None) -> PhaseState:
    """Advance a physical-unit state by one integrator step.

    ``noise`` are standard-normal draws (one per particle) feeding the OU
    sub-step.
    """
    if state.normalized:
        raise ValueError("sde_step works on physical-unit states")
    h = params.dt if h is None else h
    if params.omega_c * h >= 0.1:
        raise ConfigurationError(f"step {h!r} violates the resolution guard")
    z = np.asarray(state.z, float)
    v = np.asarray(state.v, float)
    A, b = linear_flow(spec, 0.5 * h, params.m)
    kick = 0.5 * h * spec.omega**2 * spec.duffing_xi if spec.kind.parabolic else 0.0
    decay, sigma = ou_coefficients(params, h)

    if kick:
        v = v - kick * (z - spec.center) ** 3
    z, v = A[0, 0] * z + A[0, 1] * v + b[0], A[1, 0] * z + A[1, 1] * v + b[1]
    v = decay * v + sigma * np.asarray(noise, float)
    z, v = A[0, 0] * z + A[0, 1] * v + b[0], A[1, 0] * z + A[1, 1] * v + b[1]
    if kick:
        v = v - kick * (z - spec.center) ** 3
    if z.ndim == 0:
        z, v = float(z), float(v)
    return PhaseState(z, v)


@dataclass(frozen=True)
class Stage:
    spec: PotentialSpec
    duration: float


def stage_table(stages: Sequence[Stage], params: SimParams) -> list[dict]:
    """Per-stage constants shared by the integrator."""
    out = []
    for st in stages:
        spec = st.spec
        out.append(dict(
            spec=spec,
            kick=spec.omega**2 * spec.duffing_xi if spec.kind.parabolic else 0.0,
        ))
    return out


@dataclass
class StepPlan:
    """Integrator timeline as run-length encoded segments of identical steps.

    Segment ``j`` applies ``seg_len[j]`` steps with coefficient row
    ``coeffs[seg_row[j]]`` and then records sample ``seg_sample[j]`` (-1 for
    none).  A coefficient row holds the half-step affine flow (a11, a12, a21,
    a22, b1, b2), the cubic kick factor, the potential center and the OU
    decay and noise amplitude of the full step.
    """

    coeffs: np.ndarray       # (n_rows, 10)
    seg_row: np.ndarray      # (n_segments,)
    seg_len: np.ndarray
    seg_sample: np.ndarray
    sample_times: np.ndarray
    n_samples: int
    has_noise: bool = field(default=False)

    @property
    def n_steps(self) -> int:
        return int(self.seg_len.sum())


def plan_steps(stages: Sequence[Stage], params: SimParams, sample_rate: float | None) -> StepPlan:
    """Discretize a contiguous stage sequence starting at t=0.

    Sample times are ``k / sample_rate``; every stage boundary and every
    sample time is hit exactly and the intervals between them are covered by
    equal sub-steps no longer than ``params.dt``.  ``sample_rate=None``
    records only the initial and the final state.
    """
    if not stages:
        raise ScheduleError("empty schedule")
    bounds = [0.0]
    for st in stages:
        if st.duration < 0 or not math.isfinite(st.duration):
            raise ScheduleError(f"stage duration {st.duration!r} must be >= 0")
        bounds.append(bounds[-1] + st.duration)
    total = bounds[-1]
    if sample_rate is None:
        samples = np.array([0.0, total])
    else:
        if sample_rate <= 0:
            raise ConfigurationError("sample_rate must be positive")
        if 1.0 / sample_rate < params.dt * (1 - 1e-9):
            raise ConfigurationError("sample_rate exceeds 1/dt")
        n = int(math.floor(total * sample_rate * (1 + 1e-12) + 1e-9)) + 1
        samples = np.arange(n) / sample_rate
    tol = 1e-12 * max(total, 1e-30)
    events = np.unique(np.concatenate([samples, bounds]))
    events = events[events <= samples[-1] + tol]
    # merge events closer than round-off
    keep = np.concatenate([[True], np.diff(events) > tol])
    events = events[keep]
    if len(events) < 2:
        events = np.array([0.0, 0.0])

    a, b = events[:-1], events[1:]
    stage_starts = np.asarray(bounds[:-1])
    si = np.clip(np.searchsorted(stage_starts, 0.5 * (a + b), side="right") - 1, 0, len(stages) - 1)
    length = b - a
    nsub = np.maximum(1, np.ceil(length / params.dt - 1e-9)).astype(np.int64)
    h = length / nsub
    # steps that differ only by round-off share one coefficient row
    hkey = np.round(h / params.dt, 9)
    keys, seg_row = np.unique(np.column_stack([si, hkey]), axis=0, return_inverse=True)
    seg_row = seg_row.reshape(-1)
    table = stage_table(stages, params)
    rows = np.empty((len(keys), 10))
    for r, (k_si, k_h) in enumerate(keys):
        entry = table[int(k_si)]
        hr = float(h[np.argmax(seg_row == r)])
        A, bb = linear_flow(entry["spec"], 0.5 * hr, params.m)
        decay, sigma = ou_coefficients(params, hr)
        rows[r] = [A[0, 0], A[0, 1], A[1, 0], A[1, 1], bb[0], bb[1], 0.5 * hr * entry["kick"],
                   entry["spec"].center, decay, sigma]
    idx = np.minimum(np.searchsorted(samples, b - tol), len(samples) - 1)
    hit = np.abs(samples[idx] - b) <= tol
    seg_sample = np.where(hit, idx, -1).astype(np.int64)
    if total == 0:
        nsub[:] = 0
        seg_sample[:] = -1
    return StepPlan(rows, seg_row.astype(np.int64), nsub, seg_sample, samples, len(samples),
                    has_noise=bool(np.any(rows[:, 9] > 0)))


def run_plan(plan: StepPlan, z0, v0, noise: np.ndarray | None, record: bool = True):
    """Integrate many particles through a :class:`StepPlan`.

    Returns ``(samples, z_final, v_final)``; ``samples`` has shape
    ``(n_particles, plan.n_samples)`` or is ``None`` when ``record`` is false.
    """
    from ._kernel import integrate

    z0 = np.ascontiguousarray(np.atleast_1d(np.asarray(z0, float)))
    v0 = np.ascontiguousarray(np.atleast_1d(np.asarray(v0, float)))
    n = z0.shape[0]
    n_steps = plan.n_steps
    if noise is None:
        noise = np.zeros((0, 0))
        use_noise = False
    else:
        noise = np.ascontiguousarray(noise, dtype=float)
        if noise.shape != (n, n_steps):
            raise ValueError(f"noise shape {noise.shape} != {(n, n_steps)}")
        use_noise = True
    out = np.empty((n, plan.n_samples if record else 0))
    if record and plan.n_samples > 1 and plan.sample_times[-1] == 0:
        out[:, :] = z0[:, None]
    zf = np.empty(n)
    vf = np.empty(n)
    integrate(plan.coeffs, plan.seg_row, plan.seg_len, plan.seg_sample, z0, v0, noise, use_noise,
              out, record, zf, vf)
    return (out if record else None), zf, vf


def noise_stream(seed: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), 0])


def init_stream(seed: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), 1])


def detector_stream(seed: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), 2])


def derive_seed(master_seed: int, index: int) -> int:
    """64-bit seed of trajectory ``index``; independent of generation order."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(index),))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
