"""Run configuration: INI text with one section per dataclass, validated before any run."""
from __future__ import annotations

import configparser
import hashlib
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .dynamics import ConfigurationError, Kind, ScheduleError, SimParams
from .protocol import MODES, build_schedule


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


_SIM = SimParams()


@dataclass(frozen=True)
class SimSection:
    m: float = _SIM.m
    T: float = _SIM.T
    gamma: float = _SIM.gamma
    omega_c: float = _SIM.omega_c
    omega_i: float = _SIM.omega_i
    duffing_xi: float = _SIM.duffing_xi
    recoil_psd: float = 0.0
    dt: float = _SIM.dt
    T_c: float | None = None
    position_noise: float = 0.0
    noiseless: bool = False  # dynamics without bath coupling; thermal start still at T_c


@dataclass(frozen=True)
class ProtocolSection:
    tau1: float = 0.0
    tau2: float = 1.8e-6
    tau3: float = 0.0
    delta: float = 0.0
    force: float = 0.0
    pre: float = 50e-6
    post: float = 50e-6
    kind: str = "IPP"


@dataclass(frozen=True)
class EnsembleSection:
    n_traj: int = 165000
    master_seed: int = 0
    sample_rate: float = 9.76e6
    T_init: float | None = None
    chunk_size: int = 4096
    input: str | None = None  # directory of LEVA files to analyse instead of simulating


@dataclass(frozen=True)
class PostselectSection:
    mode: str = "gaussian"
    mean_z: float = 0.0
    mean_v: float = 0.0
    theta0: float = 0.1
    count: int | None = None
    radius: float | None = None
    tau1: float = 5e-6  # selection instant before the switch
    seed: int = 0


@dataclass(frozen=True)
class ScanSection:
    tau1_periods: float = 0.75
    tau3_periods: float = 1.25
    n_select: int = 200
    radii: tuple[float, ...] = (0.5, 1.0, 1.5)
    per_unit_radius: int = 32
    upsample: int = 1
    max_radius: float | None = None


@dataclass(frozen=True)
class AmplifySection:
    mode: str = "position"
    tau1: float | None = None
    tau3: float | None = None
    minima: str | None = None  # minima table written by `tune`
    theta0_sweep: tuple[float, ...] = (0.015, 0.03, 0.1, 0.3, 1.0)
    mean_z: float = 0.0
    mean_v: float = 0.0
    shd_radius: float = 1.5
    shd_angles: int = 48


@dataclass(frozen=True)
class OutputSection:
    directory: str = "out"
    trajectory_format: str = "leva"
    write_trajectories: bool = True


SECTIONS = {
    "sim": SimSection, "protocol": ProtocolSection, "ensemble": EnsembleSection,
    "postselect": PostselectSection, "scan": ScanSection, "amplify": AmplifySection,
    "output": OutputSection,
}


@dataclass(frozen=True)
class RunConfig:
    sim: SimSection = field(default_factory=SimSection)
    protocol: ProtocolSection = field(default_factory=ProtocolSection)
    ensemble: EnsembleSection = field(default_factory=EnsembleSection)
    postselect: PostselectSection = field(default_factory=PostselectSection)
    scan: ScanSection = field(default_factory=ScanSection)
    amplify: AmplifySection = field(default_factory=AmplifySection)
    output: OutputSection = field(default_factory=OutputSection)

    # --- text format -------------------------------------------------
    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError("<file>", str(exc).splitlines()[0]) from None
        parts = {}
        for name in cp.sections():
            if name not in SECTIONS:
                raise ConfigError(name, "unknown section")
        for name, klass in SECTIONS.items():
            values = {}
            known = {f.name: f for f in fields(klass)}
            if cp.has_section(name):
                for key, raw in cp.items(name):
                    if key not in known:
                        raise ConfigError(f"{name}.{key}", "unknown field")
                    values[key] = _parse(raw, known[key].type, f"{name}.{key}")
            parts[name] = klass(**values)
        return cls(**parts)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(str(path), f"cannot read: {exc.strerror}") from None
        return cls.from_text(text)

    def to_text(self) -> str:
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            sec = getattr(self, name)
            for f in fields(sec):
                lines.append(f"{f.name} = {_format(getattr(sec, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def with_overrides(self, **sections) -> "RunConfig":
        """``cfg.with_overrides(ensemble={"n_traj": 10})``."""
        out = self
        for name, changes in sections.items():
            out = replace(out, **{name: replace(getattr(out, name), **changes)})
        return out

    # --- derived objects --------------------------------------------------
    def sim_params(self) -> SimParams:
        s = self.sim
        kw = {f.name: getattr(s, f.name) for f in fields(SimParams) if hasattr(s, f.name)}
        try:
            p = SimParams(**kw)
        except ConfigurationError as exc:
            name = str(exc).split("=", 1)[0]
            raise ConfigError(f"sim.{name}", str(exc)) from None
        return p.noiseless() if s.noiseless else p

    def schedule(self, tau1: float | None = None, tau3: float | None = None):
        """Recorded protocol: PP window, Step II, PP window.

        ``tau1``/``tau3`` default to the protocol section; analysis commands
        pass zero and choose t0/t3 inside the windows instead.
        """
        pr = self.protocol
        p = self.sim_params()
        try:
            return build_schedule(pr.tau1 if tau1 is None else tau1, pr.tau2,
                                  pr.tau3 if tau3 is None else tau3, p.omega_c, p.omega_i,
                                  pr.delta, pr.pre, pr.post, kind=pr.kind, force=pr.force,
                                  duffing_xi=p.duffing_xi)
        except ScheduleError as exc:
            name = str(exc).split("=", 1)[0]
            raise ConfigError(f"protocol.{name}", str(exc)) from None
        except ConfigurationError as exc:
            raise ConfigError("protocol.kind", str(exc)) from None

    def validate(self) -> "RunConfig":
        p = self.sim_params()
        pr = self.protocol
        try:
            Kind(pr.kind)
        except ValueError:
            raise ConfigError("protocol.kind", f"unknown potential {pr.kind!r}") from None
        if Kind(pr.kind) in (Kind.PP,):
            raise ConfigError("protocol.kind", "Step II must be IPP, WEAK_PP or FREE")
        for name in ("tau1", "tau2", "tau3", "pre", "post"):
            v = getattr(pr, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"protocol.{name}", f"{v!r} must be finite and >= 0")
        self.schedule()
        e = self.ensemble
        _require(e.n_traj >= 1, "ensemble.n_traj", "must be >= 1")
        _require(0 <= e.master_seed < 2**64, "ensemble.master_seed", "must be a u64")
        _require(e.sample_rate > 0 and math.isfinite(e.sample_rate), "ensemble.sample_rate", "must be > 0")
        _require(e.sample_rate * p.dt <= 1.0, "ensemble.sample_rate",
                 "sampling faster than the integration step sim.dt")
        _require(e.chunk_size >= 1, "ensemble.chunk_size", "must be >= 1")
        _require(e.T_init is None or e.T_init > 0, "ensemble.T_init", "must be > 0")
        ps = self.postselect
        _require(ps.mode in ("gaussian", "zero_cov"), "postselect.mode", "gaussian or zero_cov")
        _require(ps.theta0 > 0, "postselect.theta0", "must be > 0")
        _require(ps.count is None or ps.count >= 1, "postselect.count", "must be >= 1")
        _require(ps.radius is None or ps.radius > 0, "postselect.radius", "must be > 0")
        if ps.mode == "zero_cov":
            _require(ps.count is not None or ps.radius is not None, "postselect.count",
                     "zero_cov needs a count or a radius")
        _require(0 < ps.tau1 and ps.tau1 + 2.0 / e.sample_rate <= pr.pre, "postselect.tau1",
                 "selection instant outside the pre-switch window")
        period = 2 * math.pi / p.omega_c
        sc = self.scan
        _require(sc.tau1_periods > 0 and sc.tau1_periods * period < pr.pre, "scan.tau1_periods",
                 f"grid reaches beyond protocol.pre={pr.pre!r}")
        _require(sc.tau3_periods > 0 and sc.tau3_periods * period < pr.post, "scan.tau3_periods",
                 f"grid reaches beyond protocol.post={pr.post!r}")
        _require(sc.n_select >= 2, "scan.n_select", "must be >= 2")
        _require(len(sc.radii) >= 1 and all(r > 0 for r in sc.radii), "scan.radii", "positive radii")
        _require(sc.per_unit_radius >= 3, "scan.per_unit_radius", "must be >= 3")
        _require(sc.upsample >= 1, "scan.upsample", "must be >= 1")
        a = self.amplify
        _require(a.mode in MODES, "amplify.mode", f"one of {', '.join(MODES)}")
        _require(len(a.theta0_sweep) >= 1 and all(x > 0 for x in a.theta0_sweep),
                 "amplify.theta0_sweep", "positive variances")
        _require(a.tau1 is None or 0 < a.tau1 < pr.pre, "amplify.tau1", "outside the pre-switch window")
        _require(a.tau3 is None or 0 <= a.tau3 < pr.post, "amplify.tau3", "outside the post-switch window")
        _require(a.shd_radius > 0, "amplify.shd_radius", "must be > 0")
        _require(a.shd_angles >= 16, "amplify.shd_angles", "must be >= 16")
        _require(self.output.trajectory_format in ("leva", "csv"), "output.trajectory_format",
                 "leva or csv")
        return self


def _require(ok: bool, path: str, message: str) -> None:
    if not ok:
        raise ConfigError(path, message)


def _parse(raw: str, typ: str, path: str):
    raw = raw.strip()
    optional = "None" in typ
    if optional and raw.lower() in ("", "none"):
        return None
    base = typ.replace(" | None", "")
    try:
        if base == "float":
            return float(raw)
        if base == "int":
            return int(raw)
        if base == "bool":
            low = raw.lower()
            if low not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(raw)
            return low in ("true", "yes", "1")
        if base.startswith("tuple"):
            return tuple(float(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(path, f"cannot parse {raw!r} as {base}") from None


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(repr(float(x)) for x in value)
    return str(value)


def default_config() -> RunConfig:
    """Shipped example: the reference operating point (tau2 = 1.8 us, 165000 runs)."""
    return RunConfig()
