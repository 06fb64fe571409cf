"""Amplifier characterization at a fixed timing: gain, noise-figure sweep, SHD, PDFs."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .dynamics import derive_seed
from .ensemble import Calibration, Ensemble
from .estimation import (AmplifierMetrics, GainEstimate, fit_added_noise, fit_gain, noise_figure,
                         shd, snr_force, to_db)
from .postselect import (CoverageWarning, DensityGrid, PrescribedState, reconstruct_pdf,
                         select_gaussian, select_zero_cov_many)
from .tuning import circle_targets


def amplified_axis(mode: str) -> int:
    """0 for the position modes, 1 for the velocity modes."""
    return 0 if mode.startswith("position") else 1


@dataclass
class SweepPoint:
    theta0: float             # prescribed variance
    n: int                    # survivors
    theta_in: np.ndarray      # measured 2x2 input covariance
    theta_out: np.ndarray     # 2x2 output covariance
    mean_in: np.ndarray
    mean_out: np.ndarray
    nf: float
    clamped: bool = False


@dataclass
class AmplifyResult:
    mode: str
    t0_index: int
    t3_index: int
    gain: GainEstimate
    sweep: list[SweepPoint]
    added_noise: float
    shd_angles: np.ndarray
    shd_finals: np.ndarray
    metrics: AmplifierMetrics
    pdfs: list[tuple[DensityGrid, DensityGrid]] = field(default_factory=list)

    @property
    def axis(self) -> int:
        return amplified_axis(self.mode)

    @property
    def G(self) -> float:
        return float(self.gain.G[self.axis, self.axis])


def check_timing(ensemble: Ensemble, t0_index: int, t3_index: int) -> None:
    if not 1 <= t0_index <= ensemble.switch_index - 2:
        raise ValueError(f"t0 index {t0_index} is not inside the pre-switch window")
    if not ensemble.switch_index < t3_index <= ensemble.n_samples - 2:
        raise ValueError(f"t3 index {t3_index} is not inside the post-switch window")


def zero_cov_gain(ensemble: Ensemble, cal: Calibration, t0_index: int, t3_index: int,
                  targets=None, n_select: int = 200) -> GainEstimate:
    targets = circle_targets() if targets is None else np.asarray(targets, float)
    s0 = ensemble.phase(t0_index, cal)
    s3 = ensemble.phase(t3_index, cal)
    idx = select_zero_cov_many(s0, targets, n_select)
    return fit_gain(s0[idx].mean(axis=1), s3[idx].mean(axis=1))


def nf_sweep(ensemble: Ensemble, cal: Calibration, t0_index: int, t3_index: int, G: float,
             axis: int, theta0s, mean=(0.0, 0.0), seed: int = 0, min_survivors: int = 10,
             keep_states: bool = False):
    """Post-select Gaussian inputs of each variance and measure the output noise."""
    s0 = ensemble.phase(t0_index, cal)
    s3 = ensemble.phase(t3_index, cal)
    density = reconstruct_pdf(s0)
    points, states = [], []
    for i, th in enumerate(theta0s):
        prescribed = PrescribedState.isotropic(mean, th)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            idx = select_gaussian(s0, prescribed, derive_seed(seed, i), density=density)
        clamped = any(issubclass(w.category, CoverageWarning) for w in caught)
        for w in caught:
            if not issubclass(w.category, CoverageWarning):
                warnings.warn_explicit(w.message, w.category, w.filename, w.lineno)
        if idx.size < min_survivors:
            raise ValueError(f"only {idx.size} survivors for theta0={th!r}")
        a, b = s0[idx], s3[idx]
        cin, cout = np.cov(a.T), np.cov(b.T)
        nf = cout[axis, axis] / (G**2 * cin[axis, axis])
        points.append(SweepPoint(float(th), int(idx.size), cin, cout, a.mean(axis=0), b.mean(axis=0),
                                 float(nf), clamped))
        if keep_states:
            states.append((a, b))
    return (points, states) if keep_states else points


def shd_curve(ensemble: Ensemble, cal: Calibration, t0_index: int, t3_index: int,
              radius: float = 1.5, n_angles: int = 48, n_select: int = 200):
    """Final mean states for zero-covariance inputs on a circle of ``radius``."""
    phi = 2 * np.pi * np.arange(n_angles) / n_angles
    targets = radius * np.column_stack([np.cos(phi), np.sin(phi)])
    s0 = ensemble.phase(t0_index, cal)
    s3 = ensemble.phase(t3_index, cal)
    idx = select_zero_cov_many(s0, targets, n_select)
    init = s0[idx].mean(axis=1)
    return np.arctan2(init[:, 1], init[:, 0]), s3[idx].mean(axis=1)


def amplify(ensemble: Ensemble, cal: Calibration, t0_index: int, t3_index: int, mode: str,
            theta0s=(0.015, 0.03, 0.1, 0.3, 1.0), mean=(0.0, 0.0), shd_radius: float = 1.5,
            shd_angles: int = 48, n_select: int = 200, seed: int = 0,
            reference_theta0: float = 1.0, with_pdfs: bool = True) -> AmplifyResult:
    """Full characterization of one operating point of a recorded ensemble."""
    check_timing(ensemble, t0_index, t3_index)
    axis = amplified_axis(mode)
    gain = zero_cov_gain(ensemble, cal, t0_index, t3_index, n_select=n_select)
    G = float(gain.G[axis, axis])
    points, states = nf_sweep(ensemble, cal, t0_index, t3_index, G, axis, theta0s, mean, seed,
                              keep_states=True)
    added = fit_added_noise([p.theta_in[axis, axis] for p in points], [p.nf for p in points], G,
                            weights=[p.n for p in points])
    phi, finals = shd_curve(ensemble, cal, t0_index, t3_index, shd_radius, shd_angles, n_select)
    nf_ref = noise_figure(reference_theta0, G, added)
    metrics = AmplifierMetrics(
        nf=nf_ref,
        nf_db=to_db(nf_ref) if nf_ref > 0 else -math.inf,
        added_noise=added,
        snr_f=snr_force(float(gain.offset[axis]), G, reference_theta0, added),
        shd_z=shd(phi, finals[:, 0]),
        shd_v=shd(phi, finals[:, 1]),
    )
    pdfs = []
    if with_pdfs:
        for a, b in states:
            if len(a) >= 2:
                pdfs.append((reconstruct_pdf(a), reconstruct_pdf(b)))
    return AmplifyResult(mode, t0_index, t3_index, gain, points, added, phi, finals, metrics, pdfs)
