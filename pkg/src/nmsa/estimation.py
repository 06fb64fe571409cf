"""Gain-matrix fits, covariance propagation and amplifier figures of merit."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np


class RankError(np.linalg.LinAlgError):
    """Initial means do not span the phase plane."""


@dataclass(frozen=True)
class GainEstimate:
    G: np.ndarray            # 2x2
    offset: np.ndarray       # (z_F, v_F)
    residual_rms: np.ndarray  # per output component
    n_points: int
    stderr: np.ndarray | None = None  # standard errors of G entries

    @property
    def off_diagonal(self) -> float:
        return abs(self.G[0, 1]) + abs(self.G[1, 0])

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.G))

    def det_stderr(self) -> float:
        if self.stderr is None:
            return float("nan")
        g, s = self.G, self.stderr
        # first-order propagation for g11 g22 - g12 g21
        return float(math.sqrt((g[1, 1] * s[0, 0]) ** 2 + (g[0, 0] * s[1, 1]) ** 2
                               + (g[1, 0] * s[0, 1]) ** 2 + (g[0, 1] * s[1, 0]) ** 2))


def fit_gain(initial_means, final_means, weights=None) -> GainEstimate:
    """Least-squares affine map final = G @ initial + offset."""
    X = np.asarray(initial_means, float)
    Y = np.asarray(final_means, float)
    if X.ndim != 2 or X.shape[1] != 2 or X.shape != Y.shape:
        raise ValueError("initial and final means must both have shape (k, 2)")
    k = X.shape[0]
    A = np.column_stack([X, np.ones(k)])
    w = np.ones(k) if weights is None else np.sqrt(np.asarray(weights, float))
    Aw = A * w[:, None]
    if k < 3 or np.linalg.matrix_rank(Aw, tol=1e-10 * max(np.abs(Aw).max(), 1.0)) < 3:
        raise RankError("need at least 3 non-collinear initial means")
    coef, *_ = np.linalg.lstsq(Aw, Y * w[:, None], rcond=None)
    resid = Y - A @ coef
    rms = np.sqrt(np.mean(resid**2, axis=0))
    stderr = None
    if k > 3:
        s2 = np.sum((resid * w[:, None]) ** 2, axis=0) / (k - 3)
        cinv = np.linalg.inv(Aw.T @ Aw)
        se = np.sqrt(np.outer(s2, np.diag(cinv)))  # rows: output, cols: regressor
        stderr = se[:, :2]
    return GainEstimate(coef[:2].T.copy(), coef[2].copy(), rms, k, stderr)


def fit_gain_batch(X: np.ndarray, Y: np.ndarray):
    """Vectorized fit for one design ``X`` (k, 2) and many responses ``Y`` (m, k, 2).

    Returns ``(G, offset)`` with shapes (m, 2, 2) and (m, 2).
    """
    k = X.shape[0]
    A = np.column_stack([X, np.ones(k)])
    if np.linalg.matrix_rank(A) < 3:
        raise RankError("need at least 3 non-collinear initial means")
    pinv = np.linalg.pinv(A)               # (3, k)
    coef = np.einsum("ak,mkc->mac", pinv, Y)  # (m, 3, 2)
    G = np.transpose(coef[:, :2, :], (0, 2, 1))
    return G, coef[:, 2, :]


def transform_covariance(G, theta0) -> np.ndarray:
    G = np.asarray(G, float)
    return G @ np.asarray(theta0, float) @ G.T


def noise_figure(theta0_zz: float, G: float, added: float) -> float:
    """NF = 1 + N_a / (G^2 theta0) for a position amplifier."""
    if theta0_zz <= 0:
        raise ValueError("theta0_zz must be positive")
    if G == 0:
        raise ValueError("gain must be non-zero")
    return 1.0 + added / (G**2 * theta0_zz)


def to_db(ratio: float) -> float:
    return 10.0 * math.log10(ratio)


def fit_added_noise(theta0, nf, G: float, weights=None) -> float:
    """Least-squares N_a from (theta0, NF) pairs of an input-noise sweep.

    ``weights`` are typically the post-selected subset sizes.
    """
    theta0 = np.asarray(theta0, float)
    nf = np.asarray(nf, float)
    if np.any(theta0 <= 0):
        raise ValueError("theta0 values must be positive")
    s = 1.0 / (G**2 * theta0)
    w = np.ones_like(s) if weights is None else np.asarray(weights, float)
    return float(np.sum(w * s * (nf - 1.0)) / np.sum(w * s * s))


def snr_force(offset_z: float, G: float, theta0_zz: float, added: float) -> float:
    den = G**2 * theta0_zz + added
    if den <= 0:
        raise ValueError("output noise must be positive")
    return offset_z**2 / den


def harmonic_amplitudes(angles, values, n_harmonics: int | None = None) -> np.ndarray:
    """Least-squares Fourier coefficients ``(a_k, b_k)`` for k = 0..K."""
    phi = np.asarray(angles, float)
    y = np.asarray(values, float)
    K = (len(phi) - 1) // 2 if n_harmonics is None else n_harmonics
    cols = [np.ones_like(phi)]
    for k in range(1, K + 1):
        cols += [np.cos(k * phi), np.sin(k * phi)]
    coef, *_ = np.linalg.lstsq(np.column_stack(cols), y, rcond=None)
    out = np.zeros((K + 1, 2))
    out[0, 0] = coef[0]
    out[1:] = coef[1:].reshape(K, 2)
    return out


def shd(angles, amplified, n_harmonics: int | None = None) -> float:
    """State harmonic distortion: rms of harmonics >= 2 relative to the fundamental."""
    phi = np.asarray(angles, float)
    if len(phi) < 16:
        raise ValueError("SHD needs at least 16 angles")
    ring = np.sort(np.mod(phi, 2 * np.pi))
    gaps = np.diff(np.concatenate([ring, [ring[0] + 2 * np.pi]]))
    if gaps.max() > np.pi / 4:
        raise ValueError("angles must cover a full circle")
    c = harmonic_amplitudes(phi, amplified, n_harmonics)
    fund = c[1, 0] ** 2 + c[1, 1] ** 2
    if fund <= 1e-300 or fund <= 1e-24 * np.sum(c**2):
        raise ValueError("vanishing fundamental: SHD undefined")
    return float(math.sqrt(np.sum(c[2:] ** 2) / fund))


@dataclass
class AmplifierMetrics:
    nf: float
    nf_db: float
    added_noise: float
    snr_f: float
    shd_z: float
    shd_v: float

    def report(self, prefix: str = "") -> str:
        return "".join(f"{prefix}{k}={v!r}\n" for k, v in asdict(self).items())
