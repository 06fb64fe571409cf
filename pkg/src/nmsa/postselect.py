"""Post-selection of trajectory subsets with prescribed initial statistics."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.interpolate import RegularGridInterpolator
from scipy.spatial import cKDTree

from .ensemble import Calibration, Ensemble


class EmptySelection(LookupError):
    """No trajectory satisfied the selection criterion."""


class DegenerateSamples(ValueError):
    pass


class CoverageWarning(UserWarning):
    """Survivor probabilities had to be clamped: the prescribed state is undersupplied."""


class LowYieldWarning(UserWarning):
    pass


def _states(source, t0_index, cal):
    if isinstance(source, Ensemble):
        if t0_index is None:
            raise ValueError("t0_index is required when selecting from an ensemble")
        if not 1 <= t0_index < source.switch_index:
            raise ValueError("t0_index must lie in the pre-switch window")
        return source.phase(t0_index, cal)
    states = np.asarray(source, float)
    if states.ndim == 1:
        states = states[:, None]
    if states.ndim != 2 or states.shape[1] not in (1, 2):
        raise ValueError("states must have shape (n, 2) or (n,)")
    return states


@dataclass(frozen=True)
class PrescribedState:
    mean: tuple[float, float]
    cov: np.ndarray | None = None
    mode: str = "gaussian"        # or "zero_cov"
    count: int | None = None
    radius: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(x) for x in self.mean))
        if self.mode == "gaussian":
            d = len(self.mean)
            cov = np.atleast_2d(np.asarray(self.cov, float))
            if cov.shape != (d, d) or not np.allclose(cov, cov.T):
                raise ValueError("prescribed covariance must be symmetric and match the mean")
            if np.any(np.linalg.eigvalsh(cov) <= 0):
                raise ValueError("prescribed covariance must be positive definite")
            object.__setattr__(self, "cov", cov)
        elif self.mode == "zero_cov":
            if self.count is None and self.radius is None:
                raise ValueError("zero_cov mode needs a count or a radius")
        else:
            raise ValueError(f"unknown mode {self.mode!r}")

    @classmethod
    def isotropic(cls, mean, theta0: float) -> "PrescribedState":
        mean = tuple(np.atleast_1d(mean))
        return cls(mean, theta0 * np.eye(len(mean)))

    def density(self, points: np.ndarray, peak_normalized: bool = False) -> np.ndarray:
        k = len(self.mean)
        pts = np.asarray(points, float)
        if k == 1 and (pts.ndim == 1 or pts.shape[-1] != 1):
            pts = pts[..., None]
        d = pts - np.asarray(self.mean)
        inv = np.linalg.inv(self.cov)
        q = np.einsum("...i,ij,...j->...", d, inv, d)
        p = np.exp(-0.5 * q)
        if peak_normalized:
            return p
        return p / ((2 * math.pi) ** (k / 2) * math.sqrt(np.linalg.det(self.cov)))


def select_zero_cov(source, target_mean, n: int | None = None, radius: float | None = None,
                    t0_index: int | None = None, cal: Calibration | None = None) -> np.ndarray:
    """Indices of the trajectories closest to ``target_mean`` in normalized phase space.

    Either the ``n`` nearest or all within ``radius`` (both may be given; the
    tighter wins).  Output is ordered by distance, ties by index.
    """
    states = _states(source, t0_index, cal)
    d = np.hypot(states[:, 0] - target_mean[0], states[:, 1] - target_mean[1])
    order = np.lexsort((np.arange(len(d)), d))
    if radius is not None:
        order = order[d[order] <= radius]
    if n is not None:
        if n < 1:
            raise ValueError("n must be >= 1")
        order = order[:n]
    if order.size == 0:
        raise EmptySelection(f"no trajectory within radius {radius!r} of {tuple(target_mean)}")
    return order


def select_zero_cov_many(states: np.ndarray, targets: np.ndarray, n: int,
                         tree: cKDTree | None = None) -> np.ndarray:
    """``(len(targets), n)`` nearest-neighbour index table, ties broken by index."""
    states = np.asarray(states, float)
    targets = np.atleast_2d(np.asarray(targets, float))
    if n > len(states):
        raise EmptySelection(f"cannot select {n} of {len(states)} trajectories")
    tree = cKDTree(states) if tree is None else tree
    extra = min(n + 8, len(states))
    dist, idx = tree.query(targets, k=extra)
    dist = dist.reshape(len(targets), extra)
    idx = idx.reshape(len(targets), extra)
    out = np.empty((len(targets), n), dtype=np.intp)
    for r in range(len(targets)):
        o = np.lexsort((idx[r], dist[r]))
        if extra < len(states) and dist[r, o[n - 1]] == dist[r, o[-1]]:
            out[r] = select_zero_cov(states, targets[r], n=n)
        else:
            out[r] = idx[r, o[:n]]
    return out


@dataclass
class DensityGrid:
    axes: tuple[np.ndarray, ...]
    values: np.ndarray
    bandwidth: np.ndarray

    @property
    def cell(self) -> float:
        return float(np.prod([a[1] - a[0] for a in self.axes]))

    def integral(self) -> float:
        return float(self.values.sum() * self.cell)

    def evaluate(self, points) -> np.ndarray:
        pts = np.asarray(points, float)
        if len(self.axes) == 1:
            out = np.interp(pts.reshape(-1), self.axes[0], self.values, left=0.0, right=0.0)
            return out.reshape(pts.shape[:-1] if pts.ndim >= 2 else pts.shape)
        interp = RegularGridInterpolator(self.axes, self.values, bounds_error=False, fill_value=0.0)
        return interp(pts.reshape(-1, 2)).reshape(pts.shape[:-1])


def silverman_bandwidth(samples: np.ndarray) -> np.ndarray:
    n, d = samples.shape
    return samples.std(axis=0, ddof=1) * (4.0 / ((d + 2) * n)) ** (1.0 / (d + 4))


def reconstruct_pdf(samples, bandwidth=None, max_points: int | None = None) -> DensityGrid:
    """Gaussian-kernel density of 1D or 2D samples on a regular grid.

    The grid spans the samples +/- 4 bandwidths with spacing of a quarter
    bandwidth (capped by ``max_points`` per axis); the density is a binned
    kernel estimate and integrates to one on the grid.  Fewer than 100
    samples fall back to a normalized histogram.
    """
    x = np.asarray(samples, float)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if d not in (1, 2):
        raise ValueError("only 1D and 2D densities are supported")
    if n < 2 or np.any(x.std(axis=0) == 0):
        raise DegenerateSamples("samples have zero spread")
    if max_points is None:
        max_points = 4096 if d == 1 else 400
    if n < 100:
        bins = max(int(math.ceil(math.sqrt(n))), 2)
        H, edges = np.histogramdd(x, bins=bins, density=True)
        axes = tuple(0.5 * (e[1:] + e[:-1]) for e in edges)
        bw = np.array([e[1] - e[0] for e in edges])
        return DensityGrid(axes, H, bw)
    h = silverman_bandwidth(x) if bandwidth is None else np.broadcast_to(np.asarray(bandwidth, float), (d,)).copy()
    axes = []
    sig = []
    for j in range(d):
        lo, hi = x[:, j].min() - 4 * h[j], x[:, j].max() + 4 * h[j]
        npts = int(min(max_points, max(64, math.ceil((hi - lo) / (h[j] / 4)) + 1)))
        ax = np.linspace(lo, hi, npts)
        axes.append(ax)
        sig.append(h[j] / (ax[1] - ax[0]))
    edges = [np.concatenate([[a[0] - (a[1] - a[0]) / 2], 0.5 * (a[1:] + a[:-1]), [a[-1] + (a[1] - a[0]) / 2]])
             for a in axes]
    H, _ = np.histogramdd(x, bins=edges)
    vals = ndimage.gaussian_filter(H, sigma=sig, mode="constant", truncate=6.0)
    cell = float(np.prod([a[1] - a[0] for a in axes]))
    vals = np.clip(vals, 0, None)
    vals /= vals.sum() * cell
    return DensityGrid(tuple(axes), vals, np.asarray(h))


def survivor_probability(states: np.ndarray, prescribed: PrescribedState,
                         density: DensityGrid | None = None, peak_normalized: bool = True):
    """Per-trajectory acceptance probability and the fraction that needed clamping.

    P0n = min(1, P0(z) / P0(z_p)) and Ps = Pp(z) / P0n(z), clamped to [0, 1].
    With ``peak_normalized`` the prescribed Gaussian is scaled to unit height
    so that Ps equals one at the prescribed mean.
    """
    states = _states(states, None, None)
    density = reconstruct_pdf(states) if density is None else density
    p0 = density.evaluate(states)
    p0_mean = float(density.evaluate(np.asarray(prescribed.mean)[None, :])[0])
    if p0_mean <= 1e-3 * float(density.values.max()):
        warnings.warn(f"prescribed mean {prescribed.mean} lies where the ensemble is sparse; "
                      "expect few survivors", LowYieldWarning, stacklevel=3)
    if p0_mean <= 0:
        p0n = np.ones_like(p0)
    else:
        p0n = np.minimum(1.0, p0 / p0_mean)
    pp = prescribed.density(states, peak_normalized)
    with np.errstate(divide="ignore", invalid="ignore"):
        ps = np.where(p0n > 0, pp / p0n, np.inf)
    over = ps > 1
    frac = float(over.mean())
    return np.clip(ps, 0.0, 1.0), frac


def select_gaussian(source, prescribed: PrescribedState, seed: int, t0_index: int | None = None,
                    cal: Calibration | None = None, density: DensityGrid | None = None,
                    peak_normalized: bool = True, min_yield: int = 1) -> np.ndarray:
    """Survivor-function resampling towards a prescribed Gaussian initial state."""
    if prescribed.mode != "gaussian":
        raise ValueError("select_gaussian needs a Gaussian prescription")
    states = _states(source, t0_index, cal)
    ps, frac = survivor_probability(states, prescribed, density, peak_normalized)
    if frac > 0:
        warnings.warn(f"{round(frac * len(states))} of {len(states)} survivor probabilities "
                      "clamped to 1", CoverageWarning, stacklevel=2)
    r = np.random.default_rng(seed).random(len(states))
    idx = np.nonzero(r < ps)[0]
    if idx.size < min_yield:
        warnings.warn(f"only {idx.size} survivors", LowYieldWarning, stacklevel=2)
    return idx
