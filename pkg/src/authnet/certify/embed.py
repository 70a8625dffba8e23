"""2-D embedding (PCA by power iteration) and Gaussian KDE on a grid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp


@dataclass
class Embedding:
    coords: np.ndarray  # [N, dims]
    components: np.ndarray  # [dims, D]
    variances: np.ndarray  # [dims]
    mean: np.ndarray
    degenerate: bool = False


def _top_eigvec(x_c, rng, iters, tol):
    # power iteration on X^T X without forming it
    v = rng.standard_normal(x_c.shape[1])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = x_c.T @ (x_c @ v)
        nrm = np.linalg.norm(w)
        if nrm == 0:
            return v, 0.0
        w /= nrm
        done = abs(nrm - lam) <= tol * max(nrm, 1e-300) and np.abs(w - v).max() < np.sqrt(tol)
        v, lam = w, nrm
        if done:
            break
    return v, lam


def pca_embed(points: np.ndarray, dims: int = 2, seed: int = 0, iters: int = 1000,
              tol: float = 1e-12) -> Embedding:
    """Project mean-centred points onto their top principal directions."""
    x = np.asarray(points, dtype=np.float64).reshape(len(points), -1)
    if len(x) < 3:
        raise ValueError("need at least 3 points")
    mean = x.mean(axis=0)
    x_c = x - mean
    if not np.any(x_c):
        return Embedding(np.zeros((len(x), dims)), np.zeros((dims, x.shape[1])), np.zeros(dims), mean, True)
    rng = np.random.default_rng(seed)
    comps, variances = [], []
    resid = x_c.copy()
    for _ in range(dims):
        v, _ = _top_eigvec(resid, rng, iters, tol)
        # a near-null residual yields noise; keep it orthogonal to earlier components
        for c in comps:
            v = v - (v @ c) * c
        v /= max(np.linalg.norm(v), 1e-300)
        # sign convention: largest-magnitude entry positive
        v = v * np.sign(v[np.argmax(np.abs(v))] or 1.0)
        proj = x_c @ v
        comps.append(v)
        variances.append(float(proj.var()))
        resid = resid - np.outer(resid @ v, v)  # deflation
    comps = np.array(comps)
    return Embedding(x_c @ comps.T, comps, np.array(variances), mean)


@dataclass
class DensityGrid:
    xs: np.ndarray
    ys: np.ndarray
    log_density: np.ndarray  # [len(ys), len(xs)]

    @property
    def density(self) -> np.ndarray:
        return np.exp(self.log_density)

    @property
    def cell_area(self) -> float:
        return float((self.xs[1] - self.xs[0]) * (self.ys[1] - self.ys[0]))

    def integral(self) -> float:
        return float(self.density.sum() * self.cell_area)


def make_grid(coords: np.ndarray, bandwidth: float, size: int = 100, pad: float = 3.0):
    lo = coords.min(axis=0) - pad * bandwidth
    hi = coords.max(axis=0) + pad * bandwidth
    return np.linspace(lo[0], hi[0], size), np.linspace(lo[1], hi[1], size)


def kde_density(coords: np.ndarray, bandwidth: float, grid=None, size: int = 100) -> DensityGrid:
    """Isotropic Gaussian KDE of 2-D points evaluated on a regular grid."""
    coords = np.asarray(coords, dtype=np.float64)
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    if coords.ndim != 2 or len(coords) == 0 or coords.shape[1] != 2:
        raise ValueError("need a non-empty [N, 2] coordinate array")
    xs, ys = grid if grid is not None else make_grid(coords, bandwidth, size)
    # log space so far-away cells still compare correctly instead of underflowing to 0
    lx = -0.5 * ((xs[None, :] - coords[:, :1]) / bandwidth) ** 2  # [N, X]
    ly = -0.5 * ((ys[None, :] - coords[:, 1:]) / bandwidth) ** 2  # [N, Y]
    log_d = np.empty((len(ys), len(xs)))
    for j in range(len(ys)):
        log_d[j] = logsumexp(lx + ly[:, j:j + 1], axis=0)
    log_d -= np.log(len(coords) * 2 * np.pi * bandwidth ** 2)
    return DensityGrid(xs, ys, log_d)


def scott_bandwidth(coords: np.ndarray) -> float:
    n = len(coords)
    sd = float(np.mean(np.std(coords, axis=0)))
    return max(sd, 1e-12) * n ** (-1.0 / 6.0)


@dataclass
class Occupancy:
    refuse_fraction: float  # share of grid cells where refuse density dominates
    per_class: dict
    cells: int
    refuse: DensityGrid
    auth: DensityGrid


def refuse_occupancy(coords: np.ndarray, kinds: np.ndarray, classes: np.ndarray | None = None,
                     bandwidth: float | None = None, size: int = 100) -> Occupancy:
    """Fraction of the embedding grid where refuse samples out-weigh authentication samples.

    Each kind's KDE is normalised on its own, so the comparison is between
    distributions rather than sample counts.  The grid spans all points plus
    three bandwidths of padding.
    """
    coords = np.asarray(coords, dtype=np.float64)
    kinds = np.asarray(kinds)
    is_ref = kinds == "refuse"
    if not is_ref.any() or is_ref.all():
        raise ValueError("need both refuse and authentication samples")
    bw = bandwidth or scott_bandwidth(coords)
    grid = make_grid(coords, bw, size)

    def frac(mask_r, mask_a):
        d_r = kde_density(coords[mask_r], bw, grid)
        d_a = kde_density(coords[mask_a], bw, grid)
        return float(np.mean(d_r.log_density > d_a.log_density)), d_r, d_a

    overall, d_r, d_a = frac(is_ref, ~is_ref)
    per_class = {}
    if classes is not None:
        classes = np.asarray(classes)
        for c in np.unique(classes):
            m_r, m_a = is_ref & (classes == c), ~is_ref & (classes == c)
            if m_r.any() and m_a.any():
                per_class[int(c)] = frac(m_r, m_a)[0]
    return Occupancy(overall, per_class, size * size, d_r, d_a)
