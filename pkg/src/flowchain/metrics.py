"""ADE/FDE, grid EMD, KDE log density, and the Gaussian-fit baseline."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

_LOG_2PI = math.log(2.0 * math.pi)


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# displacement errors


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise MetricError(f"trajectory shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def ade(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    return float(np.mean(np.linalg.norm(pred - gt, axis=-1)))


def fde(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    return float(np.linalg.norm(pred[-1] - gt[-1]))


def best_of_n(candidates, gt) -> tuple[float, float]:
    """Minimum ADE and minimum FDE over candidates, each minimized on its own."""
    cands = np.asarray(candidates, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if cands.ndim != 3 or len(cands) == 0:
        raise MetricError("need a non-empty (N, T, 2) candidate set")
    if cands.shape[1:] != gt.shape:
        raise MetricError(f"candidate shape {cands.shape[1:]} != ground truth {gt.shape}")
    dist = np.linalg.norm(cands - gt, axis=-1)
    return float(dist.mean(axis=1).min()), float(dist[:, -1].min())


def mean_step_metrics(values) -> float:
    """Mean over steps, then over items.  Accepts (items, steps) or (steps,)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        return float(arr.mean())
    return float(arr.mean(axis=1).mean())


# ---------------------------------------------------------------------------
# grids


@dataclass
class DensityGrid:
    """Cell masses on a regular grid; ``mass[i, j]`` is cell (x index i, y index j)."""

    origin: np.ndarray
    cell: float
    mass: np.ndarray

    @property
    def shape(self):
        return self.mass.shape

    def centers(self) -> np.ndarray:
        nx, ny = self.mass.shape
        xs = self.origin[0] + (np.arange(nx) + 0.5) * self.cell
        ys = self.origin[1] + (np.arange(ny) + 0.5) * self.cell
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([gx, gy], axis=-1)

    def same_geometry(self, other) -> bool:
        return (
            self.mass.shape == other.mass.shape
            and np.allclose(self.origin, other.origin, rtol=0, atol=1e-12)
            and abs(self.cell - other.cell) < 1e-12
        )


@dataclass
class GridSpec:
    origin: np.ndarray
    cell: float
    shape: tuple

    def centers(self) -> np.ndarray:
        return DensityGrid(self.origin, self.cell, np.zeros(self.shape)).centers()


def square_grid(lo, hi, n=32) -> GridSpec:
    """Square cells covering the box [lo, hi] with ``n`` cells on its longer side."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    cell = float(np.max(hi - lo)) / n
    center = 0.5 * (lo + hi)
    origin = center - 0.5 * n * cell
    return GridSpec(origin, cell, (n, n))


def _finish(spec, mass, normalize):
    total = mass.sum()
    if total <= 0:
        raise MetricError("all mass falls outside the grid")
    return DensityGrid(np.array(spec.origin, dtype=np.float64), spec.cell, mass / total if normalize else mass)


def rasterize_points(points, spec: GridSpec, weights=None, normalize=True) -> DensityGrid:
    """Bin (optionally weighted) points into cells."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    w = np.ones(len(pts)) if weights is None else np.asarray(weights, dtype=np.float64)
    idx = np.floor((pts - spec.origin) / spec.cell).astype(np.int64)
    nx, ny = spec.shape
    inside = (idx[:, 0] >= 0) & (idx[:, 0] < nx) & (idx[:, 1] >= 0) & (idx[:, 1] < ny)
    mass = np.zeros(spec.shape)
    np.add.at(mass, (idx[inside, 0], idx[inside, 1]), w[inside])
    if w.sum() > 0 and mass.sum() == 0:
        raise MetricError("all mass falls outside the grid")
    return _finish(spec, mass, normalize)


def rasterize_density(log_density_fn, spec: GridSpec, normalize=True, oversample=1) -> DensityGrid:
    """Cell mass from the density at ``oversample``**2 midpoints per cell.

    With ``oversample=1`` this is density at the cell center times cell area.
    """
    k = int(oversample)
    fine = GridSpec(spec.origin, spec.cell / k, (spec.shape[0] * k, spec.shape[1] * k))
    ld = np.asarray(log_density_fn(fine.centers().reshape(-1, 2))).reshape(fine.shape)
    mass = np.exp(ld) * fine.cell**2
    mass = mass.reshape(spec.shape[0], k, spec.shape[1], k).sum(axis=(1, 3))
    return _finish(spec, mass, normalize)


def gaussian_logpdf_full(points, mean, cov) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    chol = np.linalg.cholesky(cov)
    d = np.linalg.solve(chol, (pts - mean).reshape(-1, 2).T).T
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    out = -0.5 * np.sum(d * d, axis=-1) - 0.5 * logdet - _LOG_2PI
    return out.reshape(pts.shape[:-1])


def _cell_mass_isotropic(spec, mean, std) -> np.ndarray:
    """Exact per-cell mass of N(mean, std^2 I), (nx, ny)."""
    from scipy.stats import norm

    nx, ny = spec.shape
    ex = spec.origin[0] + np.arange(nx + 1) * spec.cell
    ey = spec.origin[1] + np.arange(ny + 1) * spec.cell
    px = np.diff(norm.cdf(ex, mean[0], std))
    py = np.diff(norm.cdf(ey, mean[1], std))
    return np.outer(px, py)


def rasterize_mixture(means, weights, std, spec: GridSpec, normalize=True, min_coverage=0.99) -> DensityGrid:
    """Rasterize an isotropic Gaussian mixture by exact per-cell integration.

    The grid must hold ``min_coverage`` of the mixture mass.
    """
    means = np.asarray(means, dtype=np.float64).reshape(-1, 2)
    weights = np.asarray(weights, dtype=np.float64)
    mass = sum(w * _cell_mass_isotropic(spec, m, std) for m, w in zip(means, weights))
    covered = float(mass.sum())
    if covered <= 0:
        raise MetricError("all mass falls outside the grid")
    if covered < min_coverage:
        raise MetricError(f"grid covers only {covered:.4f} of the mixture mass")
    return _finish(spec, mass, normalize)


def rasterize_gaussian(mean, cov, spec: GridSpec, normalize=True, oversample=4) -> DensityGrid:
    return rasterize_density(lambda p: gaussian_logpdf_full(p, mean, cov), spec, normalize, oversample)


# ---------------------------------------------------------------------------
# EMD


def _ot():
    for key in ("PYTORCH", "JAX", "TENSORFLOW", "CUPY"):
        os.environ.setdefault(f"POT_BACKEND_DISABLE_{key}", "1")
    import ot

    return ot


def _support(grid: DensityGrid, tol: float):
    flat = grid.mass.reshape(-1)
    keep = np.nonzero(flat > tol)[0]
    return keep, flat[keep], grid.centers().reshape(-1, 2)[keep]


def emd(a: DensityGrid, b: DensityGrid, tol: float = 0.0) -> float:
    """Exact 1-Wasserstein distance between two grids with Euclidean ground cost.

    Solved with a network-simplex transportation solver restricted to the
    cells that carry mass.
    """
    if not a.same_geometry(b):
        raise MetricError("grids have different geometry")
    ma, mb = a.mass.sum(), b.mass.sum()
    if abs(ma - mb) > 1e-6:
        raise MetricError(f"total masses differ: {ma} vs {mb}")
    ia, wa, ca = _support(a, tol)
    ib, wb, cb = _support(b, tol)
    if len(ia) == 0 or len(ib) == 0:
        raise MetricError("empty grid")
    wa = wa / wa.sum()
    wb = wb / wb.sum()
    cost = np.sqrt(np.sum((ca[:, None, :] - cb[None, :, :]) ** 2, axis=-1))
    ot = _ot()
    return float(ot.emd2(wa, wb, cost, numItermax=10_000_000))


def emd_linprog(a: DensityGrid, b: DensityGrid) -> float:
    """The same quantity from a dense LP over all cell pairs (reference solver)."""
    from scipy.optimize import linprog

    if not a.same_geometry(b):
        raise MetricError("grids have different geometry")
    pa = a.mass.reshape(-1) / a.mass.sum()
    pb = b.mass.reshape(-1) / b.mass.sum()
    c = a.centers().reshape(-1, 2)
    n = len(c)
    cost = np.sqrt(np.sum((c[:, None] - c[None]) ** 2, axis=-1)).reshape(-1)
    rows = np.zeros((2 * n, n * n))
    for i in range(n):
        rows[i, i * n : (i + 1) * n] = 1.0
        rows[n + i, i::n] = 1.0
    res = linprog(cost, A_eq=rows, b_eq=np.concatenate([pa, pb]), bounds=(0, None), method="highs")
    if not res.success:
        raise MetricError(f"LP failed: {res.message}")
    return float(res.fun)


def emd_grid_spec(sample_sets, mixtures=(), n=32, width=4.0) -> GridSpec:
    """Square grid over the union of ``width``-sigma boxes.

    ``sample_sets`` are (S, 2) arrays summarized by mean and std;
    ``mixtures`` are ``(means, std)`` pairs.
    """
    los, his = [], []
    for pts in sample_sets:
        pts = np.asarray(pts).reshape(-1, 2)
        m, s = pts.mean(axis=0), pts.std(axis=0)
        los.append(m - width * s)
        his.append(m + width * s)
    for means, std in mixtures:
        means = np.asarray(means).reshape(-1, 2)
        los.append(means.min(axis=0) - width * std)
        his.append(means.max(axis=0) + width * std)
    return square_grid(np.min(los, axis=0), np.max(his, axis=0), n)


# ---------------------------------------------------------------------------
# KDE


def scott_bandwidth(samples) -> np.ndarray:
    pts = np.asarray(samples, dtype=np.float64)
    n, d = pts.shape
    if n < 2:
        raise MetricError("KDE needs at least two samples")
    std = pts.std(axis=0, ddof=1)
    if np.any(std <= 0):
        raise MetricError("degenerate sample set (zero variance)")
    return n ** (-1.0 / (d + 4)) * std


def kde_log_density(samples, query, bandwidth=None, chunk=4096) -> np.ndarray | float:
    """Gaussian product-kernel KDE evaluated at ``query`` points."""
    pts = np.asarray(samples, dtype=np.float64)
    h = scott_bandwidth(pts) if bandwidth is None else np.asarray(bandwidth, dtype=np.float64)
    q = np.asarray(query, dtype=np.float64)
    single = q.ndim == 1
    q = q.reshape(-1, 2)
    norm = -np.sum(np.log(h)) - _LOG_2PI - math.log(len(pts))
    out = np.empty(len(q))
    for lo in range(0, len(q), chunk):
        d = (q[lo : lo + chunk, None, :] - pts[None]) / h
        out[lo : lo + chunk] = logsumexp(-0.5 * np.sum(d * d, axis=-1), axis=1) + norm
    return float(out[0]) if single else out


# ---------------------------------------------------------------------------
# baselines


def gaussian_fit(samples):
    pts = np.asarray(samples, dtype=np.float64)
    return pts.mean(axis=0), np.cov(pts, rowvar=False) + 1e-12 * np.eye(2)
