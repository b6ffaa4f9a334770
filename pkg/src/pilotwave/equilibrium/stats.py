"""Distribution comparison and the ``f = P/|psi|^2`` diagnostic."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from ..cells import CellDistribution
from ..polar import RHO_FLOOR_REL
from ..trajectory import EnsembleRun
from ..wavefield import Grid1D, Wavefunction
from .ensemble import Ensemble


class UndersamplingError(ValueError):
    pass


@dataclass(frozen=True)
class DistributionStats:
    total_variation: float
    ks_distance: float
    chi2: float
    chi2_pvalue: float
    n_samples: int
    n_bins: int


def discrete_tv(p, q) -> float:
    return 0.5 * float(np.sum(np.abs(np.asarray(p, dtype=float) - np.asarray(q, dtype=float))))


def compare_distributions(
    samples: Ensemble | np.ndarray, grid: Grid1D, reference: np.ndarray, mode: str = "linear"
) -> DistributionStats:
    """TV, chi-square and KS of 1D samples against a normalized grid density.

    Bins are equiprobable under the reference (at least 5 expected counts
    each); mass falling where the reference vanishes is counted as its own
    region, which drives chi-square to infinity.
    """
    x = samples.positions[:, 0] if isinstance(samples, Ensemble) else np.asarray(samples, dtype=float).ravel()
    n = len(x)
    if n < 10:
        raise ValueError(f"need >= 10 samples, got {n}")
    reference = np.asarray(reference, dtype=float)
    ref = CellDistribution(grid, reference, mode)
    total = float(np.sum(0.5 * (ref.left + ref.right)) * grid.dx)
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"reference density integrates to {total!r}, not 1 within 1e-6")
    u = ref.cdf_at(x)
    i, s = ref._cell(x)
    local = ref.left[i] + s * (ref.right[i] - ref.left[i])
    inside = (local > 0) & (x >= grid.x_min) & (x < grid.x_max)
    n_bins = max(1, min(20, n // 5))
    counts = np.bincount(np.minimum((u[inside] * n_bins).astype(np.int64), n_bins - 1), minlength=n_bins)
    outside = int(np.sum(~inside))
    expected = n / n_bins
    tv = 0.5 * (float(np.sum(np.abs(counts / n - 1.0 / n_bins))) + outside / n)
    if outside:
        chi2, pval = float("inf"), 0.0
    else:
        chi2 = float(np.sum((counts - expected) ** 2) / expected)
        pval = float(stats.chi2.sf(chi2, n_bins - 1)) if n_bins > 1 else 1.0
    ks = float(stats.kstest(x, ref.cdf_at).statistic)
    return DistributionStats(min(tv, 1.0), ks, chi2, pval, n, n_bins + (1 if outside else 0))


@dataclass(frozen=True, eq=False)
class FSummary:
    bin_edges: np.ndarray
    f: np.ndarray  # NaN on bins excluded for low expected counts
    bound: np.ndarray  # 5/sqrt(n * bin mass)
    max_excess: float  # max over bins of |f - f_ref| / bound
    drift: np.ndarray | None = None  # per-trajectory relative drift of f
    max_drift: float | None = None


def f_statistics(
    e: Ensemble,
    wf: Wavefunction,
    run: EnsembleRun | None = None,
    initial_density: np.ndarray | None = None,
    expected_f=None,
    bin_cells: int = 4,
    mode: str = "linear",
) -> FSummary:
    """Histogram estimate of ``f = P/|psi|^2`` on bins of ``bin_cells`` grid cells.

    ``expected_f(x)`` (default 1) sets the comparison for ``max_excess``.
    With ``run`` (members sorted by initial position, 1D) and the initial
    ensemble density, ``f`` is also followed along each trajectory: the
    transported density is ``P0(x0)/J`` with ``J = dx(t)/dx0`` from
    neighbouring trajectories. Bin masses of ``|psi|^2`` use the same
    continuous reconstruction (``mode``) the ensemble was sampled from.
    """
    if len(e) < 1000:
        raise ValueError(f"f statistics need >= 1000 members, got {len(e)}")
    grid = wf.grid
    if wf.ndim != 1:
        raise ValueError("f statistics are implemented for 1D ensembles")
    n = len(e)
    nb = grid.n // bin_cells
    edges = grid.x_min + np.arange(nb + 1) * bin_cells * grid.dx
    rho = wf.density()
    cdf = CellDistribution(grid, rho / (rho.sum() * grid.dx), mode).cdf_at(edges)
    mass = np.diff(cdf)
    counts, _ = np.histogram(e.positions[:, 0], bins=edges)
    width = bin_cells * grid.dx
    p_hat = counts / (n * width)
    rho_bin = mass / width
    usable = (rho_bin > RHO_FLOOR_REL * rho.max()) & (n * mass >= 5)
    if np.any(usable & (counts == 0)):
        raise UndersamplingError("ensemble density estimate is zero where |psi|^2 is resolvable")
    f = np.full(nb, np.nan)
    f[usable] = p_hat[usable] / rho_bin[usable]
    bound = np.full(nb, np.inf)
    bound[usable] = 5.0 / np.sqrt(n * mass[usable])
    centers = 0.5 * (edges[1:] + edges[:-1])
    ref = np.ones(nb) if expected_f is None else np.asarray(expected_f(centers), dtype=float)
    excess = float(np.nanmax(np.abs(f - ref)[usable] / bound[usable])) if np.any(usable) else 0.0
    drift = max_drift = None
    if run is not None:
        drift = trajectory_f_drift(run, initial_density, grid)
        max_drift = float(np.max(drift))
    return FSummary(edges, f, bound, excess, drift, max_drift)


def trajectory_f_drift(run: EnsembleRun, initial_density: np.ndarray, grid: Grid1D) -> np.ndarray:
    """Relative drift ``max_t |f(t)/f(0) - 1|`` of f along interior trajectories of a sorted 1D run."""
    if initial_density is None:
        raise ValueError("per-trajectory f needs the initial ensemble density")
    x = run.positions[:, :, 0]  # (records, members)
    x0 = x[0]
    if np.any(np.diff(x0) <= 0):
        raise ValueError("trajectory members must be sorted by initial position")
    p0 = np.interp(x0, grid.points, initial_density)
    jac = np.gradient(x, x0, axis=1)
    f = p0[None, :] / (jac * run.density)
    f = f[:, 1:-1]
    return np.max(np.abs(f / f[0] - 1.0), axis=0)
