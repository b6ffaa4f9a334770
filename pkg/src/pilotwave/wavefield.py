"""Grids, physical parameters and wavefunctions on uniform periodic grids."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np


class GridError(ValueError):
    pass


class StateError(ValueError):
    pass


@dataclass(frozen=True)
class PhysicalParams:
    hbar: float = 1.0
    m_x: float = 1.0
    m_y: float = 1.0

    def __post_init__(self):
        for name in ("hbar", "m_x", "m_y"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be finite and > 0, got {value}")

    def masses(self, ndim: int) -> tuple[float, ...]:
        return (self.m_x, self.m_y)[:ndim]


def _is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class Grid1D:
    """Uniform periodic grid with points ``x_min + i*dx`` for ``i in [0, n)``."""

    x_min: float
    x_max: float
    n: int

    def __post_init__(self):
        if not (math.isfinite(self.x_min) and math.isfinite(self.x_max)):
            raise GridError("grid bounds must be finite")
        if not self.x_max > self.x_min:
            raise GridError(f"degenerate interval [{self.x_min}, {self.x_max})")
        if not isinstance(self.n, (int, np.integer)) or not _is_power_of_two(int(self.n)):
            raise GridError(f"n must be a power of two, got {self.n}")
        if self.n < 16:
            raise GridError(f"n must be >= 16, got {self.n}")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.n

    @property
    def length(self) -> float:
        return self.x_max - self.x_min

    @property
    def points(self) -> np.ndarray:
        return self.x_min + np.arange(self.n) * self.dx

    @property
    def k(self) -> np.ndarray:
        """Angular wavenumbers in FFT order."""
        return 2.0 * np.pi * np.fft.fftfreq(self.n, d=self.dx)

    # uniform access for 1D/2D code paths
    @property
    def axes(self) -> tuple["Grid1D", ...]:
        return (self,)

    @property
    def ndim(self) -> int:
        return 1

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,)

    @property
    def spacing(self) -> tuple[float, ...]:
        return (self.dx,)

    @property
    def dV(self) -> float:
        return self.dx

    def edge_index(self, x: float, tol: float = 1e-9) -> int:
        """Index ``i`` with ``x == x_min + i*dx``; raises if ``x`` is off-grid."""
        s = (x - self.x_min) / self.dx
        i = int(round(s))
        if abs(s - i) > tol or i < 0 or i > self.n:
            raise GridError(f"{x} is not a grid point of [{self.x_min}, {self.x_max}) with dx={self.dx}")
        return i


@dataclass(frozen=True)
class Grid2D:
    """Product grid: system axis ``gx`` (first array axis), detector axis ``gy``."""

    gx: Grid1D
    gy: Grid1D

    @property
    def axes(self) -> tuple[Grid1D, ...]:
        return (self.gx, self.gy)

    @property
    def ndim(self) -> int:
        return 2

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.gx.n, self.gy.n)

    @property
    def spacing(self) -> tuple[float, ...]:
        return (self.gx.dx, self.gy.dx)

    @property
    def dV(self) -> float:
        return self.gx.dx * self.gy.dx


Grid = Union[Grid1D, Grid2D]


def make_grid(x_min: float, x_max: float, n: int) -> Grid1D:
    return Grid1D(float(x_min), float(x_max), int(n))


@dataclass(frozen=True, eq=False)
class Wavefunction:
    grid: Grid
    amp: np.ndarray = field(repr=False)

    def __post_init__(self):
        amp = np.array(self.amp, dtype=np.complex128)
        if amp.shape != self.grid.shape:
            raise StateError(f"amplitude shape {amp.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(amp)):
            raise StateError("wavefunction has non-finite values")
        amp.flags.writeable = False
        object.__setattr__(self, "amp", amp)

    @property
    def ndim(self) -> int:
        return self.grid.ndim

    def density(self) -> np.ndarray:
        return np.abs(self.amp) ** 2

    def norm(self) -> float:
        """Rectangle-rule L2 norm squared, the invariant of the spectral propagator."""
        return float(np.sum(self.density()) * self.grid.dV)

    def with_amp(self, amp: np.ndarray) -> "Wavefunction":
        return Wavefunction(self.grid, amp)


def normalize(wf: Wavefunction) -> Wavefunction:
    nrm = wf.norm()
    if nrm <= 0.0:
        raise StateError("cannot normalize a zero wavefunction")
    # already normalized to rounding: return as is so normalize is idempotent
    if abs(nrm - 1.0) < 1e-14:
        return wf
    return wf.with_amp(wf.amp / math.sqrt(nrm))


def inner_product(a: Wavefunction, b: Wavefunction) -> complex:
    if a.grid != b.grid:
        raise GridError("inner product of wavefunctions on different grids")
    return complex(np.vdot(a.amp, b.amp) * a.grid.dV)


def product_state(wf_x: Wavefunction, wf_y: Wavefunction) -> Wavefunction:
    if wf_x.ndim != 1 or wf_y.ndim != 1:
        raise StateError("product_state needs two 1D wavefunctions")
    return Wavefunction(Grid2D(wf_x.grid, wf_y.grid), np.outer(wf_x.amp, wf_y.amp))


def marginal_density(wf: Wavefunction, axis: int) -> np.ndarray:
    """Density of the coordinate ``axis`` after integrating out the other one."""
    if wf.ndim != 2:
        raise StateError("marginal_density needs a 2D wavefunction")
    other = 1 - axis
    return np.sum(wf.density(), axis=other) * wf.grid.spacing[other]


# ---------------------------------------------------------------------------
# eigenbases


@dataclass(frozen=True)
class HarmonicBasis:
    """Eigenfunctions of ``m*omega**2*(x - center)**2/2`` on the system axis."""

    omega: float
    center: float = 0.0

    def __post_init__(self):
        if not self.omega > 0:
            raise ValueError("harmonic omega must be > 0")

    def eigenstates(self, grid: Grid1D, n_max: int, params: PhysicalParams) -> np.ndarray:
        """Rows 0..n_max of normalized Hermite functions sampled on ``grid``."""
        alpha = params.m_x * self.omega / params.hbar
        s = math.sqrt(alpha) * (grid.points - self.center)
        out = np.empty((n_max + 1, grid.n))
        out[0] = (alpha / math.pi) ** 0.25 * np.exp(-0.5 * s * s)
        if n_max >= 1:
            out[1] = math.sqrt(2.0) * s * out[0]
        for n in range(1, n_max):
            out[n + 1] = math.sqrt(2.0 / (n + 1)) * s * out[n] - math.sqrt(n / (n + 1)) * out[n - 1]
        return out

    def energy(self, n: int, params: PhysicalParams) -> float:
        return params.hbar * self.omega * (n + 0.5)


Basis = HarmonicBasis


# ---------------------------------------------------------------------------
# state specifications


@dataclass(frozen=True)
class GaussianState:
    """Gaussian packet; ``sigma`` is the standard deviation of ``|psi|**2``."""

    center: float
    sigma: float
    k0: float = 0.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise StateError("gaussian sigma must be > 0")


@dataclass(frozen=True)
class PiecewiseDensity:
    """Constant ``|psi|**2`` on each half-open interval, zero elsewhere.

    ``weights`` are the probability masses of the intervals (normalized on
    construction of the state). The phase is zero unless ``phase`` gives one
    value (radians) per grid point.
    """

    intervals: tuple[tuple[float, float], ...]
    weights: tuple[float, ...]
    phase: tuple[float, ...] | None = None

    def __post_init__(self):
        if len(self.intervals) != len(self.weights) or not self.intervals:
            raise StateError("piecewise_density needs one weight per interval")
        if any(w < 0 for w in self.weights) or not sum(self.weights) > 0:
            raise StateError("piecewise weights must be >= 0 with positive sum")
        for a, b in self.intervals:
            if not b > a:
                raise StateError(f"empty interval [{a}, {b})")
        ordered = sorted(self.intervals)
        for (a0, b0), (a1, _) in zip(ordered, ordered[1:]):
            if a1 < b0:
                raise StateError("piecewise intervals overlap")


@dataclass(frozen=True)
class Superposition:
    coeffs: tuple[complex, ...]
    states: tuple[int, ...]
    basis: Basis

    def __post_init__(self):
        if len(self.coeffs) != len(self.states) or not self.coeffs:
            raise StateError("superposition needs one coefficient per eigenstate")
        if len(set(self.states)) != len(self.states):
            raise StateError("superposition lists an eigenstate twice")
        total = sum(abs(c) ** 2 for c in self.coeffs)
        if abs(total - 1.0) > 1e-10:
            raise StateError(f"sum |c_n|^2 = {total!r}, expected 1")


StateSpec = Union[GaussianState, PiecewiseDensity, Superposition]


def init_state(grid: Grid1D, spec: StateSpec, params: PhysicalParams | None = None) -> Wavefunction:
    params = params or PhysicalParams()
    x = grid.points
    if isinstance(spec, GaussianState):
        if spec.sigma < 4 * grid.dx:
            raise StateError(f"gaussian sigma={spec.sigma} under-resolved (needs >= 4*dx = {4 * grid.dx})")
        amp = np.exp(-((x - spec.center) ** 2) / (4 * spec.sigma**2) + 1j * spec.k0 * x)
    elif isinstance(spec, PiecewiseDensity):
        amp = np.zeros(grid.n, dtype=np.complex128)
        total = float(sum(spec.weights))
        for (a, b), w in zip(spec.intervals, spec.weights):
            ia, ib = grid.edge_index(a), grid.edge_index(b)
            amp[ia:ib] = math.sqrt(w / total / (b - a))
        if spec.phase is not None:
            phase = np.asarray(spec.phase, dtype=float)
            if phase.shape != (grid.n,) or not np.all(np.isfinite(phase)):
                raise StateError("phase table must hold one finite value per grid point")
            amp = amp * np.exp(1j * phase)
    elif isinstance(spec, Superposition):
        basis = spec.basis.eigenstates(grid, max(spec.states), params)
        amp = np.zeros(grid.n, dtype=np.complex128)
        for c, n in zip(spec.coeffs, spec.states):
            amp += c * basis[n]
    else:
        raise TypeError(f"unknown state spec {spec!r}")
    return normalize(Wavefunction(grid, amp))


def interval_masses(wf: Wavefunction, edges: Sequence[float]) -> np.ndarray:
    """Probability mass of a 1D state in the cells between consecutive ``edges``."""
    grid = wf.grid
    rho = wf.density() * grid.dx
    idx = [grid.edge_index(e) for e in edges]
    return np.array([rho[i:j].sum() for i, j in zip(idx, idx[1:])])


# ---------------------------------------------------------------------------
# potentials


@dataclass(frozen=True)
class FreePotential:
    def values(self, grid: Grid1D, params: PhysicalParams) -> np.ndarray:
        return np.zeros(grid.n)

    def at(self, x, params: PhysicalParams):
        return np.zeros_like(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class HarmonicPotential:
    omega: float
    center: float = 0.0

    def __post_init__(self):
        if not self.omega > 0:
            raise ValueError("harmonic omega must be > 0")

    def at(self, x, params: PhysicalParams):
        x = np.asarray(x, dtype=float)
        return 0.5 * params.m_x * self.omega**2 * (x - self.center) ** 2

    def values(self, grid: Grid1D, params: PhysicalParams) -> np.ndarray:
        return self.at(grid.points, params)


@dataclass(frozen=True)
class SquareWell:
    depth: float
    width: float
    center: float = 0.0

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError("square well width must be > 0")

    def at(self, x, params: PhysicalParams):
        x = np.asarray(x, dtype=float)
        return np.where(np.abs(x - self.center) < 0.5 * self.width, -self.depth, 0.0)

    def values(self, grid: Grid1D, params: PhysicalParams) -> np.ndarray:
        return self.at(grid.points, params)


@dataclass(frozen=True, eq=False)
class TabulatedPotential:
    table: tuple[float, ...]

    def __post_init__(self):
        if not np.all(np.isfinite(np.asarray(self.table, dtype=float))):
            raise ValueError("tabulated potential has non-finite values")

    def values(self, grid: Grid1D, params: PhysicalParams) -> np.ndarray:
        v = np.asarray(self.table, dtype=float)
        if v.shape != (grid.n,):
            raise ValueError(f"tabulated potential has {v.size} values, grid has {grid.n}")
        return v

    def at_grid(self, grid: Grid1D, x):
        v = np.asarray(self.table, dtype=float)
        xs = np.append(grid.points, grid.x_max)
        return np.interp(np.mod(np.asarray(x) - grid.x_min, grid.length) + grid.x_min, xs, np.append(v, v[0]))


PotentialSpec = Union[FreePotential, HarmonicPotential, SquareWell, TabulatedPotential]


def potential_at(v: PotentialSpec, grid: Grid, params: PhysicalParams, x) -> np.ndarray:
    """Potential at arbitrary system coordinates ``x``."""
    gx = grid.axes[0]
    if isinstance(v, TabulatedPotential):
        return v.at_grid(gx, x)
    return v.at(x, params)


def potential_on_grid(v: PotentialSpec, grid: Grid, params: PhysicalParams) -> np.ndarray:
    """Potential sampled on ``grid``; acts on the system axis only in 2D."""
    vx = v.values(grid.axes[0], params)
    if grid.ndim == 2:
        return np.broadcast_to(vx[:, None], grid.shape)
    return vx
