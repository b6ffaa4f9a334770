"""Von Neumann measurement chain.

A system state ``psi(x)`` is coupled to a Gaussian pointer ``phi0(y)`` by
``lam * A_x * p_y``. Each eigen-component (or position bin) of ``psi`` drags
its own copy of the pointer packet to ``y = center + lam * a_n * t``; the
outcome is read off from which packet the particle ends up in.

During the coupling the particle follows the current of the coupling
generator. For a local ``a(x)`` that current is exactly ``(0, lam*a(x))*rho``,
so the system coordinate does not move.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple, Union

import numpy as np

from .cells import CellDistribution
from .polar import RHO_FLOOR_REL, NodeError, node_mask
from .propagator import (
    CouplingEvolution,
    CouplingSpec,
    SpectralMap,
    SplitStepper,
    Staircase,
    max_stable_dt,
)
from .shiftmap import ShiftState, cumulative_cuts
from .trajectory import FieldSampler, GridLevels, Particle, _lagrange, rk4_step
from .wavefield import (
    Grid1D,
    Grid2D,
    GaussianState,
    GridError,
    HarmonicBasis,
    HarmonicPotential,
    PhysicalParams,
    PotentialSpec,
    StateSpec,
    Wavefunction,
    init_state,
    inner_product,
    product_state,
)

DISJOINT_EPS = 1e-3
MIN_SEPARATION_SIGMAS = 6.0
OVERLAP_SEPARATION_SIGMAS = 1.0
RESTRICT_MIN_WEIGHT = 1e-12


class MeasurementError(RuntimeError):
    """Ambiguous outcome, broken position invariance, or an inconsistent restriction."""


class SeparationError(ValueError):
    pass


def gaussian_overlap(separation: float, sigma: float) -> float:
    """Amplitude overlap of two unit Gaussian packets whose densities have std ``sigma``."""
    return math.exp(-(separation**2) / (8.0 * sigma**2))


# ---------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class DetectorSpec:
    """Gaussian pointer on its own axis; ``sigma`` is the std of ``|phi0|**2``."""

    sigma: float
    grid: Grid1D
    center: float = 0.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("detector sigma must be > 0")
        if self.sigma < 4 * self.grid.dx:
            raise GridError(f"detector sigma={self.sigma} needs >= 4*dy = {4 * self.grid.dx}")
        if not self.grid.x_min <= self.center < self.grid.x_max:
            raise GridError("detector center outside the y domain")

    def wavefunction(self) -> Wavefunction:
        return init_state(self.grid, GaussianState(self.center, self.sigma))


@dataclass(frozen=True)
class BinnedPosition:
    """Position measured to accuracy ``diff(edges)``; bin ``n`` reads ``a_n = edges[n]``."""

    edges: tuple[float, ...]

    def __post_init__(self):
        if len(self.edges) < 2 or any(b <= a for a, b in zip(self.edges, self.edges[1:])):
            raise ValueError("bin edges must be strictly increasing (>= 2 edges)")

    @property
    def values(self) -> tuple[float, ...]:
        return tuple(self.edges[:-1])

    @property
    def delta_a(self) -> float:
        return float(np.min(np.diff(self.values))) if len(self.values) > 1 else math.inf

    def check_grid(self, gx: Grid1D) -> None:
        for e in self.edges:
            gx.edge_index(e)

    def amap(self, gx: Grid1D, params: PhysicalParams) -> Staircase:
        self.check_grid(gx)
        return Staircase(tuple(self.edges), self.values)

    def outcome_value(self, n: int):
        return (self.edges[n], self.edges[n + 1])


@dataclass(frozen=True)
class DiscreteObservable:
    """``sum_n a_n |psi_n><psi_n|`` with ``psi_n`` = eigenstate ``states[n]`` of ``basis``."""

    values: tuple[float, ...]
    states: tuple[int, ...]
    basis: HarmonicBasis

    def __post_init__(self):
        if len(self.values) != len(self.states) or not self.values:
            raise ValueError("discrete observable needs one eigenstate id per eigenvalue")
        if len(set(self.values)) != len(self.values):
            raise ValueError("discrete eigenvalues must be pairwise distinct (nondegenerate)")
        if len(set(self.states)) != len(self.states) or min(self.states) < 0:
            raise ValueError("eigenstate ids must be distinct and >= 0")

    @property
    def delta_a(self) -> float:
        v = np.sort(np.asarray(self.values, dtype=float))
        return float(np.min(np.diff(v))) if len(v) > 1 else math.inf

    def amap(self, gx: Grid1D, params: PhysicalParams) -> SpectralMap:
        rows = self.basis.eigenstates(gx, max(self.states), params)[list(self.states)]
        return SpectralMap(tuple(float(a) for a in self.values), rows, gx.dx)

    def outcome_value(self, n: int):
        return float(self.values[n])


ObservableSpec = Union[BinnedPosition, DiscreteObservable]


def coupling_for(obs: ObservableSpec, lam: float, duration: float, gx: Grid1D, params: PhysicalParams) -> CouplingSpec:
    return CouplingSpec(float(lam), obs.amap(gx, params), float(duration))


def separation_sigmas(obs: ObservableSpec, det: DetectorSpec, lam: float, duration: float) -> float:
    return lam * obs.delta_a * duration / det.sigma


def validate_separation(obs: ObservableSpec, det: DetectorSpec, lam: float, duration: float, restricting: bool) -> float:
    """Enforce the separation criterion; returns the closed-form adjacent overlap."""
    s = separation_sigmas(obs, det, lam, duration)
    if math.isinf(s):
        return 0.0
    if s <= OVERLAP_SEPARATION_SIGMAS:
        raise SeparationError(
            f"separation criterion violated: lambda*delta_a*duration = {s:.4g} sigma, "
            "packets cannot separate (needs > 1 sigma)"
        )
    if s < MIN_SEPARATION_SIGMAS:
        raise SeparationError(
            f"separation criterion violated: lambda*delta_a*duration = {s:.4g} sigma < {MIN_SEPARATION_SIGMAS:g} sigma"
        )
    eps = gaussian_overlap(s * det.sigma, det.sigma)
    if eps >= DISJOINT_EPS:
        msg = f"packet overlap exp(-s^2/8) = {eps:.3g} at {s:.4g} sigma is above the disjointness threshold {DISJOINT_EPS:g}"
        if restricting:
            raise SeparationError(f"separation criterion violated for support restriction: {msg}")
        warnings.warn(msg, stacklevel=2)
    return eps


@dataclass(frozen=True)
class OutcomeRecord:
    index: int
    value: object
    particle_at_end: tuple[float, ...]
    epsilon: float
    t_meas: float


@dataclass(frozen=True)
class MeasurementChain:
    observable: ObservableSpec
    detector: DetectorSpec
    lam: float
    duration: float
    reprepare_mode: str = "baker_ideal"
    n_measurements: int = 1

    def __post_init__(self):
        if self.reprepare_mode not in ("baker_ideal", "physical_flow"):
            raise ValueError(f"unknown reprepare mode {self.reprepare_mode!r}")
        if self.n_measurements < 1:
            raise ValueError("n_measurements must be >= 1")
        validate_separation(self.observable, self.detector, self.lam, self.duration, restricting=True)

    def coupling(self, gx: Grid1D, params: PhysicalParams) -> CouplingSpec:
        return coupling_for(self.observable, self.lam, self.duration, gx, params)


# ---------------------------------------------------------------------------
# packets


def packet_amplitudes(wf2d: Wavefunction, obs: ObservableSpec, params: PhysicalParams | None = None) -> np.ndarray:
    """Component of ``wf2d`` tagged by each eigenvalue; shape ``(n_outcomes, nx, ny)``."""
    params = params or PhysicalParams()
    gx = wf2d.grid.axes[0]
    amp = wf2d.amp
    if isinstance(obs, BinnedPosition):
        bins = obs.amap(gx, params).bin_of(gx.points)
        return np.stack([np.where((bins == n)[:, None], amp, 0.0) for n in range(len(obs.values))])
    amap = obs.amap(gx, params)
    coeff = amap.coefficients(amp)
    return amap.basis[:, :, None] * coeff[:, None, :]


def _pointer_profiles(packets: np.ndarray, dx: float, dy: float):
    """sqrt of the x-marginal of each packet, normalized along y, plus the packet weights."""
    dens_y = np.sum(np.abs(packets) ** 2, axis=1) * dx
    weights = dens_y.sum(axis=1) * dy
    prof = np.sqrt(dens_y)
    safe = np.where(weights > 0, weights, 1.0)
    return prof / np.sqrt(safe)[:, None], weights


def check_separation(
    wf2d: Wavefunction, obs: ObservableSpec, det: DetectorSpec, params: PhysicalParams | None = None
) -> float:
    """Largest pointer-amplitude overlap between packets adjacent in eigenvalue."""
    gx, gy = wf2d.grid.axes
    packets = packet_amplitudes(wf2d, obs, params)
    prof, weights = _pointer_profiles(packets, gx.dx, gy.dx)
    live = [n for n in np.argsort(obs.values, kind="stable") if weights[n] > 1e-14 * weights.sum()]
    eps = 0.0
    for a, b in zip(live, live[1:]):
        eps = max(eps, float(np.sum(prof[a] * prof[b]) * gy.dx))
    return min(eps, 1.0)


def discard_packets(wf2d: Wavefunction, keep: int, obs: ObservableSpec, params: PhysicalParams | None = None) -> Wavefunction:
    """2D state with every packet except ``keep`` removed, renormalized."""
    packet = packet_amplitudes(wf2d, obs, params)[keep]
    norm = math.sqrt(float(np.sum(np.abs(packet) ** 2)) * wf2d.grid.dV)
    if norm**2 < RESTRICT_MIN_WEIGHT:
        raise MeasurementError(f"packet {keep} is numerically empty (weight {norm**2:.3g})")
    return wf2d.with_amp(packet / norm)


# ---------------------------------------------------------------------------
# co-evolution during the coupling


def _row_density(dens: np.ndarray, gy: Grid1D, ix: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Density on x-row ``ix`` interpolated linearly (periodically) in y."""
    s = (y - gy.x_min) / gy.dx
    j = np.floor(s).astype(np.int64)
    f = s - j
    j0 = j % gy.n
    j1 = (j + 1) % gy.n
    return (1 - f) * dens[ix, j0] + f * dens[ix, j1]


class LocalCouplingLevels:
    """Levels for ``a(x)``: velocity ``(0, lam*a(x))`` exactly, density from the evolving state."""

    def __init__(self, dyn: "CouplingDynamics", step: int):
        self.dyn = dyn
        self.flat = [d.ravel() for d in dyn.densities[2 * step : 2 * step + 3]]
        self.floor = dyn.floors[2 * step]
        self.ndim = 2
        self.cell = np.array(dyn.grid.spacing)

    def _stencil(self, pos):
        gy = self.dyn.gy
        ix = self.dyn.cell_row(pos[:, 0])
        s = (pos[:, 1] - gy.x_min) / gy.dx
        j = np.floor(s)
        f = s - j
        j = j.astype(np.int64)
        row = ix * gy.n
        return row + j % gy.n, row + (j + 1) % gy.n, f, ix

    def _density(self, st, tau):
        i0, i1, f, _ = st
        if tau == 0.0 or tau == 0.5 or tau == 1.0:
            d = self.flat[int(2 * tau)]
            return (1 - f) * d[i0] + f * d[i1]
        out = 0.0
        for w, d in zip(_lagrange(tau), self.flat):
            out = out + w * ((1 - f) * d[i0] + f * d[i1])
        return out

    def density(self, pos, tau):
        return self._density(self._stencil(np.atleast_2d(pos)), tau)

    def sample(self, pos, tau):
        pos = np.atleast_2d(pos)
        st = self._stencil(pos)
        v = np.zeros(pos.shape)
        v[:, 1] = self.dyn.velocity_y(pos[:, 0], st[3])
        bad = self._density(st, tau) < self.floor
        return v, np.zeros(len(pos), dtype=np.int64), bad


def coupling_current(amp: np.ndarray, amap: SpectralMap, lam: float, grid: Grid2D) -> tuple[np.ndarray, np.ndarray]:
    """Probability current of ``lam * A * p_y`` for a nonlocal ``A``.

    ``j_y = lam*Re(psi* A psi)``; ``j_x`` closes the continuity equation,
    ``d_x j_x = -lam*Re(d_y psi* A psi - psi* d_y A psi)``, integrated from
    the left edge (the source term sums to zero along x).
    """
    gx, gy = grid.axes
    ky = gy.k.copy()
    ky[gy.n // 2] = 0.0
    a_amp = amap.apply(amp)
    d_amp = np.fft.ifft(1j * ky[None, :] * np.fft.fft(amp, axis=1), axis=1)
    d_a_amp = np.fft.ifft(1j * ky[None, :] * np.fft.fft(a_amp, axis=1), axis=1)
    jy = lam * np.real(np.conj(amp) * a_amp)
    r = lam * np.real(np.conj(d_amp) * a_amp - np.conj(amp) * d_a_amp)
    jx = -gx.dx * (np.cumsum(r, axis=0) - 0.5 * r)
    return jx, jy


def _on_grid(e: float, g: Grid1D) -> bool:
    try:
        g.edge_index(e)
    except GridError:
        return False
    return True


class CouplingDynamics:
    """Precomputed co-evolution of (system x pointer) under the coupling alone.

    The wavefunction at every half step is the same for all particles, so a
    chain that repeats one measurement can reuse this object.
    """

    def __init__(
        self,
        wf_x: Wavefunction,
        det: DetectorSpec,
        obs: ObservableSpec,
        coupling: CouplingSpec,
        params: PhysicalParams | None = None,
        n_steps: int | None = None,
    ):
        self.params = params or PhysicalParams()
        self.obs, self.det, self.coupling = obs, det, coupling
        self.gx, self.gy = wf_x.grid, det.grid
        self.grid = Grid2D(self.gx, self.gy)
        self.lam = coupling.lam
        self.a_of_x = coupling.a_of_x
        self.duration = coupling.duration
        wf0 = product_state(wf_x, det.wavefunction())
        evo = CouplingEvolution(wf0, coupling)
        evo.check_range(self.duration)
        if n_steps is None:
            # at most ~0.9 pointer cells per step
            shift = self.lam * coupling.eigenvalue_range(self.gx) * self.duration
            n_steps = max(8, int(math.ceil(shift / (0.9 * self.gy.dx))))
        self.n_steps = int(n_steps)
        self.dt = self.duration / self.n_steps
        times = np.arange(2 * self.n_steps + 1) * (0.5 * self.dt)
        wfs = [evo.at(t) for t in times]
        self.final = wfs[-1]
        self.densities = np.stack([w.density() for w in wfs])
        self.floors = RHO_FLOOR_REL * self.densities.reshape(len(wfs), -1).max(axis=1)
        self.local = coupling.is_local
        self._a_cell = None
        if isinstance(self.a_of_x, Staircase) and all(_on_grid(e, self.gx) for e in self.a_of_x.edges):
            self._a_cell = self.lam * np.asarray(self.a_of_x(self.gx.points), dtype=float)
        if not self.local:
            self.samplers = [self._current_sampler(w) for w in wfs]
        self.epsilon = check_separation(self.final, obs, det, self.params)
        self._packet_dens = np.abs(packet_amplitudes(self.final, obs, self.params)) ** 2

    def _current_sampler(self, wf: Wavefunction) -> FieldSampler:
        rho = wf.density()
        mask = node_mask(rho)
        jx, jy = coupling_current(wf.amp, self.a_of_x, self.lam, self.grid)
        safe = np.where(mask, 1.0, rho)
        fields = np.stack([jx / safe, jy / safe, rho])
        return FieldSampler(self.grid, fields, mask)

    def velocity_y(self, x: np.ndarray, ix: np.ndarray) -> np.ndarray:
        """Pointer velocity ``lam*a(x)``; staircases with grid-aligned edges are constant per cell."""
        if self._a_cell is not None:
            return self._a_cell[ix]
        return self.lam * np.asarray(self.a_of_x(x), dtype=float)

    def cell_row(self, x: np.ndarray) -> np.ndarray:
        """Index of the left-anchored x cell containing ``x`` (periodic)."""
        return np.floor((np.asarray(x) - self.gx.x_min) / self.gx.dx).astype(np.int64) % self.gx.n

    def levels(self, step: int):
        if self.local:
            return LocalCouplingLevels(self, step)
        return GridLevels([], self.params, samplers=self.samplers[2 * step : 2 * step + 3])

    def run(self, positions: np.ndarray, on_error: str = "raise"):
        """Advance (N, 2) start points over the full duration. Returns ``(end, flags, failed)``."""
        pos = np.atleast_2d(np.asarray(positions, dtype=float)).copy()
        lv0 = self.levels(0)
        if np.any(lv0.density(pos, 0.0) < self.floors[0]):
            raise NodeError("measurement start point inside a node region")
        flags = np.zeros(len(pos), dtype=np.int64)
        failed = np.zeros(len(pos), dtype=bool)
        for step in range(self.n_steps):
            live = np.flatnonzero(~failed)
            new, f, _, fail = rk4_step(self.levels(step), pos[live], self.dt, on_error=on_error)
            flags[live] |= f
            pos[live[~fail]] = new[~fail]
            failed[live[fail]] = True
        return pos, flags, failed

    def packet_densities(self, pos: np.ndarray) -> np.ndarray:
        """Density of every packet at each end point; shape (N, n_outcomes)."""
        pos = np.atleast_2d(pos)
        if isinstance(self.obs, BinnedPosition):
            ix = self.cell_row(pos[:, 0])
            out = np.stack([_row_density(d, self.gy, ix, pos[:, 1]) for d in self._packet_dens], axis=1)
            return out
        sampler = FieldSampler(self.grid, self._packet_dens, np.zeros(self.grid.shape, dtype=bool))
        vals, _, _ = sampler(pos)
        return vals

    def classify(self, pos: np.ndarray) -> np.ndarray:
        """Outcome index for each end point (packet support containing it)."""
        dens = self.packet_densities(pos)
        floor = self.floors[-1]
        winner = np.argmax(dens, axis=1)
        best = dens[np.arange(len(dens)), winner]
        if np.any(best <= floor):
            i = int(np.flatnonzero(best <= floor)[0])
            raise MeasurementError(f"end point {pos[i].tolist()} lies outside every packet support")
        if self.epsilon > DISJOINT_EPS and dens.shape[1] > 1:
            runner = np.sort(dens, axis=1)[:, -2]
            amb = runner > DISJOINT_EPS * best
            if np.any(amb):
                i = int(np.flatnonzero(amb)[0])
                raise MeasurementError(
                    f"ambiguous outcome at {pos[i].tolist()}: packets overlap (epsilon={self.epsilon:.3g})"
                )
        return winner

    def outcome(self, n: int, end) -> OutcomeRecord:
        return OutcomeRecord(int(n), self.obs.outcome_value(int(n)), tuple(float(c) for c in end), self.epsilon, self.duration)

    def check_position_invariance(self, start: np.ndarray, end: np.ndarray) -> float:
        """Largest system-coordinate displacement; raises beyond two cells."""
        disp = float(np.max(np.abs(np.atleast_2d(end)[:, 0] - np.atleast_2d(start)[:, 0])))
        if disp >= 2 * self.gx.dx:
            raise MeasurementError(
                f"position measurement moved the system coordinate by {disp:.3g} >= 2*dx (integration failure)"
            )
        return disp


def run_von_neumann(
    wf_x: Wavefunction,
    det: DetectorSpec,
    obs: ObservableSpec,
    coupling: CouplingSpec,
    particle_x: Particle,
    params: PhysicalParams | None = None,
    y0: float | None = None,
    dynamics: CouplingDynamics | None = None,
) -> tuple[Wavefunction, Particle, OutcomeRecord]:
    """One measurement. ``y0`` defaults to the pointer center (fixed policy)."""
    dyn = dynamics or CouplingDynamics(wf_x, det, obs, coupling, params)
    x0 = float(particle_x.coords[0])
    y_start = det.center if y0 is None else float(y0)
    start = np.array([[x0, y_start]])
    end, _, _ = dyn.run(start)
    if isinstance(obs, BinnedPosition):
        dyn.check_position_invariance(start, end)
    n0 = int(dyn.classify(end)[0])
    out = dyn.outcome(n0, end[0])
    particle = particle_x.moved(end[0], particle_x.t + dyn.duration, particle_x.fine)
    return dyn.final, particle, out


# ---------------------------------------------------------------------------
# effective collapse


def restrict_support(
    wf2d: Wavefunction, out: OutcomeRecord, obs: ObservableSpec, params: PhysicalParams | None = None
) -> tuple[Wavefunction, float]:
    """System state left by the winning packet, and the discarded weight."""
    if out.epsilon >= DISJOINT_EPS:
        raise MeasurementError(f"packets not disjoint (epsilon={out.epsilon:.3g} >= {DISJOINT_EPS:g})")
    params = params or PhysicalParams()
    gx, gy = wf2d.grid.axes
    packet = packet_amplitudes(wf2d, obs, params)[out.index]
    total = float(np.sum(wf2d.density()) * wf2d.grid.dV)
    kept = float(np.sum(np.abs(packet) ** 2) * wf2d.grid.dV)
    if kept < RESTRICT_MIN_WEIGHT * total:
        raise MeasurementError(f"winning packet {out.index} carries weight {kept:.3g}; particle in an empty packet")
    if isinstance(obs, DiscreteObservable):
        row = obs.amap(gx, params).basis[out.index]
        chi = row.astype(np.complex128)
    else:
        # contract the pointer axis against the packet's own pointer profile
        ix = int(np.argmax(np.sum(np.abs(packet) ** 2, axis=1)))
        prof = packet[ix] / math.sqrt(float(np.sum(np.abs(packet[ix]) ** 2)) * gy.dx)
        chi = packet @ np.conj(prof) * gy.dx
    chi = chi / math.sqrt(float(np.sum(np.abs(chi) ** 2)) * gx.dx)
    return Wavefunction(gx, chi), 1.0 - kept / total


# ---------------------------------------------------------------------------
# repreparation


@dataclass(frozen=True)
class FlowOptions:
    """Physical repreparation: a harmonic breathing flow (``omega`` chosen from the widths if unset)."""

    omega: float | None = None
    dt: float | None = None
    budget: float | None = None
    l1_tol: float = 0.01


class Reprepared(NamedTuple):
    wf: Wavefunction
    particle: Particle
    fidelity: float


def _target(target, grid: Grid1D, params: PhysicalParams) -> Wavefunction:
    if isinstance(target, Wavefunction):
        return target
    return init_state(grid, target, params)


def _moments(wf: Wavefunction) -> tuple[float, float]:
    rho = wf.density() * wf.grid.dx
    x = wf.grid.points
    mean = float(np.sum(rho * x))
    return mean, math.sqrt(float(np.sum(rho * (x - mean) ** 2)))


def baker_transport(
    wf_restricted: Wavefunction, target_wf: Wavefunction, particle: Particle, width_bits: int = 256
) -> Particle:
    """Measure-preserving map of the restricted density onto the target density.

    When the restricted density is the target's restricted to a cell range,
    the map is the affine stretch ``u -> (u - F_n)/p_n`` of the target's
    normalized coordinate ``u``, carried exactly in ``particle.fine``.
    """
    grid = wf_restricted.grid
    x = float(particle.coords[0])
    tdist = CellDistribution(grid, target_wf.density())
    rho_r = wf_restricted.density()
    support = rho_r > RHO_FLOOR_REL * float(rho_r.max())
    idx = np.flatnonzero(support)
    i0, i1 = int(idx[0]), int(idx[-1]) + 1
    rho_t = target_wf.density()
    contiguous = len(idx) == i1 - i0
    ratio = rho_r[i0:i1] / np.where(rho_t[i0:i1] > 0, rho_t[i0:i1], np.nan)
    proportional = contiguous and np.all(np.isfinite(ratio)) and np.ptp(ratio) <= 1e-9 * np.max(ratio)
    if not proportional:
        rdist = CellDistribution(grid, rho_r)
        u = float(rdist.cdf_at(x))
        return particle.moved((float(tdist.quantile(u)),) + tuple(particle.coords[1:]), particle.t, None)
    cuts = cumulative_cuts(tdist.masses)
    lo, width = cuts[i0], cuts[i1] - cuts[i0]
    u = particle.fine
    if not isinstance(u, ShiftState):
        u = ShiftState.from_float(min(float(tdist.cdf_at(x)), 1.0 - 2.0**-60), width_bits)
    if not lo <= u.value < lo + width:
        raise MeasurementError(f"particle coordinate {float(u)} outside the winning support [{float(lo)}, {float(lo + width)})")
    u_new = u.doubled() if width == Fraction(1, 2) else u.stretch(lo, width)
    x_new = float(tdist.quantile(float(u_new)))
    return particle.moved((x_new,), particle.t, u_new)


def _physical_flow(wf_r: Wavefunction, particle: Particle, target_wf: Wavefunction, params: PhysicalParams, opts: FlowOptions):
    grid = wf_r.grid
    m = params.m_x
    mean_r, sd_r = _moments(wf_r)
    mean_t, sd_t = _moments(target_wf)
    omega = opts.omega or params.hbar / (2 * m * sd_r * sd_t)
    period = 2 * math.pi / omega
    dt = opts.dt or min(max_stable_dt(grid, params), period / 400)
    budget = opts.budget or 0.5 * period
    v: PotentialSpec = HarmonicPotential(omega, mean_t)
    half = SplitStepper(grid, v, params, 0.5 * dt)
    rho_t = target_wf.density()

    def l1(w):
        return float(np.sum(np.abs(w.density() - rho_t)) * grid.dx)

    wf = wf_r
    pos = np.array([[float(particle.coords[0])]])
    s_now = GridLevels.sampler_for(wf, params)
    cur = l1(wf)
    t = 0.0
    while t < budget:
        wf_half = wf.with_amp(half.apply(wf.amp))
        wf_next = wf.with_amp(half.apply(wf_half.amp))
        s_next = GridLevels.sampler_for(wf_next, params)
        levels = GridLevels([], params, samplers=[s_now, GridLevels.sampler_for(wf_half, params), s_next])
        new_pos, _, _, _ = rk4_step(levels, pos, dt)
        nxt = l1(wf_next)
        if cur < opts.l1_tol and nxt > cur:
            break
        wf, pos, s_now, cur = wf_next, new_pos, s_next, nxt
        t += dt
    if cur >= opts.l1_tol:
        raise MeasurementError(f"physical flow reached L1 = {cur:.3g} >= {opts.l1_tol:g} within the time budget {budget:.4g}")
    overlap = inner_product(target_wf, wf)
    fidelity = abs(overlap)
    out = target_wf.with_amp(target_wf.amp * (overlap / fidelity))
    return out, particle.moved((float(pos[0, 0]),), particle.t + t, None), fidelity


def reprepare(
    wf_restricted: Wavefunction,
    particle: Particle,
    mode: str,
    target: StateSpec | Wavefunction,
    params: PhysicalParams | None = None,
    flow: FlowOptions | None = None,
) -> Reprepared:
    params = params or PhysicalParams()
    target_wf = _target(target, wf_restricted.grid, params)
    if mode == "baker_ideal":
        return Reprepared(target_wf, baker_transport(wf_restricted, target_wf, particle), 1.0)
    if mode == "physical_flow":
        wf, p, fid = _physical_flow(wf_restricted, particle, target_wf, params, flow or FlowOptions())
        return Reprepared(wf, p, fid)
    raise ValueError(f"unknown reprepare mode {mode!r}")
