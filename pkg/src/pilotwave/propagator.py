"""Unitary time evolution.

Two generators are supported: the Schrodinger Hamiltonian ``p**2/2m + V(x)``,
integrated with Strang splitting in the spectral representation, and the
measurement coupling ``lam * A_x * p_y``, which is integrated exactly in the
mixed (x, k_y) representation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .wavefield import (
    Grid,
    Grid1D,
    PhysicalParams,
    PotentialSpec,
    Wavefunction,
    potential_on_grid,
)


class PropagationError(RuntimeError):
    """Non-finite amplitudes or a step outside the stable range."""


class CouplingError(ValueError):
    pass


def max_stable_dt(grid: Grid, params: PhysicalParams) -> float:
    """Largest admissible step, ``m*dx**2/(hbar*pi)`` minimized over axes."""
    masses = params.masses(grid.ndim)
    return min(m * d * d / (params.hbar * math.pi) for m, d in zip(masses, grid.spacing))


@dataclass(frozen=True)
class PropagationPlan:
    dt: float
    n_steps: int
    snapshot_every: int = 0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if self.n_steps < 0 or self.snapshot_every < 0:
            raise ValueError("n_steps and snapshot_every must be >= 0")

    @property
    def duration(self) -> float:
        return self.dt * self.n_steps


def make_plan(dt: float, n_steps: int, grid: Grid, params: PhysicalParams, snapshot_every: int = 0) -> PropagationPlan:
    """Build a plan, enforcing the spectral stability bound."""
    bound = max_stable_dt(grid, params)
    if dt > bound * (1 + 1e-12):
        raise ValueError(f"dt={dt} exceeds the stability bound m*dx^2/(hbar*pi) = {bound:.6g}")
    return PropagationPlan(float(dt), int(n_steps), int(snapshot_every))


class SplitStepper:
    """Strang splitting ``exp(-iV dt/2) exp(-iT dt) exp(-iV dt/2)`` with cached phases."""

    def __init__(self, grid: Grid, v: PotentialSpec, params: PhysicalParams, dt: float):
        self.grid = grid
        self.dt = dt
        vals = potential_on_grid(v, grid, params)
        self.half_v = np.exp(-0.5j * dt / params.hbar * vals)
        kin = np.zeros(grid.shape)
        for axis, (g, m) in enumerate(zip(grid.axes, params.masses(grid.ndim))):
            shape = [1] * grid.ndim
            shape[axis] = g.n
            kin = kin + (params.hbar * g.k**2 / (2.0 * m)).reshape(shape)
        self.kinetic = np.exp(-1j * dt * kin)

    def apply(self, amp: np.ndarray) -> np.ndarray:
        out = self.half_v * amp
        out = np.fft.ifftn(self.kinetic * np.fft.fftn(out))
        out *= self.half_v
        return out


def _checked(wf: Wavefunction, amp: np.ndarray) -> Wavefunction:
    if not np.all(np.isfinite(amp)):
        raise PropagationError("non-finite amplitude after split step (unstable step?)")
    return wf.with_amp(amp)


def step_potential_split(wf: Wavefunction, v: PotentialSpec, p: PhysicalParams, dt: float) -> Wavefunction:
    """One Strang step of length ``dt`` (negative ``dt`` runs backwards)."""
    return _checked(wf, SplitStepper(wf.grid, v, p, dt).apply(wf.amp))


@dataclass(frozen=True, eq=False)
class Snapshot:
    t: float
    wf: Wavefunction


def propagate(
    wf: Wavefunction,
    v: PotentialSpec,
    p: PhysicalParams,
    plan: PropagationPlan,
    t0: float = 0.0,
) -> tuple[Wavefunction, list[Snapshot]]:
    """Apply ``plan.n_steps`` split steps; snapshots at t0 and every ``snapshot_every`` steps."""
    stepper = SplitStepper(wf.grid, v, p, plan.dt)
    snaps: list[Snapshot] = []
    every = plan.snapshot_every
    if every:
        snaps.append(Snapshot(t0, wf))
    amp = wf.amp
    for i in range(1, plan.n_steps + 1):
        amp = stepper.apply(amp)
        if every and i % every == 0:
            cur = _checked(wf, amp)
            snaps.append(Snapshot(t0 + i * plan.dt, cur))
    return _checked(wf, amp), snaps


# ---------------------------------------------------------------------------
# measurement coupling


@dataclass(frozen=True)
class Staircase:
    """``a(x) = values[i]`` on ``[edges[i], edges[i+1])``; clamped outside."""

    edges: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.edges) != len(self.values) + 1:
            raise CouplingError("staircase needs len(edges) == len(values) + 1")
        if any(b <= a for a, b in zip(self.edges, self.edges[1:])):
            raise CouplingError("staircase edges must be strictly increasing")

    def bin_of(self, x) -> np.ndarray:
        idx = np.searchsorted(np.asarray(self.edges), x, side="right") - 1
        return np.clip(idx, 0, len(self.values) - 1)

    def __call__(self, x) -> np.ndarray:
        return np.asarray(self.values)[self.bin_of(x)]


@dataclass(frozen=True)
class LinearMap:
    slope: float = 1.0
    offset: float = 0.0

    def __call__(self, x) -> np.ndarray:
        return self.slope * np.asarray(x, dtype=float) + self.offset


@dataclass(frozen=True, eq=False)
class SpectralMap:
    """Nonlocal observable ``sum_n a_n |psi_n><psi_n|`` on the system axis.

    ``basis`` rows are orthonormal under the grid inner product. Components
    outside their span are treated as eigenvalue zero.
    """

    values: tuple[float, ...]
    basis: np.ndarray = field(repr=False)
    dx: float = 1.0

    def __post_init__(self):
        b = np.array(self.basis, dtype=np.complex128)
        if b.ndim != 2 or b.shape[0] != len(self.values):
            raise CouplingError("spectral map needs one basis row per eigenvalue")
        b.flags.writeable = False
        object.__setattr__(self, "basis", b)

    def coefficients(self, amp: np.ndarray) -> np.ndarray:
        """Projections ``<psi_n|amp>`` along x; shape (n_states, *rest)."""
        return np.tensordot(self.basis.conj(), amp, axes=(1, 0)) * self.dx

    def apply(self, amp: np.ndarray) -> np.ndarray:
        c = self.coefficients(amp)
        return np.tensordot(self.basis.T, np.asarray(self.values)[:, None] * c, axes=(1, 0))


AMap = Union[Staircase, LinearMap, SpectralMap, Callable]


@dataclass(frozen=True)
class CouplingSpec:
    lam: float
    a_of_x: AMap
    duration: float

    def __post_init__(self):
        if self.lam < 0:
            raise CouplingError("coupling strength must be >= 0")
        if not self.duration > 0:
            raise CouplingError("coupling duration must be > 0")

    @property
    def is_local(self) -> bool:
        return not isinstance(self.a_of_x, SpectralMap)

    def eigenvalue_range(self, gx: Grid1D) -> float:
        a = self.a_of_x
        vals = np.asarray(a.values) if isinstance(a, (Staircase, SpectralMap)) else np.asarray(a(gx.points))
        return float(np.max(np.abs(vals)))


class CouplingEvolution:
    """Exact evolution of a 2D state under ``lam * a(x) * p_y`` from time 0.

    The y-transform of the initial state is cached, so ``at(t)`` costs one
    inverse FFT along y.
    """

    def __init__(self, wf0: Wavefunction, coupling: CouplingSpec):
        if wf0.ndim != 2:
            raise CouplingError("measurement coupling acts on 2D wavefunctions")
        self.wf0 = wf0
        self.coupling = coupling
        gx, gy = wf0.grid.axes
        self.ky = gy.k
        a = coupling.a_of_x
        if isinstance(a, SpectralMap):
            coeff = a.coefficients(wf0.amp)
            rest = wf0.amp - np.tensordot(a.basis.T, coeff, axes=(1, 0))
            self._coeff_k = np.fft.fft(coeff, axis=1)
            self._rest = rest
            self._a = np.asarray(a.values, dtype=float)
        else:
            self._a_x = np.asarray(a(gx.points), dtype=float)
            self._amp_k = np.fft.fft(wf0.amp, axis=1)

    def check_range(self, t: float):
        gx, gy = self.wf0.grid.axes
        shift = self.coupling.lam * self.coupling.eigenvalue_range(gx) * abs(t)
        if shift > 0.5 * gy.length:
            raise CouplingError(
                f"translation lam*a_max*t = {shift:.6g} exceeds half the detector domain ({0.5 * gy.length:.6g})"
            )

    def at(self, t: float) -> Wavefunction:
        self.check_range(t)
        lam = self.coupling.lam
        if hasattr(self, "_coeff_k"):
            phase = np.exp(-1j * lam * t * self._a[:, None] * self.ky[None, :])
            coeff_t = np.fft.ifft(self._coeff_k * phase, axis=1)
            basis = self.coupling.a_of_x.basis
            amp = np.tensordot(basis.T, coeff_t, axes=(1, 0)) + self._rest
        else:
            phase = np.exp(-1j * lam * t * self._a_x[:, None] * self.ky[None, :])
            amp = np.fft.ifft(self._amp_k * phase, axis=1)
        return self.wf0.with_amp(amp)


def step_measurement_coupling(wf2d: Wavefunction, c: CouplingSpec, t: float) -> Wavefunction:
    """Evolve ``wf2d`` for time ``t`` under the coupling alone (no V, no kinetic term)."""
    if c.lam == 0.0 or t == 0.0:
        return wf2d
    return CouplingEvolution(wf2d, c).at(t)
