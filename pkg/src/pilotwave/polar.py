"""Polar decomposition ``psi = R exp(iS/hbar)``: density, guidance velocity, quantum potential."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .wavefield import Grid, PhysicalParams, PotentialSpec, Wavefunction, potential_at

RHO_FLOOR_REL = 1e-12


class NodeError(RuntimeError):
    """A particle sits in (or was driven into) a region where |psi|^2 is below the floor."""


@dataclass(frozen=True, eq=False)
class PolarFields:
    density: np.ndarray
    velocity: np.ndarray  # (ndim, *grid.shape); NaN on masked points
    qpot: np.ndarray  # NaN on masked points
    node_mask: np.ndarray


def _wavenumbers(grid: Grid, axis: int) -> np.ndarray:
    g = grid.axes[axis]
    k = g.k.copy()
    k[g.n // 2] = 0.0  # drop the Nyquist mode for odd derivatives
    shape = [1] * grid.ndim
    shape[axis] = g.n
    return k.reshape(shape)


def spectral_gradient(amp: np.ndarray, grid: Grid) -> list[np.ndarray]:
    f = np.fft.fftn(amp)
    return [np.fft.ifftn(1j * _wavenumbers(grid, a) * f) for a in range(grid.ndim)]


def spectral_second(amp: np.ndarray, grid: Grid) -> list[np.ndarray]:
    f = np.fft.fftn(amp)
    out = []
    for a in range(grid.ndim):
        g = grid.axes[a]
        shape = [1] * grid.ndim
        shape[a] = g.n
        out.append(np.fft.ifftn(-(g.k**2).reshape(shape) * f))
    return out


def node_mask(density: np.ndarray) -> np.ndarray:
    return density < RHO_FLOOR_REL * float(np.max(density))


def velocity_field(wf: Wavefunction, p: PhysicalParams) -> tuple[np.ndarray, np.ndarray]:
    """Guidance velocity ``(hbar/m) Im(grad psi / psi)`` per axis, plus the node mask."""
    rho = wf.density()
    mask = node_mask(rho)
    safe = np.where(mask, 1.0, wf.amp)
    vel = np.empty((wf.ndim,) + wf.grid.shape)
    for a, (d, m) in enumerate(zip(spectral_gradient(wf.amp, wf.grid), p.masses(wf.ndim))):
        vel[a] = p.hbar / m * np.imag(d / safe)
    vel[:, mask] = np.nan
    return vel, mask


def polar_decompose(wf: Wavefunction, p: PhysicalParams) -> PolarFields:
    rho = wf.density()
    mask = node_mask(rho)
    safe = np.where(mask, 1.0, wf.amp)
    grads = spectral_gradient(wf.amp, wf.grid)
    seconds = spectral_second(wf.amp, wf.grid)
    masses = p.masses(wf.ndim)
    vel = np.empty((wf.ndim,) + wf.grid.shape)
    q = np.zeros(wf.grid.shape)
    for a in range(wf.ndim):
        r1 = grads[a] / safe
        r2 = seconds[a] / safe
        vel[a] = p.hbar / masses[a] * r1.imag
        # lap(R)/R = Re(lap(psi)/psi) + (grad S / hbar)^2, without differentiating |psi|
        q += -(p.hbar**2) / (2 * masses[a]) * (r2.real + r1.imag**2)
    vel[:, mask] = np.nan
    q[mask] = np.nan
    return PolarFields(rho, vel, q, mask)


def _trig_rows(grid: Grid, pos) -> list[np.ndarray]:
    """Per-axis Fourier evaluation vectors ``exp(i k (x - x_min)) / n``."""
    rows = []
    for g, x in zip(grid.axes, np.atleast_1d(pos)):
        rows.append(np.exp(1j * g.k * (float(x) - g.x_min)) / g.n)
    return rows


def _evaluate(fhat: np.ndarray, rows: list[np.ndarray]) -> complex:
    out = fhat
    for r in reversed(rows):
        out = out @ r
    return complex(out)


def local_energy(wf: Wavefunction, p: PhysicalParams, v: PotentialSpec, pos) -> float:
    """``E = |grad S|^2/2m + Q + V`` at ``pos``, the right-hand side of the Hamilton-Jacobi form.

    psi and its derivatives are evaluated by trigonometric interpolation, so
    ``pos`` need not be a grid point.
    """
    grid = wf.grid
    pos = np.atleast_1d(np.asarray(pos, dtype=float))
    rho_max = float(np.max(wf.density()))
    fhat = np.fft.fftn(wf.amp)
    rows = _trig_rows(grid, pos)
    psi = _evaluate(fhat, rows)
    if abs(psi) ** 2 < RHO_FLOOR_REL * rho_max:
        raise NodeError(f"local energy requested at {pos.tolist()}, inside a node region")
    kinetic = 0.0
    qpot = 0.0
    for a, m in enumerate(p.masses(grid.ndim)):
        k1 = _wavenumbers(grid, a)
        k2 = grid.axes[a].k ** 2
        shape = [1] * grid.ndim
        shape[a] = grid.axes[a].n
        d1 = _evaluate(1j * k1 * fhat, rows)
        d2 = _evaluate(-k2.reshape(shape) * fhat, rows)
        grad_s = p.hbar * (d1 / psi).imag
        kinetic += grad_s**2 / (2 * m)
        qpot += -(p.hbar**2) / (2 * m) * ((d2 / psi).real + (grad_s / p.hbar) ** 2)
    return float(kinetic + qpot + float(potential_at(v, grid, p, pos[0])))
