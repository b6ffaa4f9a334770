"""Hidden-variable trajectories under the guidance law, plus chaos diagnostics.

The integrator works on batches of particles. A *levels* object supplies the
velocity field at three time levels of a step (fractions 0, 1/2 and 1 of
``dt``); classical RK4 uses exactly those, and halved substeps use the
quadratic time interpolant through them.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Any, Protocol, Sequence

import numpy as np

from .polar import NodeError, velocity_field
from .propagator import PropagationPlan, SplitStepper
from .wavefield import Grid, PhysicalParams, PotentialSpec, Wavefunction

FLAG_SUBSTEP = 1
FLAG_CLAMP = 2
FLAG_STENCIL = 4

MAX_HALVINGS = 8


@dataclass(frozen=True)
class Particle:
    """Configuration-space point.

    ``fine`` optionally carries an exact (arbitrary precision) normalized
    coordinate along the measured axis; the float ``coords`` are derived
    from it by whoever sets it.
    """

    coords: tuple[float, ...]
    t: float = 0.0
    fine: Any = None

    @property
    def ndim(self) -> int:
        return len(self.coords)

    def moved(self, coords, t: float, fine: Any = None) -> "Particle":
        return Particle(tuple(float(c) for c in coords), float(t), fine)


@dataclass(frozen=True, eq=False)
class TrajectoryRecord:
    times: np.ndarray
    positions: np.ndarray  # (n_records, ndim), unwrapped
    velocities: np.ndarray
    flags: np.ndarray
    density: np.ndarray  # |psi|^2 at the particle

    def __len__(self):
        return len(self.times)


@dataclass(frozen=True)
class LyapunovEstimate:
    lambda_L: float
    window: float
    renorm_count: int
    residual: float


# ---------------------------------------------------------------------------
# interpolation


class FieldSampler:
    """Multilinear interpolation of stacked fields on a periodic grid, skipping masked cells.

    ``fields`` has shape ``(ncomp, *grid.shape)``. If a stencil touches a
    masked point, the nearest fully unmasked stencil is used instead (flagged
    with ``FLAG_STENCIL``); if none of the candidate stencils is clean the
    particle is reported as bad.
    """

    def __init__(self, grid: Grid, fields: np.ndarray, mask: np.ndarray):
        self.grid = grid
        self.fields = np.where(mask[None], 0.0, fields)
        self.mask = mask
        self.n = np.array([g.n for g in grid.axes])
        self.lo = np.array([g.x_min for g in grid.axes])
        self.d = np.array(grid.spacing)
        self.corners = np.array(list(itertools.product((0, 1), repeat=grid.ndim)))
        offsets = np.array(list(itertools.product((-1, 0, 1), repeat=grid.ndim)))
        self._offsets = offsets

    def __call__(self, pos: np.ndarray):
        pos = np.atleast_2d(pos)
        s = (pos - self.lo) / self.d
        base = np.floor(s).astype(np.int64)
        frac = s - base
        vals, clean = self._interp(base, frac)
        flags = np.zeros(len(pos), dtype=np.int64)
        bad = np.zeros(len(pos), dtype=bool)
        for i in np.flatnonzero(~clean):
            flags[i] |= FLAG_STENCIL
            # candidate stencils ordered by distance of their centre from the point
            cands = base[i] + self._offsets
            dist = np.sum((cands + 0.5 - s[i]) ** 2, axis=1)
            for j in np.argsort(dist, kind="stable"):
                f = np.clip(s[i] - cands[j], 0.0, 1.0)
                v, ok = self._interp(cands[j][None], f[None])
                if ok[0]:
                    vals[i] = v[0]
                    break
            else:
                bad[i] = True
        return vals, flags, bad

    def _interp(self, base: np.ndarray, frac: np.ndarray):
        ncomp = self.fields.shape[0]
        out = np.zeros((len(base), ncomp))
        clean = np.ones(len(base), dtype=bool)
        for c in self.corners:
            idx = tuple(((base + c) % self.n).T)
            w = np.prod(np.where(c == 1, frac, 1.0 - frac), axis=1)
            clean &= ~self.mask[idx]
            out += w[:, None] * self.fields[(slice(None),) + idx].T
        return out, clean


class Levels(Protocol):
    ndim: int
    cell: np.ndarray

    def sample(self, pos: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]: ...

    def density(self, pos: np.ndarray, tau: float) -> np.ndarray: ...


def _lagrange(tau: float) -> tuple[float, float, float]:
    return 2 * (tau - 0.5) * (tau - 1), -4 * tau * (tau - 1), 2 * tau * (tau - 0.5)


class GridLevels:
    """Guidance velocity ``(hbar/m) Im(grad psi/psi)`` from three wavefunction snapshots."""

    def __init__(self, wfs: Sequence[Wavefunction], p: PhysicalParams, samplers=None):
        if samplers is None:
            samplers = [self.sampler_for(wf, p) for wf in wfs]
        self.samplers = list(samplers)
        grid = self.samplers[0].grid
        self.ndim = grid.ndim
        self.cell = np.array(grid.spacing)

    @staticmethod
    def sampler_for(wf: Wavefunction, p: PhysicalParams) -> FieldSampler:
        vel, mask = velocity_field(wf, p)
        stacked = np.concatenate([vel, wf.density()[None]], axis=0)
        return FieldSampler(wf.grid, stacked, mask)

    def _at(self, pos, tau):
        nodes = {0.0: 0, 0.5: 1, 1.0: 2}
        if tau in nodes:
            return self.samplers[nodes[tau]](pos)
        vals = 0.0
        flags = np.zeros(len(pos), dtype=np.int64)
        bad = np.zeros(len(pos), dtype=bool)
        for w, s in zip(_lagrange(tau), self.samplers):
            v, f, b = s(pos)
            vals = vals + w * v
            flags |= f
            bad |= b
        return vals, flags, bad

    def sample(self, pos, tau):
        vals, flags, bad = self._at(np.atleast_2d(pos), tau)
        return vals[:, : self.ndim], flags, bad

    def density(self, pos, tau):
        vals, _, _ = self._at(np.atleast_2d(pos), tau)
        return vals[:, self.ndim]


# ---------------------------------------------------------------------------
# RK4 with step rejection


def _rk4(levels: Levels, pos: np.ndarray, tau0: float, h: float, dt: float, clamp: float | None):
    """One RK4 step of length ``h`` (time fraction ``tau0`` .. ``tau0 + h/dt``)."""
    flags = np.zeros(len(pos), dtype=np.int64)
    bad = np.zeros(len(pos), dtype=bool)
    ks = []
    y = pos
    for frac, coef in ((0.0, 0.0), (0.5, 0.5), (0.5, 0.5), (1.0, 1.0)):
        y = pos + coef * h * ks[-1] if ks else pos
        v, f, b = levels.sample(y, tau0 + frac * h / dt)
        if clamp is not None:
            lim = levels.cell / h
            over = np.any(np.abs(v) > lim, axis=1)
            if np.any(over):
                v = np.clip(v, -lim, lim)
                f = f | np.where(over, FLAG_CLAMP, 0)
        flags |= f
        bad |= b
        ks.append(v)
    new = pos + h / 6.0 * (ks[0] + 2 * ks[1] + 2 * ks[2] + ks[3])
    _, f_end, b_end = levels.sample(new, tau0 + h / dt)
    return new, flags | f_end, bad | b_end, ks[0]


def _substep(levels: Levels, pos: np.ndarray, tau0: float, h: float, dt: float, depth: int):
    """Advance one particle over [tau0, tau0 + h/dt] by two halves, recursing on rejection."""
    if depth > MAX_HALVINGS:
        raise NodeError(f"step rejected {MAX_HALVINGS} times near {pos.ravel().tolist()} (node collision)")
    flags = FLAG_SUBSTEP
    cur = pos
    for half in range(2):
        t_start = tau0 + half * 0.5 * h / dt
        new, f, b, _ = _rk4(levels, cur, t_start, 0.5 * h, dt, clamp=0.5 * h)
        if b[0]:
            new, f2 = _substep(levels, cur, t_start, 0.5 * h, dt, depth + 1)
            f = np.array([f2])
        flags |= int(f[0])
        cur = new
    return cur, flags


def rk4_step(levels: Levels, pos: np.ndarray, dt: float, on_error: str = "raise"):
    """Advance a batch by ``dt``. Returns ``(new_pos, flags, start_velocity, failed)``.

    A particle's step is rejected if it would move more than one grid cell
    along any axis or end in (or pass through) a masked region; rejected
    steps are retried as halved substeps with speed clamping.
    """
    pos = np.atleast_2d(np.asarray(pos, dtype=float))
    new, flags, bad, v0 = _rk4(levels, pos, 0.0, dt, dt, clamp=None)
    too_far = np.any(np.abs(new - pos) > levels.cell, axis=1)
    failed = np.zeros(len(pos), dtype=bool)
    for i in np.flatnonzero(bad | too_far):
        try:
            p_i, f_i = _substep(levels, pos[i : i + 1], 0.0, dt, dt, depth=1)
        except NodeError:
            if on_error == "raise":
                raise
            failed[i] = True
            continue
        new[i] = p_i[0]
        flags[i] |= f_i
    return new, flags, v0, failed


# ---------------------------------------------------------------------------
# spec-level operations


def sample_velocity(wf: Wavefunction, p: PhysicalParams, pos) -> np.ndarray:
    """Interpolated guidance velocity at ``pos``; raises NodeError inside a node region."""
    sampler = GridLevels.sampler_for(wf, p)
    vals, _, bad = sampler(np.atleast_2d(np.asarray(pos, dtype=float)))
    if bad[0]:
        raise NodeError(f"velocity requested at {np.ravel(pos).tolist()}, inside a node region")
    return vals[0, : wf.ndim]


def advance_particle(
    particle: Particle,
    wf_t: Wavefunction,
    wf_half: Wavefunction,
    wf_next: Wavefunction,
    dt: float,
    p: PhysicalParams,
) -> Particle:
    levels = GridLevels([wf_t, wf_half, wf_next], p)
    new, _, _, _ = rk4_step(levels, np.array([particle.coords]), dt)
    return particle.moved(new[0], particle.t + dt)


@dataclass
class EnsembleRun:
    """Output of a batch integration: arrays over (record, particle, axis)."""

    times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    flags: np.ndarray
    density: np.ndarray
    failed: np.ndarray
    final_wf: Wavefunction = field(repr=False)

    def record(self, i: int) -> TrajectoryRecord:
        return TrajectoryRecord(
            self.times.copy(),
            self.positions[:, i].copy(),
            self.velocities[:, i].copy(),
            self.flags[:, i].copy(),
            self.density[:, i].copy(),
        )


def integrate_batch(
    wf0: Wavefunction,
    v: PotentialSpec,
    p: PhysicalParams,
    positions: np.ndarray,
    plan: PropagationPlan,
    t0: float = 0.0,
    on_error: str = "raise",
    record_every: int = 1,
) -> EnsembleRun:
    """Co-evolve ``wf0`` (at dt/2 cadence) and a batch of particles for ``plan.n_steps`` steps.

    With ``on_error="record"`` node collisions freeze the offending particle
    and mark it failed instead of raising.
    """
    pos = np.atleast_2d(np.asarray(positions, dtype=float)).copy()
    n_part, ndim = pos.shape
    if ndim != wf0.ndim:
        raise ValueError(f"particles have {ndim} coordinates, wavefunction is {wf0.ndim}D")
    dt = plan.dt
    half = SplitStepper(wf0.grid, v, p, 0.5 * dt)
    n_rec = plan.n_steps // record_every + 1
    times = np.empty(n_rec)
    traj = np.empty((n_rec, n_part, ndim))
    vels = np.zeros((n_rec, n_part, ndim))
    flags = np.zeros((n_rec, n_part), dtype=np.int64)
    dens = np.empty((n_rec, n_part))
    failed = np.zeros(n_part, dtype=bool)

    wf = wf0
    s_now = GridLevels.sampler_for(wf, p)
    vals, _, bad = s_now(pos)
    if np.any(bad):
        raise NodeError("initial particle position inside a node region")
    times[0] = t0
    traj[0] = pos
    vels[0] = vals[:, :ndim]
    dens[0] = vals[:, ndim]
    step_flags = np.zeros(n_part, dtype=np.int64)
    for step in range(1, plan.n_steps + 1):
        wf_half = wf.with_amp(half.apply(wf.amp))
        wf_next = wf.with_amp(half.apply(wf_half.amp))
        s_half = GridLevels.sampler_for(wf_half, p)
        s_next = GridLevels.sampler_for(wf_next, p)
        levels = GridLevels([], p, samplers=[s_now, s_half, s_next])
        live = np.flatnonzero(~failed)
        new, f, _, fail = rk4_step(levels, pos[live], dt, on_error=on_error)
        step_flags[live] |= f
        pos[live[~fail]] = new[~fail]
        failed[live[fail]] = True
        wf, s_now = wf_next, s_next
        if step % record_every == 0:
            r = step // record_every
            vals, _, _ = s_now(pos)
            times[r] = t0 + step * dt
            traj[r] = pos
            vels[r] = vals[:, :ndim]
            dens[r] = vals[:, ndim]
            flags[r] = step_flags
            step_flags = np.zeros(n_part, dtype=np.int64)
    if not np.all(np.isfinite(wf.amp)):
        raise NodeError("non-finite wavefunction during trajectory integration")
    return EnsembleRun(times, traj, vels, flags, dens, failed, wf)


def integrate_trajectory(
    wf0: Wavefunction,
    v: PotentialSpec,
    p: PhysicalParams,
    particle0: Particle,
    plan: PropagationPlan,
) -> TrajectoryRecord:
    run = integrate_batch(wf0, v, p, np.array([particle0.coords]), plan, t0=particle0.t)
    return run.record(0)


# ---------------------------------------------------------------------------
# Lyapunov exponent (Benettin pair method)


class PairSetup(Protocol):
    """A deterministic flow that advances a reference/companion pair by ``dt``."""

    dt: float

    def reset(self, particle0: Particle, delta0: float) -> None: ...

    def step(self) -> None: ...

    def separation(self) -> float: ...

    def renormalize(self, delta0: float) -> None: ...


class WaveFlow:
    """Pair of particles guided by one co-evolving wavefunction (kinetic guidance law)."""

    def __init__(self, wf0: Wavefunction, v: PotentialSpec, p: PhysicalParams, dt: float):
        self.wf0, self.v, self.p, self.dt = wf0, v, p, dt
        self._half = SplitStepper(wf0.grid, v, p, 0.5 * dt)

    def reset(self, particle0: Particle, delta0: float) -> None:
        x0 = np.asarray(particle0.coords, dtype=float)
        direction = np.zeros_like(x0)
        direction[0] = 1.0
        self.pos = np.stack([x0, x0 + delta0 * direction])
        self.wf = self.wf0
        self._s_now = GridLevels.sampler_for(self.wf, self.p)

    def step(self) -> None:
        wf_half = self.wf.with_amp(self._half.apply(self.wf.amp))
        wf_next = self.wf.with_amp(self._half.apply(wf_half.amp))
        s_half = GridLevels.sampler_for(wf_half, self.p)
        s_next = GridLevels.sampler_for(wf_next, self.p)
        levels = GridLevels([], self.p, samplers=[self._s_now, s_half, s_next])
        self.pos, _, _, _ = rk4_step(levels, self.pos, self.dt)
        self.wf, self._s_now = wf_next, s_next

    def separation(self) -> float:
        return float(np.linalg.norm(self.pos[1] - self.pos[0]))

    def renormalize(self, delta0: float) -> None:
        d = self.pos[1] - self.pos[0]
        self.pos[1] = self.pos[0] + d * (delta0 / np.linalg.norm(d))


RENORM_FACTOR = 100.0


def lyapunov_exponent(setup: PairSetup, particle0: Particle, delta0: float, window: float) -> LyapunovEstimate:
    """Maximal Lyapunov exponent from pair divergence.

    The companion is renormalized back to ``delta0`` whenever the separation
    exceeds ``100*delta0``; the exponent is the accumulated log growth over
    ``window``. ``residual`` is the RMS deviation of the cumulative log growth
    from its least-squares line.
    """
    if not window > 0:
        raise ValueError("window must be > 0")
    scale = max(1.0, max(abs(c) for c in particle0.coords))
    if delta0 < 10 * np.finfo(float).eps * scale:
        raise ValueError(f"delta0={delta0} is below 10*eps*|x|; growth would be rounding noise")
    n = max(1, int(round(window / setup.dt)))
    setup.reset(particle0, delta0)
    log_sum = 0.0
    count = 0
    ts = np.empty(n)
    cum = np.empty(n)
    for i in range(n):
        setup.step()
        d = setup.separation()
        if not (math.isfinite(d) and d > 0):
            raise NodeError("pair separation became degenerate")
        if d > RENORM_FACTOR * delta0:
            log_sum += math.log(d / delta0)
            count += 1
            setup.renormalize(delta0)
            d = delta0
        ts[i] = (i + 1) * setup.dt
        cum[i] = log_sum + math.log(d / delta0)
    total = n * setup.dt
    lam = cum[-1] / total
    if n >= 2:
        coef = np.polyfit(ts, cum, 1)
        residual = float(np.sqrt(np.mean((np.polyval(coef, ts) - cum) ** 2)))
    else:
        residual = 0.0
    if count < 20 and lam > 0:
        warnings.warn(f"only {count} renormalizations in the window; estimate is finite-time", stacklevel=2)
    return LyapunovEstimate(float(lam), float(total), count, residual)


# ---------------------------------------------------------------------------
# ergodic moments


@dataclass(frozen=True)
class MomentRow:
    k: int
    time_average: float
    ensemble_average: float | None

    @property
    def difference(self) -> float | None:
        if self.ensemble_average is None:
            return None
        return self.time_average - self.ensemble_average


def ergodic_moments(
    traj: TrajectoryRecord | np.ndarray,
    ks: Sequence[int],
    ensemble_averages: dict[int, float] | None = None,
    axis: int = 0,
) -> list[MomentRow]:
    """Time averages ``<x^k>_t`` along a trajectory, paired with caller-supplied ensemble averages."""
    if isinstance(traj, TrajectoryRecord):
        xs = traj.positions[:, axis]
    else:
        xs = np.asarray(traj, dtype=float)
        if xs.ndim == 2:
            xs = xs[:, axis]
    if xs.size == 0:
        raise ValueError("empty trajectory")
    if not ks:
        raise ValueError("no moment exponents given")
    if xs.size < 100:
        raise ValueError(f"trajectory has {xs.size} points; time averages need >= 100")
    ensemble_averages = ensemble_averages or {}
    rows = []
    for k in ks:
        vals = xs.astype(float) ** k
        # shifted mean: exact for constant sequences
        ref = vals[0]
        avg = float(ref + np.mean(vals - ref))
        rows.append(MomentRow(int(k), avg, ensemble_averages.get(k)))
    return rows
