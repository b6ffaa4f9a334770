"""Particle ensembles: Born/custom sampling and transport by the guidance flow."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from ..cells import CellDistribution, sample_grid_density_2d
from ..polar import NodeError
from ..propagator import make_plan
from ..trajectory import EnsembleRun, integrate_batch
from ..wavefield import PhysicalParams, PotentialSpec, Wavefunction

ABORT_FRACTION = 1e-3


def rng_for(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator: stream ``stream`` of ``seed``, independent of draw order elsewhere."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(stream),)))


@dataclass(frozen=True, eq=False)
class Ensemble:
    positions: np.ndarray  # (n, ndim)
    provenance: str = "born"
    t: float = 0.0

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if pos.size == 0:
            raise ValueError("ensemble is empty")
        pos.flags.writeable = False
        object.__setattr__(self, "positions", pos)

    def __len__(self):
        return len(self.positions)

    @property
    def ndim(self) -> int:
        return self.positions.shape[1]


def sample_ensemble(
    wf: Wavefunction,
    n: int,
    provenance: str = "born",
    seed: int = 0,
    density: np.ndarray | None = None,
    mode: str = "linear",
    stream: int = 0,
) -> Ensemble:
    """Inverse-CDF sampling from ``|wf|**2`` (born) or from ``density`` on the same grid (custom).

    ``mode`` picks the continuous reconstruction of the grid density; see
    :mod:`pilotwave.cells`.
    """
    if n < 1:
        raise ValueError("ensemble size must be >= 1")
    if provenance == "born":
        rho = wf.density()
    else:
        if density is None:
            raise ValueError("custom provenance needs a density")
        rho = np.asarray(density, dtype=float)
        if rho.shape != wf.grid.shape or np.any(rho < 0) or not np.sum(rho) > 0 or not np.all(np.isfinite(rho)):
            raise ValueError("custom density is not normalizable on the wavefunction grid")
    rng = rng_for(seed, stream)
    if wf.ndim == 1:
        pos = CellDistribution(wf.grid, rho, mode).sample(rng, n)[:, None]
    else:
        gx, gy = wf.grid.axes
        pos = sample_grid_density_2d(gx, gy, rho, rng, n, mode)
    return Ensemble(pos, provenance, 0.0)


@dataclass(frozen=True, eq=False)
class FlowSetup:
    """What an ensemble is transported through: initial state, potential, step."""

    wf0: Wavefunction
    potential: PotentialSpec
    params: PhysicalParams = field(default_factory=PhysicalParams)
    dt: float = 1e-3


def _chunk(args):
    setup, pos, n_steps, t0, record_every = args
    plan = make_plan(setup.dt, n_steps, setup.wf0.grid, setup.params)
    return integrate_batch(setup.wf0, setup.potential, setup.params, pos, plan, t0=t0, on_error="record", record_every=record_every)


def _merge(runs: list[EnsembleRun]) -> EnsembleRun:
    return EnsembleRun(
        runs[0].times,
        np.concatenate([r.positions for r in runs], axis=1),
        np.concatenate([r.velocities for r in runs], axis=1),
        np.concatenate([r.flags for r in runs], axis=1),
        np.concatenate([r.density for r in runs], axis=1),
        np.concatenate([r.failed for r in runs]),
        runs[0].final_wf,
    )


def evolve_ensemble(
    e: Ensemble, setup: FlowSetup, T: float, workers: int = 1, record_every: int | None = None
) -> tuple[Ensemble, EnsembleRun]:
    """Transport every member from ``e.t`` to ``T`` (wavefunction starts as ``setup.wf0`` at ``e.t``).

    Members hitting a node are frozen and flagged failed; more than 0.1%
    failures abort the run.
    """
    n_steps = int(round((T - e.t) / setup.dt))
    if n_steps < 0 or abs(n_steps * setup.dt - (T - e.t)) > 1e-9 * max(1.0, abs(T)):
        raise ValueError(f"T - t = {T - e.t} is not a nonnegative multiple of dt = {setup.dt}")
    every = record_every or max(n_steps, 1)
    chunks = np.array_split(np.arange(len(e)), max(1, min(workers, len(e))))
    jobs = [(setup, e.positions[idx], n_steps, e.t, every) for idx in chunks]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_chunk, jobs))
    else:
        runs = [_chunk(j) for j in jobs]
    run = _merge(runs)
    n_fail = int(run.failed.sum())
    if n_fail > ABORT_FRACTION * len(e):
        raise NodeError(f"{n_fail} of {len(e)} members hit node regions (> {ABORT_FRACTION:.1%})")
    return replace(e, positions=run.positions[-1], t=float(T)), run
