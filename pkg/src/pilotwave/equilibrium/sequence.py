"""Single-system measurement sequences: measure, restrict, reprepare, repeat."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..cells import CellDistribution
from ..measurement import (
    BinnedPosition,
    CouplingDynamics,
    FlowOptions,
    MeasurementChain,
    OutcomeRecord,
    baker_transport,
    packet_amplitudes,
    reprepare,
    restrict_support,
)
from ..shiftmap import ShiftState, required_width
from ..trajectory import Particle
from ..wavefield import Grid1D, PhysicalParams, StateSpec, Wavefunction, init_state
from .stats import DistributionStats, compare_distributions, discrete_tv


class ChainFailure(RuntimeError):
    def __init__(self, run_index: int, cause: Exception):
        super().__init__(f"measurement chain failed at run {run_index}: {cause}")
        self.run_index = run_index
        self.cause = cause


@dataclass(frozen=True, eq=False)
class Convergence:
    """``tv`` is the running TV after the first ``m`` outcomes; ``tv_mean`` the mean TV over disjoint length-``m`` windows."""

    m: np.ndarray
    tv: np.ndarray
    tv_mean: np.ndarray
    ks: np.ndarray

    def slope(self) -> float:
        ok = self.tv_mean > 0
        coef = np.polyfit(np.log(self.m[ok]), np.log(self.tv_mean[ok]), 1)
        return float(coef[0])


@dataclass(frozen=True, eq=False)
class SequenceResult:
    outcomes: list[OutcomeRecord]
    positions: np.ndarray  # system coordinate at the start of each measurement
    fine: list[ShiftState | None]  # exact normalized coordinate at the start of each measurement
    target_masses: np.ndarray
    frequencies: np.ndarray
    convergence: Convergence
    stats: DistributionStats
    fidelities: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def tv(self) -> float:
        return discrete_tv(self.frequencies, self.target_masses)


def _checkpoints(M: int, lo: int, hi: int, count: int) -> np.ndarray:
    pts = np.unique(np.round(np.geomspace(lo, hi, count)).astype(np.int64))
    return pts[(pts >= 1) & (pts <= M)]


def convergence_curve(indices: np.ndarray, q: np.ndarray, positions: np.ndarray, grid: Grid1D, reference: np.ndarray, mode: str) -> Convergence:
    M = len(indices)
    k = len(q)
    onehot = np.zeros((M, k))
    onehot[np.arange(M), indices] = 1.0
    running = np.cumsum(onehot, axis=0)
    ms = _checkpoints(M, min(20, M), max(min(20, M), M // 10), 12)
    tv = np.array([discrete_tv(running[m - 1] / m, q) for m in ms])
    tv_mean = np.empty(len(ms))
    for j, m in enumerate(ms):
        w = M // m
        sums = onehot[: w * m].reshape(w, m, k).sum(axis=1) / m
        tv_mean[j] = np.mean(0.5 * np.abs(sums - q[None, :]).sum(axis=1))
    ks = np.array([compare_distributions(positions[:m], grid, reference, mode).ks_distance if m >= 10 else np.nan for m in ms])
    return Convergence(ms.astype(float), tv, tv_mean, ks)


def start_particle(dist: CellDistribution, particle0: Particle | int, width_bits: int) -> Particle:
    """Initial system particle; an integer seed is expanded into an exact normalized coordinate."""
    if isinstance(particle0, Particle):
        x = float(particle0.coords[0])
        if isinstance(particle0.fine, ShiftState):
            return Particle((x,), particle0.t, particle0.fine)
        u = ShiftState.from_float(min(float(dist.cdf_at(x)), 1.0 - 2.0**-60), width_bits)
        return Particle((x,), particle0.t, u)
    u = ShiftState.from_seed(int(particle0), width_bits)
    return Particle((float(dist.quantile(float(u))),), 0.0, u)


def sequence_experiment(
    chain: MeasurementChain,
    wf0: StateSpec,
    gx: Grid1D,
    particle0: Particle | int,
    M: int,
    params: PhysicalParams | None = None,
    flow: FlowOptions | None = None,
    mode: str = "cells",
    on_outcome=None,
) -> SequenceResult:
    """Run ``M`` measure/restrict/reprepare cycles on one system.

    The wavefunction is prepared in ``wf0`` before every measurement, so the
    coupling evolution is computed once and shared by all cycles.
    ``on_outcome(i, record)`` is called after each cycle.
    """
    if M < 100:
        raise ValueError(f"sequence needs M >= 100, got {M}")
    params = params or PhysicalParams()
    wf_x: Wavefunction = init_state(gx, wf0, params)
    dyn = CouplingDynamics(wf_x, chain.detector, chain.observable, chain.coupling(gx, params), params)
    q = _packet_weights(dyn)
    dist = CellDistribution(gx, wf_x.density(), mode)
    width = required_width(q, M) + 64
    particle = start_particle(dist, particle0, width)
    restricted: dict[int, Wavefunction] = {}
    outcomes: list[OutcomeRecord] = []
    positions = np.empty(M)
    fines: list[ShiftState | None] = []
    fids = np.ones(M)
    y0 = chain.detector.center
    for i in range(M):
        try:
            x = float(particle.coords[0])
            positions[i] = x
            fines.append(particle.fine)
            start = np.array([[x, y0]])
            end, _, _ = dyn.run(start)
            if isinstance(chain.observable, BinnedPosition):
                dyn.check_position_invariance(start, end)
            n0 = int(dyn.classify(end)[0])
            out = dyn.outcome(n0, end[0])
            if n0 not in restricted:
                restricted[n0] = restrict_support(dyn.final, out, chain.observable, params)[0]
            sys_particle = Particle((float(end[0, 0]),), 0.0, particle.fine)
            if chain.reprepare_mode == "baker_ideal":
                particle = baker_transport(restricted[n0], wf_x, sys_particle, width)
            else:
                rp = reprepare(restricted[n0], sys_particle, "physical_flow", wf_x, params, flow)
                particle, fids[i] = rp.particle, rp.fidelity
        except Exception as exc:  # noqa: BLE001 - re-raised with the run index
            raise ChainFailure(i, exc) from exc
        outcomes.append(out)
        if on_outcome is not None:
            on_outcome(i, out)
    idx = np.array([o.index for o in outcomes])
    freq = np.bincount(idx, minlength=len(q)) / M
    conv = convergence_curve(idx, q, positions, gx, wf_x.density(), mode)
    st = compare_distributions(positions, gx, wf_x.density(), mode)
    return SequenceResult(outcomes, positions, fines, q, freq, conv, st, fids)


def _packet_weights(dyn: CouplingDynamics) -> np.ndarray:
    packets = packet_amplitudes(dyn.final, dyn.obs, dyn.params)
    w = np.sum(np.abs(packets) ** 2, axis=(1, 2)) * dyn.final.grid.dV
    return w / w.sum()


class BakerCycleFlow:
    """Pair flow for the Lyapunov estimator: one measure + baker-reprepare cycle per unit time.

    Both particles go through the same (precomputed) measurement; the
    companion is displaced by ``delta0`` along the system axis.
    """

    dt = 1.0

    def __init__(self, dyn: CouplingDynamics, wf_x: Wavefunction, width_bits: int = 512):
        self.dyn = dyn
        self.wf_x = wf_x
        self.dist = CellDistribution(wf_x.grid, wf_x.density(), "cells")
        self.width_bits = width_bits
        self._restricted: dict[int, Wavefunction] = {}

    def _place(self, u: ShiftState) -> Particle:
        return Particle((float(self.dist.quantile(float(u))),), 0.0, u)

    def _companion(self, delta0: float) -> Particle:
        x = float(self.a.coords[0])
        du = delta0 * float(np.interp(x, self.dist.edges[:-1], self.dist.masses / self.wf_x.grid.dx))
        return self._place(self.a.fine.offset(du))

    def reset(self, particle0: Particle, delta0: float) -> None:
        x = float(particle0.coords[0])
        u = particle0.fine if isinstance(particle0.fine, ShiftState) else ShiftState.from_float(float(self.dist.cdf_at(x)), self.width_bits)
        self.a = self._place(u)
        self.b = self._companion(delta0)

    def _cycle(self, p: Particle) -> Particle:
        y0 = self.dyn.det.center
        start = np.array([[p.coords[0], y0]])
        end, _, _ = self.dyn.run(start)
        n0 = int(self.dyn.classify(end)[0])
        if n0 not in self._restricted:
            self._restricted[n0] = restrict_support(self.dyn.final, self.dyn.outcome(n0, end[0]), self.dyn.obs, self.dyn.params)[0]
        return baker_transport(self._restricted[n0], self.wf_x, Particle((float(end[0, 0]),), 0.0, p.fine), self.width_bits)

    def step(self) -> None:
        self.a = self._cycle(self.a)
        self.b = self._cycle(self.b)

    def separation(self) -> float:
        return abs(float(self.b.coords[0]) - float(self.a.coords[0]))

    def renormalize(self, delta0: float) -> None:
        self.b = self._companion(delta0)
