"""Experiment dispatch: config in, data files and a report out.

All randomness comes from :func:`rng_for` with a fixed stream per purpose,
so a (config, seed) pair determines every data byte.
"""

from __future__ import annotations

import math
import time
from pathlib import Path

import numpy as np
from scipy import stats as sst

from .. import measurement as ms
from ..cells import CellDistribution
from ..equilibrium import (
    BakerCycleFlow,
    Ensemble,
    FlowSetup,
    compare_distributions,
    evolve_ensemble,
    f_statistics,
    sample_ensemble,
    sequence_experiment,
    trajectory_f_drift,
)
from ..equilibrium.ensemble import rng_for
from ..polar import polar_decompose
from ..propagator import make_plan, propagate
from ..shiftmap import ShiftMapFlow, ShiftState, required_width
from ..trajectory import Particle, WaveFlow, integrate_batch, lyapunov_exponent
from ..wavefield import (
    FreePotential,
    GaussianState,
    HarmonicPotential,
    PiecewiseDensity,
    Superposition,
    init_state,
)
from .config import ExperimentConfig
from .output import Artifact, RunReport, write_outputs

STREAM_X = 0
STREAM_Y = 1
STREAM_SHIFT = 2
STREAM_SEQUENCE = 3


def seed_integer(seed: int, stream: int, bits: int) -> int:
    """A ``bits``-bit integer drawn from the counter-based stream."""
    rng = rng_for(seed, stream)
    return int.from_bytes(rng.bytes((bits + 7) // 8), "big") >> ((8 - bits % 8) % 8)


def _sampling_mode(spec) -> str:
    return "cells" if isinstance(spec, PiecewiseDensity) else "linear"


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None, workers: int = 1) -> RunReport:
    out_dir = out_dir or cfg.output_dir or "out"
    report = RunReport(cfg.kind, cfg.config_hash(), cfg.seed)
    start = time.perf_counter()
    artifacts = _KINDS[cfg.kind](cfg, report, workers)
    report.wall_time = time.perf_counter() - start
    write_outputs(report, artifacts, out_dir)
    return report


# ---------------------------------------------------------------------------


def _propagate(cfg: ExperimentConfig, report: RunReport, workers: int):
    p, grid, spec = cfg.physical(), cfg.system_grid(), cfg.state_spec()
    v = cfg.potential_spec()
    wf0 = init_state(grid, spec, p)
    plan = make_plan(cfg.plan.dt, cfg.plan.n_steps, grid, p, cfg.plan.snapshot_every)
    final, snaps = propagate(wf0, v, p, plan)
    x = grid.points
    arts = []
    for k, s in enumerate(snaps):
        arts.append(
            Artifact(
                f"snapshot_{k:04d}.dat",
                ("x", "re_psi", "im_psi", "density"),
                (x, s.wf.amp.real, s.wf.amp.imag, s.wf.density()),
                {"t": repr(float(s.t))},
            )
        )
    fields = polar_decompose(final, p)
    arts.append(
        Artifact(
            "polar_final.dat",
            ("x", "density", "v_x", "Q"),
            (x, fields.density, fields.velocity[0], fields.qpot),
            {"t": repr(plan.duration)},
        )
    )
    drift = abs(final.norm() - 1.0)
    report.add("norm conservation |norm-1| < 1e-8", drift < 1e-8, f"{drift:.3e}")
    report.summary.update(norm_error=drift, t_final=plan.duration)
    if _is_stationary(spec, v):
        d = float(np.max(np.abs(final.density() - wf0.density())))
        report.add("stationary density drift < 1e-9", d < 1e-9, f"{d:.3e}")
        report.summary["density_drift"] = d
    return arts


def _is_stationary(spec, v) -> bool:
    return (
        isinstance(spec, Superposition)
        and len(spec.states) == 1
        and isinstance(v, HarmonicPotential)
        and v.omega == spec.basis.omega
        and v.center == spec.basis.center
    )


def _trajectory(cfg: ExperimentConfig, report: RunReport, workers: int):
    p, grid, spec = cfg.physical(), cfg.system_grid(), cfg.state_spec()
    v = cfg.potential_spec()
    wf0 = init_state(grid, spec, p)
    t = cfg.trajectory
    starts = list(t.positions)
    if t.n_particles:
        e = sample_ensemble(wf0, t.n_particles, "born", cfg.seed, mode=_sampling_mode(spec), stream=STREAM_X)
        starts += list(e.positions[:, 0])
    plan = make_plan(cfg.plan.dt, cfg.plan.n_steps, grid, p)
    run = integrate_batch(wf0, v, p, np.array(starts)[:, None], plan, record_every=t.record_every)
    arts = []
    for i in range(len(starts)):
        rec = run.record(i)
        arts.append(
            Artifact(
                f"trajectory_{i:04d}.dat",
                ("t", "x", "v_x", "flags"),
                (rec.times, rec.positions[:, 0], rec.velocities[:, 0], rec.flags),
                {"x0": repr(float(starts[i]))},
            )
        )
    xs = run.positions[:, :, 0]
    order = np.argsort(xs[0], kind="stable")
    ordered = bool(np.all(np.diff(xs[:, order], axis=1) > 0)) if len(starts) > 1 else True
    report.add("1D no-crossing", ordered)
    report.summary["flagged_steps"] = int(np.count_nonzero(run.flags))
    if isinstance(spec, GaussianState) and spec.k0 == 0 and isinstance(v, FreePotential):
        s0 = spec.sigma
        st = s0 * np.sqrt(1 + (p.hbar * run.times / (2 * p.m_x * s0**2)) ** 2)
        exact = spec.center + (xs[0] - spec.center)[None, :] * (st / s0)[:, None]
        scale = np.maximum(np.abs(exact - spec.center), 1e-12)
        err = float(np.max(np.abs(xs - exact) / scale))
        report.add("spreading-gaussian oracle, relative error < 1e-3", err < 1e-3, f"{err:.3e}")
        report.summary["oracle_rel_error"] = err
    return arts


def _measure(cfg: ExperimentConfig, report: RunReport, workers: int):
    p, grid, spec = cfg.physical(), cfg.system_grid(), cfg.state_spec()
    c = cfg.chain
    det, obs = c.detector.build(), c.observable.build()
    wf_x = init_state(grid, spec, p)
    dyn = ms.CouplingDynamics(wf_x, det, obs, ms.coupling_for(obs, c.lam, c.duration, grid, p), p)
    n = c.n_measurements
    if c.x0 is not None:
        xs = np.full(n, float(c.x0))
    else:
        xs = CellDistribution(grid, wf_x.density(), _sampling_mode(spec)).sample(rng_for(cfg.seed, STREAM_X), n)
    if c.y0 == "born":
        ys = rng_for(cfg.seed, STREAM_Y).normal(det.center, det.sigma, n)
    else:
        ys = np.full(n, det.center)
    start = np.stack([xs, ys], axis=1)
    end, _, _ = dyn.run(start)
    idx = dyn.classify(end)
    values = np.asarray(obs.values, dtype=float)[idx]
    arts = [_outcome_log(np.arange(n), idx, values, end, np.full(n, dyn.epsilon), cfg)]
    report.summary["epsilon"] = dyn.epsilon
    if isinstance(obs, ms.BinnedPosition):
        disp = dyn.check_position_invariance(start, end)
        report.add("position invariance max|x(dt)-x(0)| < 2 dx", disp < 2 * grid.dx, f"{disp:.3e}")
        report.summary["max_displacement"] = disp
    q = _packet_weights(dyn)
    freq = np.bincount(idx, minlength=len(q)) / n
    report.summary.update(frequencies=freq.tolist(), born_weights=q.tolist())
    if c.x0 is None and (c.y0 == "born" or isinstance(obs, ms.BinnedPosition)):
        tol = 3 * np.sqrt(q * (1 - q) / n)
        ok = bool(np.all(np.abs(freq - q) <= np.maximum(tol, 1.0 / n)))
        report.add("Born frequencies within 3 sigma binomial", ok, f"freq={freq.tolist()} weights={q.tolist()}")
    return arts


def _packet_weights(dyn) -> np.ndarray:
    packets = ms.packet_amplitudes(dyn.final, dyn.obs, dyn.params)
    w = np.sum(np.abs(packets) ** 2, axis=(1, 2))
    return w / w.sum()


def _outcome_log(run_index, idx, values, end, eps, cfg: ExperimentConfig) -> Artifact:
    return Artifact(
        "outcomes.dat",
        ("run_index", "outcome_index", "outcome_value", "x_end", "y_end", "epsilon"),
        (np.asarray(run_index), np.asarray(idx), values, end[:, 0], end[:, 1], eps),
        {},
    )


def _chain_start(cfg: ExperimentConfig) -> int:
    return seed_integer(cfg.seed, STREAM_SEQUENCE, 1024)


def _sequence(cfg: ExperimentConfig, report: RunReport, workers: int):
    p, grid, spec = cfg.physical(), cfg.system_grid(), cfg.state_spec()
    chain = cfg.measurement_chain()
    M = cfg.sequence.M
    particle0 = Particle((cfg.chain.x0,)) if cfg.chain.x0 is not None else _chain_start(cfg)
    res = sequence_experiment(chain, spec, grid, particle0, M, p, cfg.chain.flow.build(), mode=_sampling_mode(spec))
    idx = np.array([o.index for o in res.outcomes])
    end = np.array([o.particle_at_end for o in res.outcomes])
    values = np.asarray(chain.observable.values, dtype=float)[idx]
    eps = np.array([o.epsilon for o in res.outcomes])
    conv = res.convergence
    arts = [
        _outcome_log(np.arange(M), idx, values, end, eps, cfg),
        Artifact("convergence.dat", ("M", "TV", "TV_mean", "KS"), (conv.m.astype(np.int64), conv.tv, conv.tv_mean, conv.ks)),
        Artifact("positions.dat", ("run_index", "x"), (np.arange(M), res.positions)),
    ]
    tv = res.tv
    slope = conv.slope()
    report.summary.update(
        frequencies=res.frequencies.tolist(),
        target=res.target_masses.tolist(),
        tv=tv,
        slope=slope,
        stats=vars(res.stats),
        mean_fidelity=float(np.mean(res.fidelities)),
    )
    if M >= 10_000:
        report.add("TV < 0.02 at M >= 1e4", tv < 0.02, f"{tv:.4g}")
    elif M >= 2000:
        report.add("TV < 0.05 at M >= 2e3", tv < 0.05, f"{tv:.4g}")
    if M >= 2000:
        report.add("convergence slope in [-0.65, -0.35]", -0.65 <= slope <= -0.35, f"{slope:.4g}")
    return arts


def _equilibrium(cfg: ExperimentConfig, report: RunReport, workers: int):
    p, grid, spec = cfg.physical(), cfg.system_grid(), cfg.state_spec()
    v = cfg.potential_spec()
    e_cfg = cfg.equilibrium
    wf0 = init_state(grid, spec, p)
    mode = _sampling_mode(spec)
    rho0 = wf0.density()
    custom = None
    if e_cfg.provenance == "custom":
        custom = rho0 * (grid.points - grid.x_min)
        custom = custom / (np.sum(custom) * grid.dx)
        e0 = sample_ensemble(wf0, e_cfg.n_samples, "custom", cfg.seed, density=custom, mode=mode, stream=STREAM_X)
    else:
        e0 = sample_ensemble(wf0, e_cfg.n_samples, "born", cfg.seed, mode=mode, stream=STREAM_X)
    setup = FlowSetup(wf0, v, p, cfg.plan.dt)
    e1, run = evolve_ensemble(e0, setup, e_cfg.T, workers=workers)
    wf_T = run.final_wf
    n = len(e1)
    stats = compare_distributions(e1, grid, wf_T.density() / (np.sum(wf_T.density()) * grid.dx), mode)
    report.summary.update(stats=vars(stats), failed=int(run.failed.sum()))
    arts = [Artifact("ensemble_final.dat", ("index", "x"), (np.arange(n), e1.positions[:, 0]), {"t": repr(float(e1.t))})]
    if e_cfg.provenance == "born":
        bound = 3 / math.sqrt(n) + 0.02
        report.add("equivariance KS < 3/sqrt(n) + 0.02", stats.ks_distance < bound, f"{stats.ks_distance:.4g} < {bound:.4g}")
        fs = f_statistics(e1, wf_T, mode=mode)
        report.add("f = 1 per bin within 5/sqrt(n*mass)", fs.max_excess <= 1.0, f"max excess {fs.max_excess:.3g}")
        ok = np.isfinite(fs.f)
        arts.append(
            Artifact("f_histogram.dat", ("bin_lo", "bin_hi", "f", "bound"), (fs.bin_edges[:-1][ok], fs.bin_edges[1:][ok], fs.f[ok], fs.bound[ok]))
        )
    if e_cfg.n_tracers:
        dens0 = custom if custom is not None else rho0
        dist = CellDistribution(grid, dens0, mode)
        x0 = dist.quantile((np.arange(e_cfg.n_tracers) + 0.5) / e_cfg.n_tracers)
        tracers = Ensemble(x0[:, None], e0.provenance, 0.0)
        _, trun = evolve_ensemble(tracers, setup, e_cfg.T, workers=workers, record_every=1)
        drift = trajectory_f_drift(trun, dens0, grid)
        worst = float(np.max(drift))
        report.add("per-trajectory f drift < 2%", worst < 0.02, f"{worst:.3e}")
        report.summary["max_f_drift"] = worst
        arts.append(Artifact("f_drift.dat", ("x0", "drift"), (x0[1:-1], drift)))
    return arts


def _lyapunov(cfg: ExperimentConfig, report: RunReport, workers: int):
    ly = cfg.lyapunov
    arts = []
    if ly.setup == "bernoulli":
        steps = int(round(ly.window))
        u0 = ShiftState.from_seed(seed_integer(cfg.seed, STREAM_SHIFT, ly.seed_bits), steps + 128)
        flow = ShiftMapFlow(u0)
        est = lyapunov_exponent(flow, Particle((float(u0),)), ly.delta0, ly.window)
        expected = math.log(2.0)
        ks = float(sst.kstest(np.array(flow.orbit), "uniform").statistic)
        report.add("orbit histogram KS vs uniform < 0.02", ks < 0.02, f"{ks:.4g}")
        report.summary["orbit_ks"] = ks
        arts.append(Artifact("orbit.dat", ("k", "x"), (np.arange(len(flow.orbit)), np.array(flow.orbit))))
    elif ly.setup == "wave":
        p, grid = cfg.physical(), cfg.system_grid()
        wf0 = init_state(grid, cfg.state_spec(), p)
        make_plan(cfg.plan.dt, 1, grid, p)
        flow = WaveFlow(wf0, cfg.potential_spec(), p, cfg.plan.dt)
        est = lyapunov_exponent(flow, Particle((ly.x0,)), ly.delta0, ly.window)
        expected = None
    else:
        p, grid = cfg.physical(), cfg.system_grid()
        wf_x = init_state(grid, cfg.state_spec(), p)
        chain = cfg.measurement_chain()
        dyn = ms.CouplingDynamics(wf_x, chain.detector, chain.observable, chain.coupling(grid, p), p)
        q = _packet_weights(dyn)
        width = required_width(q, int(round(ly.window))) + 128
        flow = BakerCycleFlow(dyn, wf_x, width_bits=width)
        dist = CellDistribution(grid, wf_x.density(), "cells")
        u0 = ShiftState.from_seed(seed_integer(cfg.seed, STREAM_SHIFT, ly.seed_bits), width)
        particle0 = Particle((float(dist.quantile(float(u0))),), 0.0, u0)
        est = lyapunov_exponent(flow, particle0, ly.delta0, ly.window)
        expected = float(-np.sum(q[q > 0] * np.log(q[q > 0])))
    report.summary.update(
        lambda_L=est.lambda_L, window=est.window, renorm_count=est.renorm_count, residual=est.residual, expected=expected
    )
    if expected is not None:
        tol = 0.01 if ly.setup == "bernoulli" else 0.05
        report.add(f"lambda_L within {tol} of {expected:.6g}", abs(est.lambda_L - expected) < tol, f"{est.lambda_L:.6g}")
    arts.append(
        Artifact(
            "lyapunov.dat",
            ("lambda_L", "window", "renorm_count", "residual"),
            (np.array([est.lambda_L]), np.array([est.window]), np.array([est.renorm_count]), np.array([est.residual])),
        )
    )
    return arts


_KINDS = {
    "propagate": _propagate,
    "trajectory": _trajectory,
    "measure": _measure,
    "sequence": _sequence,
    "equilibrium": _equilibrium,
    "lyapunov": _lyapunov,
}
