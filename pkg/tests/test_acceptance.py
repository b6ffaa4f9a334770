"""End-to-end acceptance criteria; each prints one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines inline;
they are also written to the terminal summary under normal capture.
"""

import math
import time
import warnings
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from pilotwave.equilibrium import sequence_experiment
from pilotwave.harness import load_config, read_columns, run_experiment
from pilotwave.measurement import BinnedPosition, CouplingDynamics, DetectorSpec, coupling_for
from pilotwave.shiftmap import ShiftState, bernoulli_shift
from pilotwave.wavefield import Grid1D, PhysicalParams, PiecewiseDensity, init_state

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
P = PhysicalParams()
TWO_INTERVAL = PiecewiseDensity(((0.0, 1.0), (1.0, 2.0)), (0.5, 0.5))

pytestmark = pytest.mark.acceptance


@pytest.fixture
def verdict(request):
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def emit(number: int, title: str, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'} [{number:2d}] {title}: {detail}"
        if reporter is not None:
            reporter.write_line(line)
        else:
            print(line)
        assert ok, line

    return emit


def _run(name: str, out: Path, workers: int = 1):
    cfg = load_config(CONFIGS / f"{name}.toml")
    start = time.perf_counter()
    report = run_experiment(cfg, out, workers=workers)
    return report, time.perf_counter() - start


def test_01_unitarity_and_stationarity(tmp_path, verdict):
    free, t_free = _run("free_gaussian", tmp_path / "free")
    ground, t_ground = _run("harmonic_ground", tmp_path / "ground")
    norm_err = free.summary["norm_error"]
    drift = ground.summary["density_drift"]
    # independent route: final snapshot density integrates to one
    _, _, snap = read_columns(sorted((tmp_path / "free").glob("snapshot_*.dat"))[-1])
    integral = abs(float(np.sum(snap[:, 3]) * (snap[1, 0] - snap[0, 0])) - 1.0)
    ok = norm_err < 1e-8 and integral < 1e-8 and drift < 1e-9 and t_free < 10 and t_ground < 10
    verdict(
        1,
        "unitarity & stationarity",
        ok,
        f"|norm-1|={norm_err:.2e} (file {integral:.2e}), ground drift={drift:.2e}, runtime {t_free:.1f}s / {t_ground:.1f}s",
    )


def test_02_guidance_oracle(tmp_path, verdict):
    report, elapsed = _run("spreading_trajectories", tmp_path)
    worst = 0.0
    t_end = 0.0
    for path in sorted(tmp_path.glob("trajectory_*.dat")):
        meta, _, data = read_columns(path)
        x0 = float(meta["x0"])
        t, x = data[:, 0], data[:, 1]
        exact = x0 * np.sqrt(1.0 + (t / 2.0) ** 2)
        worst = max(worst, float(np.max(np.abs(x - exact) / abs(exact))))
        t_end = t[-1]
    width_ratio = math.sqrt(1.0 + (t_end / 2.0) ** 2)
    ok = worst < 1e-3 and report.summary["oracle_rel_error"] < 1e-3 and width_ratio >= 2.0 - 1e-6 and elapsed < 10
    verdict(2, "guidance-law oracle", ok, f"max relative error {worst:.2e} to sigma ratio {width_ratio:.4f}, runtime {elapsed:.1f}s")


def test_03_equivariance(tmp_path, verdict):
    report, elapsed = _run("equilibrium_free", tmp_path, workers=4)
    _, _, data = read_columns(tmp_path / "ensemble_final.dat")
    x = data[:, 1]
    # free gaussian with sigma0 = 1 reaches sigma = sqrt(2) at T = 2
    ks_exact = float(stats.kstest(x, stats.norm(0.0, math.sqrt(2.0)).cdf).statistic)
    ks_grid = report.summary["stats"]["ks_distance"]
    ok = len(x) == 10_000 and ks_exact < 0.05 and ks_grid < 0.05 and elapsed < 120
    verdict(3, "equivariance", ok, f"KS={ks_exact:.4f} (closed form) / {ks_grid:.4f} (grid), n={len(x)}, runtime {elapsed:.1f}s")


def test_04_packet_separation(verdict):
    gx = Grid1D(-1.0, 3.0, 64)
    det = DetectorSpec(0.5, Grid1D(-8.0, 8.0, 128))
    obs = BinnedPosition((0.0, 1.0, 2.0))
    wf_x = init_state(gx, TWO_INTERVAL)
    eps = {}
    for sigmas in (6.0, 12.0):
        lam = sigmas * det.sigma / 4.0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            dyn = CouplingDynamics(wf_x, det, obs, coupling_for(obs, lam, 4.0, gx, P), P)
        eps[sigmas] = dyn.epsilon
    rel = abs(eps[6.0] / math.exp(-4.5) - 1.0)
    ok = rel < 0.10 and eps[12.0] < 1e-6
    verdict(4, "packet separation", ok, f"eps(6 sigma)={eps[6.0]:.5g} vs e^-4.5={math.exp(-4.5):.5g} ({rel:.1%}), eps(12 sigma)={eps[12.0]:.2e}")


def test_05_position_invariance(tmp_path, verdict):
    report, _ = _run("measure_position", tmp_path)
    cfg = load_config(CONFIGS / "measure_position.toml")
    gx = cfg.system_grid()
    chain = cfg.measurement_chain()
    dyn = CouplingDynamics(init_state(gx, cfg.state_spec()), chain.detector, chain.observable, chain.coupling(gx, P), P)
    # independent starts: 100 points spread over both bins, including cell edges
    xs = np.concatenate([np.linspace(0.0, 2.0, 90, endpoint=False), np.arange(10) * 0.2 + gx.dx * 0.5])
    end, _, _ = dyn.run(np.stack([xs, np.zeros_like(xs)], axis=1))
    disp = float(np.max(np.abs(end[:, 0] - xs)))
    _, _, out = read_columns(tmp_path / "outcomes.dat")
    agree = bool(np.all(out[:, 1] == (out[:, 3] >= 1.0)))
    ok = disp < 2 * gx.dx and report.summary["max_displacement"] < 2 * gx.dx and agree and len(out) == 100
    verdict(5, "position-measurement invariance", ok, f"max|x(dt)-x(0)|={disp:.2e} (harness {report.summary['max_displacement']:.2e}), 2dx={2 * gx.dx:.3g}")


def test_06_born_frequencies(tmp_path, verdict):
    report, elapsed = _run("measure_discrete", tmp_path)
    _, _, out = read_columns(tmp_path / "outcomes.dat")
    n = len(out)
    q = np.array([0.25, 0.75])
    freq = np.bincount(out[:, 1].astype(int), minlength=2) / n
    tol = 3 * np.sqrt(q * (1 - q) / n)
    ok = n == 1000 and bool(np.all(np.abs(freq - q) <= tol)) and elapsed < 300
    verdict(6, "Born frequencies from dynamics", ok, f"freq={freq.round(4).tolist()} vs {q.tolist()} (3 sigma={tol[0]:.4f}), runtime {elapsed:.1f}s")


def test_07_bernoulli_chaos(tmp_path, verdict):
    report, _ = _run("lyapunov_bernoulli", tmp_path)
    lam = report.summary["lambda_L"]
    _, _, orbit = read_columns(tmp_path / "orbit.dat")
    ks = float(stats.kstest(orbit[:, 1], "uniform").statistic)
    ok = abs(lam - math.log(2.0)) < 0.01 and ks < 0.02 and len(orbit) >= 10_000
    verdict(7, "Bernoulli-shift chaos", ok, f"lambda={lam:.5f} vs ln2={math.log(2):.5f}, KS={ks:.4f}, iterates={len(orbit)}")


def test_08_baker_cycle_equivalence(verdict):
    gx = Grid1D(-1.0, 3.0, 64)
    cfg = load_config(CONFIGS / "sequence_two_interval.toml")
    chain = cfg.measurement_chain()
    M = 1000
    res = sequence_experiment(chain, TWO_INTERVAL, gx, 0x5EED_BA4E5, M)
    u0 = res.fine[0]
    assert isinstance(u0, ShiftState)
    orbit = bernoulli_shift(u0, M - 1)
    exact = all(a.value == b.value for a, b in zip(res.fine, orbit))
    # float route: x is uniform on [0, 2), so its normalized coordinate is x/2
    dev = float(np.max(np.abs(res.positions / 2.0 - np.array([float(s) for s in orbit]))))
    ok = len(orbit) == M and exact and dev < 1e-12
    verdict(8, "baker-cycle equivalence", ok, f"{M} cycles, exact orbit match={exact}, max|x/2 - orbit|={dev:.1e}")


def test_09_single_system_born_rule(tmp_path, verdict):
    report, elapsed = _run("sequence_two_interval", tmp_path)
    _, _, out = read_columns(tmp_path / "outcomes.dat")
    M = len(out)
    freq = np.bincount(out[:, 1].astype(int), minlength=2) / M
    tv = 0.5 * float(np.sum(np.abs(freq - 0.5)))
    slope = report.summary["slope"]
    ok = M == 10_000 and tv < 0.02 and -0.65 <= slope <= -0.35 and elapsed < 600
    verdict(9, "single-system Born rule", ok, f"TV={tv:.4f}, slope={slope:.3f}, M={M}, runtime {elapsed:.1f}s")


def test_10_f_constancy(tmp_path, verdict):
    ramp, _ = _run("f_constancy", tmp_path / "ramp")
    born, _ = _run("equilibrium_free", tmp_path / "born", workers=4)
    drift = ramp.summary["max_f_drift"]
    _, _, d = read_columns(tmp_path / "ramp" / "f_drift.dat")
    _, _, f = read_columns(tmp_path / "born" / "f_histogram.dat")
    excess = float(np.max(np.abs(f[:, 2] - 1.0) / f[:, 3]))
    ok = drift < 0.02 and float(np.max(d[:, 1])) < 0.02 and excess <= 1.0 and len(f) >= 10
    verdict(10, "f-constancy", ok, f"max per-trajectory drift={drift:.2e}, born f max |f-1|/bound={excess:.3f} over {len(f)} bins")


@pytest.mark.parametrize("name", ["measure_position", "lyapunov_baker", "f_constancy"])
def test_11_determinism(tmp_path, verdict, name):
    _run(name, tmp_path / "a")
    _run(name, tmp_path / "b", workers=2)
    files = sorted(p.name for p in (tmp_path / "a").glob("*.dat"))
    same = bool(files) and all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
    verdict(11, f"determinism ({name})", same, f"{len(files)} data files byte-identical={same}")
