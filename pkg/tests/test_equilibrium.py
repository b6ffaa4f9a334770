import math

import numpy as np
import pytest
from scipy import stats

from pilotwave.equilibrium import (
    BakerCycleFlow,
    ChainFailure,
    Ensemble,
    FlowSetup,
    UndersamplingError,
    compare_distributions,
    discrete_tv,
    evolve_ensemble,
    f_statistics,
    rng_for,
    sample_ensemble,
    sequence_experiment,
)
from pilotwave.measurement import (
    BinnedPosition,
    CouplingDynamics,
    DetectorSpec,
    DiscreteObservable,
    MeasurementChain,
)
from pilotwave.trajectory import Particle, lyapunov_exponent
from pilotwave.wavefield import (
    FreePotential,
    GaussianState,
    Grid1D,
    HarmonicBasis,
    HarmonicPotential,
    PhysicalParams,
    PiecewiseDensity,
    Superposition,
    init_state,
)

P = PhysicalParams()
GX = Grid1D(-1.0, 3.0, 64)
GY = Grid1D(-8.0, 8.0, 128)
DET = DetectorSpec(0.5, GY)
TWO_BINS = BinnedPosition((0.0, 1.0, 2.0))


def _uniform_wf(a=0.0, b=1.0, grid=GX):
    return init_state(grid, PiecewiseDensity(((a, b),), (1.0,)))


# ---------------------------------------------------------------------------
# rng and sampling


def test_rng_streams_are_reproducible_and_independent():
    a = rng_for(7, 3).random(5)
    assert np.array_equal(a, rng_for(7, 3).random(5))
    assert not np.array_equal(a, rng_for(7, 4).random(5))
    assert not np.array_equal(a, rng_for(8, 3).random(5))


def test_born_sampling_of_uniform_interval():
    n = 20000
    e = sample_ensemble(_uniform_wf(), n, seed=1, mode="cells")
    assert e.provenance == "born" and e.ndim == 1 and len(e) == n
    assert stats.kstest(e.positions[:, 0], "uniform").statistic < 3 / math.sqrt(n)


def test_two_interval_masses_within_three_sigma():
    n = 20000
    wf = init_state(GX, PiecewiseDensity(((0.0, 1.0), (1.0, 2.0)), (0.25, 0.75)))
    x = sample_ensemble(wf, n, seed=2, mode="cells").positions[:, 0]
    frac = np.mean(x < 1.0)
    assert abs(frac - 0.25) < 3 * math.sqrt(0.25 * 0.75 / n)
    assert np.all((x >= 0.0) & (x < 2.0))


def test_custom_density_on_single_cell():
    wf = _uniform_wf()
    dens = np.zeros(GX.n)
    dens[GX.edge_index(0.5)] = 1.0
    x = sample_ensemble(wf, 500, "custom", seed=3, density=dens, mode="cells").positions[:, 0]
    assert np.all((x >= 0.5) & (x < 0.5 + GX.dx))


def test_custom_density_validation():
    wf = _uniform_wf()
    with pytest.raises(ValueError, match="needs a density"):
        sample_ensemble(wf, 10, "custom")
    with pytest.raises(ValueError, match="normalizable"):
        sample_ensemble(wf, 10, "custom", density=-np.ones(GX.n))
    with pytest.raises(ValueError):
        sample_ensemble(wf, 0)


def test_sampling_is_deterministic_per_seed():
    wf = init_state(Grid1D(-16, 16, 256), GaussianState(0.0, 1.0))
    a = sample_ensemble(wf, 100, seed=5).positions
    assert np.array_equal(a, sample_ensemble(wf, 100, seed=5).positions)
    assert not np.array_equal(a, sample_ensemble(wf, 100, seed=6).positions)


# ---------------------------------------------------------------------------
# transport


def test_stationary_state_ensemble_is_frozen():
    grid = Grid1D(-12.0, 12.0, 256)
    wf = init_state(grid, GaussianState(0.0, math.sqrt(0.5)))
    e = sample_ensemble(wf, 200, seed=4)
    out, run = evolve_ensemble(e, FlowSetup(wf, HarmonicPotential(1.0), P, 0.0025), 0.5)
    assert out.t == 0.5
    assert np.max(np.abs(out.positions - e.positions)) < 1e-6
    assert not run.failed.any()


def test_born_ensemble_follows_spreading_gaussian():
    grid = Grid1D(-16.0, 16.0, 256)
    wf = init_state(grid, GaussianState(0.0, 1.0))
    n = 2000
    e = sample_ensemble(wf, n, seed=8)
    out, run = evolve_ensemble(e, FlowSetup(wf, FreePotential(), P, 0.004), 2.0, workers=2)
    # sigma(t) = sqrt(1 + t^2/4); each member scales by sigma(t)/sigma(0)
    assert np.allclose(out.positions, e.positions * math.sqrt(2.0), atol=1e-3)
    st = compare_distributions(out, grid, run.final_wf.density())
    assert st.ks_distance < 1.63 / math.sqrt(n)


def test_evolve_rejects_off_step_time():
    wf = _uniform_wf()
    e = Ensemble(np.array([[0.5]]))
    with pytest.raises(ValueError, match="multiple of dt"):
        evolve_ensemble(e, FlowSetup(wf, FreePotential(), P, 0.001), 0.0015)


# ---------------------------------------------------------------------------
# f diagnostics and distribution comparison


def test_born_ensemble_has_unit_f():
    wf = init_state(Grid1D(-16.0, 16.0, 256), GaussianState(0.0, 1.0))
    summ = f_statistics(sample_ensemble(wf, 20000, seed=10), wf)
    ok = ~np.isnan(summ.f)
    assert ok.sum() >= 10
    assert summ.max_excess < 1.0


def test_linear_custom_density_gives_linear_f():
    grid = Grid1D(0.0, 16.0, 128)
    wf = init_state(grid, PiecewiseDensity(((0.0, 16.0),), (1.0,)))
    dens = grid.points.copy()
    e = sample_ensemble(wf, 40000, "custom", seed=11, density=dens, mode="cells")
    # cell sampling holds each cell at its left value; a 4-cell bin averages to centre - dx/2
    scale = 16.0 / float(np.sum(dens) * grid.dx)
    summ = f_statistics(e, wf, expected_f=lambda c: (c - grid.dx / 2) * scale, mode="cells")
    assert summ.max_excess < 1.0
    slope = np.polyfit(0.5 * (summ.bin_edges[1:] + summ.bin_edges[:-1]), summ.f, 1)[0]
    assert slope == pytest.approx(scale, rel=0.05)


def test_f_statistics_detects_undersampling():
    wf = init_state(Grid1D(-16.0, 16.0, 256), GaussianState(0.0, 1.0))
    with pytest.raises(UndersamplingError):
        f_statistics(Ensemble(np.zeros((2000, 1))), wf)
    with pytest.raises(ValueError, match="1000"):
        f_statistics(Ensemble(np.zeros((10, 1))), wf)


def test_compare_distributions_null():
    wf = _uniform_wf(0.0, 2.0)
    n = 4000
    e = sample_ensemble(wf, n, seed=12, mode="cells")
    st = compare_distributions(e, GX, wf.density(), "cells")
    assert st.total_variation < 3 / math.sqrt(n)
    assert st.ks_distance < 1.63 / math.sqrt(n)
    assert st.chi2_pvalue > 1e-3


def test_compare_distributions_half_support():
    ref = _uniform_wf(0.0, 2.0).density()
    x = rng_for(13).uniform(0.0, 1.0, 5000)
    st = compare_distributions(x, GX, ref, "cells")
    assert st.total_variation == pytest.approx(0.5, abs=0.03)
    assert st.ks_distance == pytest.approx(0.5, abs=0.03)


def test_compare_distributions_flags_wrong_masses():
    ref = init_state(GX, PiecewiseDensity(((0.0, 1.0), (1.0, 2.0)), (0.5, 0.5))).density()
    rng = rng_for(14)
    x = np.where(rng.random(2000) < 0.25, rng.uniform(0, 1, 2000), rng.uniform(1, 2, 2000))
    assert compare_distributions(x, GX, ref, "cells").chi2_pvalue < 1e-6


def test_compare_distributions_counts_mass_off_support():
    ref = _uniform_wf().density()
    st = compare_distributions(np.full(100, 2.5), GX, ref, "cells")
    assert st.total_variation == 1.0 and st.chi2 == math.inf


def test_discrete_tv():
    assert discrete_tv([0.25, 0.75], [0.5, 0.5]) == 0.25
    assert discrete_tv([1, 0], [1, 0]) == 0.0


# ---------------------------------------------------------------------------
# measurement sequences


@pytest.fixture(scope="module")
def two_bin_chain():
    return MeasurementChain(TWO_BINS, DET, 1.0, 4.0)


def test_sequence_needs_enough_measurements(two_bin_chain):
    with pytest.raises(ValueError, match="M >= 100"):
        sequence_experiment(two_bin_chain, PiecewiseDensity(((0.0, 2.0),), (1.0,)), GX, 1, 50)


def test_sequence_on_single_eigenstate_never_varies():
    basis = HarmonicBasis(1.0)
    gd = Grid1D(-8.0, 8.0, 64)
    obs = DiscreteObservable((0.0, 1.0), (0, 1), basis)
    chain = MeasurementChain(obs, DET, 1.0, 4.0)
    res = sequence_experiment(chain, Superposition((1.0,), (1,), basis), gd, 3, 100)
    assert {o.index for o in res.outcomes} == {1}
    assert res.tv == pytest.approx(0.0, abs=1e-9)


def test_three_bin_sequence_reproduces_masses():
    gx = Grid1D(-1.0, 7.0, 128)
    gy = Grid1D(-6.0, 14.0, 256)
    chain = MeasurementChain(BinnedPosition((0.0, 1.0, 2.0, 3.0)), DetectorSpec(0.5, gy), 1.0, 4.0)
    q = np.array([0.2, 0.3, 0.5])
    M = 1000
    res = sequence_experiment(chain, PiecewiseDensity(((0.0, 1.0), (1.0, 2.0), (2.0, 3.0)), tuple(q)), gx, 21, M)
    assert np.allclose(res.target_masses, q, atol=1e-12)
    assert np.all(np.abs(res.frequencies - q) < 3 * np.sqrt(q * (1 - q) / M))
    assert res.stats.ks_distance < 0.05
    assert np.all(res.fidelities == 1.0)


def test_sequence_is_deterministic_and_reports_progress(two_bin_chain):
    seen = []
    spec = PiecewiseDensity(((0.0, 1.0), (1.0, 2.0)), (0.5, 0.5))
    a = sequence_experiment(two_bin_chain, spec, GX, 99, 100, on_outcome=lambda i, o: seen.append(i))
    b = sequence_experiment(two_bin_chain, spec, GX, 99, 100)
    assert seen == list(range(100))
    assert [o.index for o in a.outcomes] == [o.index for o in b.outcomes]
    assert a.convergence.m[-1] <= 100


def test_physical_flow_sequence_fails_with_run_index():
    chain = MeasurementChain(TWO_BINS, DET, 1.0, 4.0, reprepare_mode="physical_flow")
    with pytest.raises(ChainFailure) as info:
        sequence_experiment(chain, PiecewiseDensity(((0.0, 1.0), (1.0, 2.0)), (0.5, 0.5)), GX, 4, 100)
    assert info.value.run_index == 0


def test_baker_cycle_exponent_is_outcome_entropy():
    wf_x = init_state(GX, PiecewiseDensity(((0.0, 1.0), (1.0, 2.0)), (0.5, 0.5)))
    dyn = CouplingDynamics(wf_x, DET, TWO_BINS, MeasurementChain(TWO_BINS, DET, 1.0, 4.0).coupling(GX, P), P)
    flow = BakerCycleFlow(dyn, wf_x, width_bits=400)
    est = lyapunov_exponent(flow, Particle((0.3141,)), 1e-10, 200.0)
    assert est.lambda_L == pytest.approx(math.log(2.0), abs=0.05)
