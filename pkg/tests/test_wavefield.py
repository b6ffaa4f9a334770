import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pilotwave.wavefield import (
    GaussianState,
    Grid1D,
    Grid2D,
    GridError,
    HarmonicBasis,
    HarmonicPotential,
    PhysicalParams,
    PiecewiseDensity,
    StateError,
    Superposition,
    init_state,
    inner_product,
    interval_masses,
    marginal_density,
    normalize,
    product_state,
)


@pytest.mark.parametrize("n", [0, 8, 100, 255])
def test_grid_rejects_bad_sizes(n):
    with pytest.raises(GridError):
        Grid1D(0.0, 1.0, n)


def test_grid_rejects_degenerate_interval():
    with pytest.raises(GridError):
        Grid1D(1.0, 1.0, 64)


def test_grid_points_and_wavenumbers():
    g = Grid1D(-2.0, 2.0, 32)
    assert g.dx == pytest.approx(0.125)
    assert g.points[0] == -2.0 and g.points[-1] == pytest.approx(2.0 - g.dx)
    assert np.allclose(np.sort(g.k), np.sort(2 * np.pi * np.fft.fftfreq(32, g.dx)))


def test_edge_index_exact_and_off_grid():
    g = Grid1D(-1.0, 3.0, 64)
    assert g.edge_index(0.0) == 16
    assert g.edge_index(3.0) == 64
    with pytest.raises(GridError):
        g.edge_index(0.01)


@given(center=st.floats(-4, 4), sigma=st.floats(0.6, 2.0), k0=st.floats(-3, 3))
def test_gaussian_moments(center, sigma, k0):
    g = Grid1D(-20.0, 20.0, 512)
    wf = init_state(g, GaussianState(center, sigma, k0))
    rho = wf.density() * g.dx
    mean = np.sum(rho * g.points)
    sd = math.sqrt(np.sum(rho * (g.points - mean) ** 2))
    assert wf.norm() == pytest.approx(1.0, abs=1e-12)
    assert mean == pytest.approx(center, abs=1e-9)
    assert sd == pytest.approx(sigma, rel=1e-9)


def test_gaussian_under_resolved():
    with pytest.raises(StateError, match="under-resolved"):
        init_state(Grid1D(-8.0, 8.0, 64), GaussianState(0.0, 0.5))


def test_harmonic_eigenstates_orthonormal(grid, params):
    rows = HarmonicBasis(1.0).eigenstates(grid, 6, params)
    gram = rows @ rows.T * grid.dx
    assert np.allclose(gram, np.eye(7), atol=1e-12)


def test_harmonic_eigenstates_solve_the_eigenproblem(params):
    g = Grid1D(-12.0, 12.0, 256)
    basis = HarmonicBasis(1.3, 0.5)
    rows = basis.eigenstates(g, 4, params)
    v = HarmonicPotential(1.3, 0.5).values(g, params)
    for n, psi in enumerate(rows):
        kinetic = np.fft.ifft(0.5 * g.k**2 * np.fft.fft(psi)).real
        assert np.allclose(kinetic + v * psi, basis.energy(n, params) * psi, atol=1e-9)


def test_piecewise_density_levels():
    g = Grid1D(-1.0, 3.0, 64)
    wf = init_state(g, PiecewiseDensity(((0.0, 1.0), (1.0, 2.0)), (0.2, 0.8)))
    rho = wf.density()
    assert np.allclose(rho[16:32], 0.2)
    assert np.allclose(rho[32:48], 0.8)
    assert np.all(rho[:16] == 0) and np.all(rho[48:] == 0)
    assert np.allclose(interval_masses(wf, [0.0, 1.0, 2.0]), [0.2, 0.8])


def test_piecewise_rejects_overlap():
    with pytest.raises(StateError):
        PiecewiseDensity(((0.0, 1.0), (0.5, 2.0)), (1.0, 1.0))


def test_superposition_requires_unit_weights():
    with pytest.raises(StateError):
        Superposition((0.5, 0.5), (0, 1), HarmonicBasis(1.0))


def test_superposition_coefficients_recovered(grid, params):
    c = (0.5, math.sqrt(0.75) * 1j)
    wf = init_state(grid, Superposition(c, (0, 1), HarmonicBasis(1.0)), params)
    rows = HarmonicBasis(1.0).eigenstates(grid, 1, params)
    proj = rows @ wf.amp * grid.dx
    assert np.allclose(proj, c, atol=1e-12)


def test_normalize_is_idempotent(grid):
    wf = init_state(grid, GaussianState(0.0, 1.0))
    assert normalize(wf) is wf
    scaled = wf.with_amp(3 * wf.amp)
    assert normalize(scaled).norm() == pytest.approx(1.0, abs=1e-14)


def test_product_state_marginals(grid):
    a = init_state(grid, GaussianState(-1.0, 1.0))
    gy = Grid1D(-8.0, 8.0, 128)
    b = init_state(gy, GaussianState(0.0, 0.8))
    wf = product_state(a, b)
    assert isinstance(wf.grid, Grid2D)
    assert wf.norm() == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(marginal_density(wf, 0), a.density(), atol=1e-14)
    assert np.allclose(marginal_density(wf, 1), b.density(), atol=1e-14)


def test_inner_product_grid_mismatch(grid):
    a = init_state(grid, GaussianState(0.0, 1.0))
    b = init_state(Grid1D(-16.0, 16.0, 128), GaussianState(0.0, 1.0))
    with pytest.raises(GridError):
        inner_product(a, b)


def test_params_validation():
    with pytest.raises(ValueError):
        PhysicalParams(hbar=0.0)
    with pytest.raises(ValueError):
        PhysicalParams(m_x=float("nan"))


def test_wavefunction_is_read_only(grid):
    wf = init_state(grid, GaussianState(0.0, 1.0))
    with pytest.raises(ValueError):
        wf.amp[0] = 1.0


def test_make_grid_examples():
    from pilotwave.wavefield import make_grid

    assert make_grid(0, 1, 64).dx == 1 / 64
    assert make_grid(-10, 10, 1024).dx == 20 / 1024
    with pytest.raises(GridError, match="power of two"):
        make_grid(0, 1, 48)


def test_two_interval_state_is_half_on_each_interval():
    g = Grid1D(-1.0, 3.0, 64)
    wf = init_state(g, PiecewiseDensity(((0.0, 1.0), (1.0, 2.0)), (1.0, 1.0)))
    assert np.allclose(wf.density()[16:48], 0.5)


def test_superposition_weights_sum_to_one(grid, params):
    c = (1 / math.sqrt(2), 1 / math.sqrt(2))
    wf = init_state(grid, Superposition(c, (0, 3), HarmonicBasis(1.0)), params)
    assert wf.norm() == pytest.approx(1.0, abs=1e-12)


def test_inner_product_examples(grid, params):
    rows = HarmonicBasis(1.0).eigenstates(grid, 2, params)
    a = init_state(grid, GaussianState(0.0, 1.0))
    assert inner_product(a, a) == pytest.approx(1.0, abs=1e-12)
    e0 = init_state(grid, Superposition((1.0,), (0,), HarmonicBasis(1.0)), params)
    e2 = e0.with_amp(rows[2])
    assert abs(inner_product(e0, e2)) < 1e-8


@given(d=st.floats(0.0, 5.0), sigma=st.floats(0.8, 1.5))
def test_gaussian_overlap_closed_form(d, sigma):
    g = Grid1D(-20.0, 20.0, 512)
    a = init_state(g, GaussianState(-d / 2, sigma))
    b = init_state(g, GaussianState(d / 2, sigma))
    assert abs(inner_product(a, b)) == pytest.approx(math.exp(-(d**2) / (8 * sigma**2)), abs=1e-6)


def test_rectangular_times_gaussian():
    gx = Grid1D(-1.0, 3.0, 64)
    gy = Grid1D(-8.0, 8.0, 128)
    a = init_state(gx, PiecewiseDensity(((0.0, 2.0),), (1.0,)))
    b = init_state(gy, GaussianState(0.0, 0.5))
    wf = product_state(a, b)
    assert np.allclose(wf.density(), np.outer(a.density(), b.density()), atol=1e-15)
