import math

import numpy as np
import pytest

from kgscatter import evolution as ev
from kgscatter import geometry as geo
from kgscatter import propagators as prop
from kgscatter import scattering as sc
from kgscatter.grid_ops import SpatialGrid


@pytest.fixture(scope="module")
def bump_scattering(bump15):
    tg = ev.TimeGrid.build(40.0, 0.05, bump15.delta)
    bundle = ev.DiagonalizationBundle(bump15, tg)
    full = ev.Evolution(bump15, tg, "full", bundle)
    ms = sc.moller(bump15, tg, bundle, with_ad=True, full=full)
    return ms, bundle, full


@pytest.fixture(scope="module")
def bump_wave_ops(bump_scattering):
    return sc.feynman_wave_ops(bump_scattering[0])


@pytest.fixture(scope="module")
def free_scattering(free32):
    tg = ev.TimeGrid.build(10.0, 0.05, free32.delta)
    bundle = ev.DiagonalizationBundle(free32, tg)
    full = ev.Evolution(free32, tg, "full", bundle)
    return sc.moller(free32, tg, bundle, with_ad=True, full=full), bundle, full


def _homogeneous_data(grid, count, seed):
    rng = np.random.default_rng(seed)
    smooth = (1 + grid.wavenumbers ** 2) ** -1.0
    out = []
    for _ in range(count):
        comps = [np.fft.ifft(smooth * np.fft.fft(rng.standard_normal(grid.n_points))) for _ in range(2)]
        out.append(np.concatenate(comps).astype(complex))
    return out


# -- vacuum projections


def test_projections_are_complementary_idempotents(grid32):
    vp = sc.free_vacuum_projections(grid32, 1.0)
    eye = np.eye(64)
    assert np.abs(vp.c_plus + vp.c_minus - eye).max() < 1e-12
    assert np.abs(vp.c_plus @ vp.c_plus - vp.c_plus).max() < 1e-12
    assert np.abs(vp.c_plus @ vp.c_minus).max() < 1e-12
    H = ev.FreeDynamics(grid32, 1.0).generator()
    assert np.abs(H @ vp.c_plus - vp.c_plus @ H).max() < 1e-10


@pytest.mark.parametrize("mode", [0, 3, 7])
def test_positive_frequency_modes(grid32, mode):
    vp = sc.free_vacuum_projections(grid32, 1.0)
    wave = grid32.plane_wave(mode)
    omega = math.sqrt(grid32.wavenumbers[mode] ** 2 + 1)
    # e^{i w t} e^{ikx} has data (1, w) e^{ikx}; e^{-i w t} has (1, -w)
    pos = np.concatenate([wave, omega * wave])
    neg = np.concatenate([wave, -omega * wave])
    assert np.abs(vp.c_plus @ pos - pos).max() < 1e-10
    assert np.abs(vp.c_plus @ neg).max() < 1e-10


def test_displayed_projection_differs_from_vacuum_projection(grid32):
    vp = sc.free_vacuum_projections(grid32, 1.0)
    assert vp.displayed_mismatch > 0.1
    assert vp.displayed_idempotence_defect > 0.1


def test_projections_need_positive_mass(grid32):
    with pytest.raises(ValueError, match="m > 0"):
        sc.free_vacuum_projections(grid32, 0.0)


def test_q_adjoint_is_an_involution(rng):
    n = 6
    M = rng.standard_normal((2 * n, 2 * n)) + 1j * rng.standard_normal((2 * n, 2 * n))
    d_out, d_in = rng.uniform(0.5, 2, n), rng.uniform(0.5, 2, n)
    back = sc.q_adjoint(sc.q_adjoint(M, d_out, d_in), d_in, d_out)
    assert np.abs(back - M).max() < 1e-12


# -- ladders


def test_geometric_ladder(short_slab):
    tg = ev.TimeGrid.build(40.0, 0.05, 1.5)
    idx = sc.geometric_ladder(tg)
    times = np.array([tg.time(j) for j in idx])
    assert times[0] == pytest.approx(2.5) and times[-1] == pytest.approx(40.0)
    assert np.all(np.diff(times) > 0)
    assert np.allclose(times[1:-1] / times[:-2], math.sqrt(2), rtol=0.02)


def test_fit_tail_on_power_law():
    times = 2.5 * math.sqrt(2) ** np.arange(9)
    values = [np.zeros((1, 1))]
    for t in times[:-1]:
        values.append(values[-1] + 0.3 * t ** -1.5)
    fit = sc.fit_tail(times, values)
    assert fit.slope == pytest.approx(-1.5, abs=1e-10)
    factor = math.sqrt(2) ** -1.5
    assert fit.tail == pytest.approx(0.3 * times[-2] ** -1.5 * factor / (1 - factor), rel=1e-10)
    assert fit.converged


# -- Moller operators


def test_free_wave_operators_are_identity(free_scattering):
    ms = free_scattering[0]
    assert np.array_equal(ms.W_out, np.eye(64)) and ms.tail == 0.0
    ops = sc.feynman_wave_ops(ms)
    assert ops.ratio(10) == 0.0
    assert np.abs(ops.K2_singular_values).max() < 1e-12


def test_bump_tail_slope(bump_scattering, bump15):
    ms = bump_scattering[0]
    for fit in ms.fits.values():
        assert abs(fit.slope + bump15.delta) < 0.3
    assert ms.converged


def test_bump_unitarity_and_inverse(bump_scattering):
    ms = bump_scattering[0]
    for side in ("out", "in"):
        assert ms.unitarity_residual(side) < 3 * ms.tail
        assert ms.inverse_consistency(side) < 3 * ms.tail


def test_bump_ad_route(bump_scattering):
    ms = bump_scattering[0]
    # the two routes differ by the untruncated tail of the ad ladder at finite T
    for side in ("out", "in"):
        assert ms.ad_consistency(side) < 1e-4


def test_unconverged_ladder_raises(bump15):
    # a slab ending inside the bump: increments still growing
    tg = ev.TimeGrid.build(1.0, 0.05, bump15.delta)
    with pytest.raises(sc.ConvergenceError, match="not below"):
        sc.moller(bump15, tg, t_min=0.1, require_convergence=True)


# -- scattering data


def test_free_data_are_the_initial_data(free_scattering, grid32):
    ms, bundle, full = free_scattering
    for v in _homogeneous_data(grid32, 2, 5):
        data = sc.scattering_data(ms, full, v)
        assert np.abs(data.rho_out - v).max() < 1e-8 * np.abs(v).max()
        assert np.abs(data.rho_in - v).max() < 1e-8 * np.abs(v).max()
        assert data.stable


def test_data_two_routes(bump_scattering, grid32):
    ms, bundle, full = bump_scattering
    for v in _homogeneous_data(grid32, 3, 6):
        data = sc.scattering_data(ms, full, v)
        alt = sc.data_via_wave_operators(ms, bundle, v, "out")
        assert sc._data_norm(ms.out_dyn, data.rho_out - alt) < 1e-4 * sc._data_norm(ms.out_dyn, data.rho_out)


def test_feynman_field_has_no_anti_feynman_data(bump_scattering, bump15, grid32):
    ms, bundle, _ = bump_scattering
    diag = ev.Evolution(bump15, ms.tg, "diag", bundle)
    for f in prop.random_sources(ms.tg, grid32, 2, seed=9):
        data = sc.field_scattering_data(ms, prop.apply_feynman(diag, f))
        fn = ev.slab_norm(ms.tg, f, diag.densities(), grid32.dx)
        assert sc._data_norm(ms.out_dyn, data.rho_Fbar) < 1e-3 * fn
        assert sc._data_norm(ms.out_dyn, data.rho_F) > 1e-2 * fn


# -- compactness


def test_compactness_proxy(bump_wave_ops):
    assert bump_wave_ops.ratio(10) < 0.1
    assert bump_wave_ops.low_frequency_ratio < 10


def test_smoothing_norms_stable_under_doubling(bump_wave_ops, bump15):
    half = sc.feynman_wave_ops(sc.moller(bump15, ev.TimeGrid.build(20.0, 0.05, bump15.delta)))
    for key, value in bump_wave_ops.smoothing_norms.items():
        assert abs(value / half.smoothing_norms[key] - 1) < 0.15, key


# -- index


def test_free_index(free_scattering):
    est = sc.index_estimate(free_scattering[0])
    assert est.index == 0 and est.kernel_dimension == 0 and est.confident


def test_bump_index(bump_scattering):
    ms = bump_scattering[0]
    est0 = sc.index_estimate(ms, order=0)
    est1 = sc.index_estimate(ms, order=1)
    assert est0.index == est1.index == 0
    assert est0.gap > 1e2
    assert sc.brute_force_index(sc.index_operator(ms)) == est0.index


@pytest.mark.parametrize("name", ["bump12", "bump20"])
def test_index_on_other_bumps(name):
    grid = SpatialGrid(16, 40.0)
    red = geo.reduce(geo.preset(name), grid)
    ms = sc.moller(red, ev.TimeGrid.build(20.0, 0.05, red.delta))
    est = sc.index_estimate(ms)
    assert est.index == 0 and est.confident
    assert sc.brute_force_index(sc.index_operator(ms)) == 0


def test_brute_force_index_on_constructed_matrices(rng):
    square = rng.standard_normal((16, 16))
    square[:, 3] = square[:, 5]
    assert sc.brute_force_index(square) == 0
    assert sc.brute_force_index(rng.standard_normal((16, 14))) == -2
    assert sc.brute_force_index(rng.standard_normal((14, 16))) == 2


def test_ambiguous_rank_raises(free_scattering):
    with pytest.raises(sc.AmbiguousRankError):
        sc.index_estimate(free_scattering[0], gap_required=1e300, strict=True)


# -- weighted propagation


def test_free_unweighted_propagation_is_unitary(free32):
    tg = ev.TimeGrid.build(20.0, 0.05, free32.delta)
    lad = sc.weighted_propagation_check(free32, tg, 0, 0)
    assert np.abs(lad.values - 1).max() < 1e-8


def test_free_weighted_propagation_is_bounded(free32):
    tg = ev.TimeGrid.build(20.0, 0.05, free32.delta)
    assert sc.weighted_propagation_check(free32, tg, 1, 1).sup < 3


def test_bump_weighted_propagation_does_not_grow(bump15, bump_scattering):
    ms, bundle, _ = bump_scattering
    lad = sc.weighted_propagation_check(bump15, ms.tg, 1, 1, bundle)
    early = lad.values[lad.times <= 20 + 1e-9].max()
    assert lad.sup / early - 1 < 0.1
