import math

import numpy as np
import pytest

from kgscatter import evolution as ev
from kgscatter import geometry as geo
from kgscatter import propagators as prop
from kgscatter.grid_ops import SpatialGrid


@pytest.fixture(scope="module")
def free_evolutions(free32, short_slab):
    bundle = ev.DiagonalizationBundle(free32, short_slab)
    return {flavor: ev.Evolution(free32, short_slab, flavor, bundle) for flavor in ("full", "ad", "diag")}


@pytest.fixture(scope="module")
def sources(short_slab, grid32):
    return prop.random_sources(short_slab, grid32, 10, seed=21)


def _windowed_source(tg, grid, lo, hi):
    f = np.zeros((tg.n_times, grid.n_points), dtype=complex)
    mask = (tg.times >= lo - 1e-12) & (tg.times <= hi + 1e-12)
    bump = np.sin(np.pi * (tg.times[mask] - lo) / (hi - lo)) ** 2
    f[mask] = bump[:, None] * np.exp(-grid.points ** 2 / 8)[None, :]
    return f


def test_retarded_support_is_exact(bump_evolutions, short_slab, grid32):
    f = _windowed_source(short_slab, grid32, 1.0, 3.0)
    first = int(np.flatnonzero(np.abs(f).sum(axis=1))[0])
    last = int(np.flatnonzero(np.abs(f).sum(axis=1))[-1])
    ret = prop.apply_retarded(bump_evolutions["full"], f)
    adv = prop.apply_advanced(bump_evolutions["full"], f)
    assert np.all(ret[:first] == 0) and np.any(ret[first + 1] != 0)
    assert np.all(adv[last + 1:] == 0) and np.any(adv[last - 1] != 0)


@pytest.mark.parametrize("mode", [1, 3, 6])
def test_retarded_mode_kernel_is_green_function(free_evolutions, short_slab, grid32, mode):
    s_index = short_slab.index_of(-1.0)
    g = prop.mode_kernel(lambda f: prop.apply_retarded(free_evolutions["full"], f), short_slab, grid32,
                         mode, s_index)
    omega = math.sqrt(grid32.wavenumbers[mode] ** 2 + 1)
    tau = short_slab.times - short_slab.times[s_index]
    theta = np.where(tau > 0, 1.0, np.where(tau == 0, 0.5, 0.0))
    assert np.abs(g - theta * np.sin(omega * tau) / omega).max() < 1e-8


def test_retarded_and_advanced_are_paired_adjoints(bump_evolutions, sources):
    assert prop.adjoint_pairing_residual(bump_evolutions["full"], sources) < 1e-6


def test_retarded_routes_agree(free_evolutions, bump_evolutions, sources):
    assert prop.retarded_route_residual(free_evolutions["full"], free_evolutions["ad"], sources[:3]) < 1e-8
    assert prop.retarded_route_residual(bump_evolutions["full"], bump_evolutions["ad"], sources[:3]) < 1e-5


@pytest.mark.parametrize("flavor", ["ret", "adv"])
def test_causal_inverses_on_bump(bump_evolutions, flavor):
    report = prop.inversion_report(flavor, bump_evolutions["full"], samples=3, seed=4)
    # five-point P against the trapezoid sums: O(dt^2) consistency error
    assert max(report.forward_residuals) < 5e-4
    assert max(report.backward_residuals) < 5e-4


def test_free_inversion_error_is_second_order(free32, grid32):
    residuals = []
    for dt in (0.05, 0.025, 0.0125):
        tg = ev.TimeGrid.build(5.0, dt, 1.5)
        evo = ev.Evolution(free32, tg, "full")
        f = prop.random_sources(tg, grid32, 1, seed=1)[0]
        residuals.append(prop.relative_residual(free32, tg, prop.apply_retarded(evo, f), f))
    for coarse, fine in zip(residuals, residuals[1:]):
        assert 3.5 < coarse / fine < 4.5


def test_free_flavors_share_the_same_residual(free_evolutions):
    reports = {flavor: prop.inversion_report(flavor, free_evolutions["diag" if flavor == "feyn" else "full"],
                                             samples=2, seed=8) for flavor in ("ret", "adv", "feyn")}
    base = np.array(reports["ret"].forward_residuals)
    for flavor in ("adv", "feyn"):
        assert np.allclose(reports[flavor].forward_residuals, base, rtol=1e-3)


def test_feynman_kernel_and_recursion_agree(bump_evolutions, sources):
    diag = bump_evolutions["diag"]
    for f in sources[:3]:
        a = prop.apply_feynman(diag, f)
        b = prop.apply_feynman(diag, f, kernel="kernel")
        assert np.abs(a - b).max() <= 1e-9 * np.abs(a).max()


def test_kernel_route_needs_diag_flavor(bump_evolutions, sources, short_slab):
    with pytest.raises(ValueError, match="diag"):
        prop.apply_feynman_ad_kernel(bump_evolutions["full"], np.zeros((short_slab.n_times, 64)))


def test_positive_frequency_source_propagates_forward(bump_evolutions, bump_bundle, sources):
    diag = bump_evolutions["diag"]
    f_ad = prop.transport_to_ad(bump_bundle, sources[0])
    f_ad[:, 32:] = 0
    got = prop.apply_feynman_ad(diag, f_ad)
    want = prop.apply_system_causal(diag, f_ad, True)
    assert np.array_equal(got, want)


def test_free_ad_feynman_mode_kernel(free_evolutions, short_slab, grid32):
    diag = free_evolutions["diag"]
    mode, n = 2, 32
    wave = grid32.plane_wave(mode)
    omega = math.sqrt(grid32.wavenumbers[mode] ** 2 + 1)
    s_index = short_slab.zero_index
    tau = short_slab.times
    theta = lambda x: np.where(x > 0, 1.0, np.where(x == 0, 0.5, 0.0))  # noqa: E731
    for block, sign in ((0, 1), (1, -1)):
        f = np.zeros((short_slab.n_times, 2 * n), dtype=complex)
        f[s_index, block * n:(block + 1) * n] = wave / short_slab.step
        g = prop.apply_feynman_ad(diag, f)
        comp = g[:, block * n:(block + 1) * n] @ wave.conj() / n
        other = g[:, (1 - block) * n:(2 - block) * n] @ wave.conj() / n
        want = sign * 1j * theta(sign * tau) * np.exp(sign * 1j * omega * tau)
        assert np.abs(comp - want).max() < 1e-10
        assert np.abs(other).max() < 1e-12


def test_ad_residual_tracks_v_ad(bump_evolutions, free_evolutions, bump_bundle, free_evolutions_bundle_sources):
    f = free_evolutions_bundle_sources
    bump = prop.ad_feynman_residual(bump_evolutions["diag"], prop.transport_to_ad(bump_bundle, f))
    free_diag = free_evolutions["diag"]
    free = prop.ad_feynman_residual(free_diag, prop.transport_to_ad(free_diag.bundle, f))
    assert free["ad_remainder_norm"] < 1e-12
    # what remains after removing V^ad is the same discretization error as in the free model
    assert bump["mismatch_norm"] == pytest.approx(free["residual_norm"], rel=0.05)
    assert bump["ad_remainder_norm"] > 10 * bump["mismatch_norm"]


@pytest.fixture(scope="module")
def free_evolutions_bundle_sources(sources):
    return sources[0]


def test_feynman_remainder_structure(bump_evolutions, sources):
    for f in sources[:3]:
        rem = prop.feynman_remainder(bump_evolutions["diag"], f)
        scale = math.sqrt(np.sum(np.abs(f) ** 2))
        assert rem.mismatch_norm < 1e-3 * rem.residual_norm + 1e-4 * scale
        assert rem.residual_norm == pytest.approx(rem.predicted_norm, rel=0.05)


def test_frame_round_trip_shear_free(bump15, short_slab, sources):
    for is_source in (True, False):
        field = prop.SpacetimeField(sources[0], short_slab.times, "model", is_source)
        back = field.to_frame(bump15, "original").to_frame(bump15, "model")
        assert np.abs(back.values - sources[0]).max() < 1e-12 * np.abs(sources[0]).max()


def test_frame_round_trip_with_shear():
    grid = SpatialGrid(256, 40.0)
    red = geo.reduce(geo.preset("shear15"), grid)
    times = np.array([-2.0, 0.5, 3.0])
    values = np.exp(-grid.points ** 2 / 8)[None, :] * np.array([1.0, 2.0, -1.0])[:, None]
    for is_source in (True, False):
        field = prop.SpacetimeField(values, times, "original", is_source)
        back = field.to_frame(red, "model").to_frame(red, "original")
        assert back.frame == "original"
        assert np.abs(back.values - values).max() < 1e-7 * np.abs(values).max()


def test_apply_in_frame_commutes_with_transport(bump15, bump_evolutions, short_slab, sources):
    apply = lambda f: prop.apply_feynman(bump_evolutions["diag"], f)  # noqa: E731
    original = prop.SpacetimeField(sources[1], short_slab.times, "model", True).to_frame(bump15, "original")
    got = prop.apply_in_frame(apply, bump15, original)
    want = prop.SpacetimeField(apply(sources[1]), short_slab.times, "model").to_frame(bump15, "original")
    assert got.frame == "original"
    assert np.abs(got.values - want.values).max() <= 1e-12 * np.abs(want.values).max()


def test_unknown_frame_rejected():
    with pytest.raises(ValueError, match="unknown frame"):
        prop.SpacetimeField(np.zeros((2, 2)), np.zeros(2), "lab")


@pytest.fixture(scope="module")
def tiny():
    out = {}
    grid = SpatialGrid(8, 40.0)
    tg = ev.TimeGrid.build(8.0, 0.5, 1.5)
    for name in ("free", "bump15"):
        red = geo.reduce(geo.preset(name), grid)
        bundle = ev.DiagonalizationBundle(red, tg)
        out[name] = (ev.Evolution(red, tg, "diag", bundle), ev.Evolution(red, tg, "full", bundle))
    return out


def test_free_feynman_form_is_rank_two_per_mode(tiny):
    diag, _ = tiny["free"]
    tg, grid = diag.tg, diag.reduced.grid
    mode = 1
    omega = math.sqrt(grid.wavenumbers[mode] ** 2 + 1)
    kernel = prop.scalar_kernel("feyn", diag)
    G = kernel.materialize()
    wave = grid.plane_wave(mode) / math.sqrt(grid.n_points)
    basis = np.kron(np.eye(tg.n_times), wave[:, None])
    mode_G = basis.conj().T @ G @ basis / tg.step
    form = 1j * (mode_G - mode_G.conj().T)
    tau = tg.times[:, None] - tg.times[None, :]
    assert np.abs(form - np.cos(omega * tau) / omega).max() < 1e-10
    c, s = np.cos(omega * tg.times), np.sin(omega * tg.times)
    assert np.abs(form - (np.outer(c, c) + np.outer(s, s)) / omega).max() < 1e-10
    res = prop.positivity_check(kernel, diag)
    assert res.min_eigenvalue >= -1e-10


def test_bump_feynman_form_is_positive(tiny):
    diag, _ = tiny["bump15"]
    res = prop.positivity_check(prop.scalar_kernel("feyn", diag), diag)
    assert res.min_eigenvalue >= -1e-8 * res.max_eigenvalue
    assert res.max_eigenvalue > 0


def test_retarded_form_is_indefinite(tiny):
    diag, full = tiny["bump15"]
    res = prop.positivity_check(prop.scalar_kernel("ret", full), full)
    assert res.relative_min < -1e-3


def test_dense_cap(tiny):
    diag, _ = tiny["free"]
    with pytest.raises(prop.CapExceeded, match="exceeds"):
        prop.scalar_kernel("feyn", diag).materialize(cap=64)


def test_kernel_block_matches_mode_kernel(tiny):
    diag, _ = tiny["free"]
    kernel = prop.scalar_kernel("feyn", diag)
    j, k = 3, 10
    block = kernel.block(j, k)
    unit = np.zeros((diag.tg.n_times, 8), dtype=complex)
    unit[k, 2] = 1.0 / diag.tg.step
    assert np.abs(prop.apply_feynman(diag, unit)[j] - block[:, 2]).max() < 1e-14


def test_mode_kernel_spectrum_peaks():
    grid = SpatialGrid(16, 40.0)
    red = geo.reduce(geo.preset("free"), grid)
    tg = ev.TimeGrid.build(60.0, 0.1, 1.5)
    diag = ev.Evolution(red, tg, "diag", ev.DiagonalizationBundle(red, tg))
    mode = 2
    omega = math.sqrt(grid.wavenumbers[mode] ** 2 + 1)
    g = prop.mode_kernel(lambda f: prop.apply_feynman(diag, f), tg, grid, mode, tg.zero_index)
    peaks = prop.spectrum_peaks(g * np.exp(-(tg.times / 30) ** 2), tg.step)
    assert abs(peaks["positive"] - omega) <= peaks["bin"]
    assert abs(peaks["negative"] + omega) <= peaks["bin"]
    # -1/(nu^2 - w^2 - i0): both poles carry the same sign of the i0 shift
    assert peaks["imag_sign_positive"] == peaks["imag_sign_negative"]
