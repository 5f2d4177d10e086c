import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kgscatter import evolution as ev
from kgscatter.grid_ops import fourier_derivative, multiplier_matrix, smoothed_random_field
from kgscatter.propagators import random_sources, relative_residual


def test_gamma_outside_interval_is_named():
    with pytest.raises(ev.ConfigurationError, match=r"1/2 < γ < 1/2 \+ δ"):
        ev.TimeGrid.build(10.0, 0.5, 1.5, gamma=2.1)
    with pytest.raises(ev.ConfigurationError):
        ev.TimeGrid.build(10.0, 0.5, 1.5, gamma=0.5)


def test_step_must_divide_half_width():
    with pytest.raises(ev.ConfigurationError, match="does not divide"):
        ev.TimeGrid.build(10.0, 0.3, 1.5)


@settings(max_examples=30, deadline=None)
@given(delta=st.floats(1.01, 3.0))
def test_default_gamma_is_admissible(delta):
    lo, hi = ev.admissible_gamma_interval(delta)
    assert lo < ev.default_gamma(delta) < hi


@settings(max_examples=30, deadline=None)
@given(half=st.integers(1, 400), step=st.sampled_from([0.01, 0.025, 0.05, 0.1, 0.5]))
def test_time_grid_is_symmetric_with_zero(half, step):
    tg = ev.TimeGrid.build(half * step, step, 1.5)
    assert tg.times[tg.zero_index] == 0.0
    assert np.allclose(tg.times, -tg.times[::-1], rtol=0, atol=1e-12)
    assert tg.index_of(tg.times[-1]) == tg.n_times - 1


def test_off_grid_time_rejected():
    with pytest.raises(ValueError, match="not on the grid"):
        ev.TimeGrid.build(1.0, 0.1, 1.5).index_of(0.05)


def test_free_generator(free32, grid32):
    H = ev.build_generator(free32, 3.0)
    n = 32
    a = -fourier_derivative(grid32, 2).matrix + np.eye(n)
    assert np.abs(H[:n, :n]).max() == 0 and np.array_equal(H[:n, n:], np.eye(n))
    assert np.abs(H[n:, :n] - a).max() < 1e-10 and np.abs(H[n:, n:]).max() == 0


def test_generator_mode_projection(free32, grid32):
    idx = 3
    wave = grid32.plane_wave(idx) / math.sqrt(32)
    omega2 = grid32.wavenumbers[idx] ** 2 + 1
    basis = np.zeros((64, 2), dtype=complex)
    basis[:32, 0] = wave
    basis[32:, 1] = wave
    reduced = basis.conj().T @ ev.build_generator(free32, 0.0) @ basis
    assert np.abs(reduced - np.array([[0, 1], [omega2, 0]])).max() < 1e-10


@pytest.mark.parametrize("t", [0.0, 2.5, -7.0])
def test_generator_charge_identity(bump15, t):
    H = ev.build_generator(bump15, t)
    res = ev.generator_residual(H, bump15.density(t), bump15.damping(t))
    assert res < 1e-10 * np.linalg.norm(H, 2)


def test_free_stepper_matches_closed_form_modes(free32, grid32):
    tg = ev.TimeGrid.build(40.0, 0.01, 1.5)
    evo = ev.Evolution(free32, tg, "full")
    waves = np.stack([grid32.plane_wave(m) for m in (1, 4, 9)], axis=1)
    omegas = np.sqrt(grid32.wavenumbers[[1, 4, 9]] ** 2 + 1)
    start = np.concatenate([waves, np.zeros_like(waves)]).astype(complex)
    marks = [tg.index_of(t) for t in (-40.0, -13.0, 7.0, 40.0)]
    _, upper = evo.run_flat(start, tg.zero_index, tg.n_times - 1, record=marks)
    _, lower = evo.run_flat(start, tg.zero_index, 0, record=marks)
    for j, col in {**upper, **lower}.items():
        t = tg.time(j)
        exact = np.concatenate([np.cos(omegas * t) * waves, 1j * omegas * np.sin(omegas * t) * waves])
        assert np.abs(col - exact).max() < 1e-8


def test_identity_at_coincident_times(bump_evolutions, short_slab):
    for flavor, evo in bump_evolutions.items():
        j = short_slab.index_of(1.5)
        assert np.abs(evo.matrix(j, j) - np.eye(64)).max() < 1e-15, flavor


def test_group_property(bump_evolutions, short_slab):
    evo = bump_evolutions["full"]
    rng = np.random.default_rng(7)
    for _ in range(20):
        t, s, r = (int(i) for i in rng.integers(0, short_slab.n_times, size=3))
        lhs = evo.matrix(t, s) @ evo.matrix(s, r)
        assert np.linalg.norm(lhs - evo.matrix(t, r), 2) < 1e-7


@pytest.mark.parametrize("flavor", ["full", "ad", "diag"])
def test_symplectic_conservation(bump_evolutions, short_slab, flavor):
    indices = range(0, short_slab.n_times, 20)
    assert ev.symplectic_residual(bump_evolutions[flavor], indices) < 1e-6


def test_diag_evolution_adjoint_relation(bump_evolutions, short_slab):
    evo = bump_evolutions["diag"]
    z = short_slab.zero_index
    for t in (-5.0, 2.0, 5.0):
        j = short_slab.index_of(t)
        adj = ev.block_adjoint(evo.matrix(j, z), evo.density(j), evo.density(z))
        assert np.linalg.norm(adj - evo.matrix(z, j), 2) < 1e-7


def test_ad_stepper_matches_conjugated_full_evolution(bump_evolutions, bump_bundle, short_slab):
    ends = [0, short_slab.n_times - 1]
    conj = ev.conjugated_ad_columns(bump_evolutions["full"], bump_bundle, ends)
    direct = bump_evolutions["ad"].columns(ends)
    for j in ends:
        assert np.linalg.norm(conj[j] - direct[j], 2) / np.linalg.norm(direct[j], 2) < 1e-4


def test_backward_table_inverts_forward(bump_evolutions, short_slab):
    table = ev.evolution_table(bump_evolutions["full"], [0, 50, 400])
    for j in table.forward:
        assert np.linalg.norm(table.backward[j] @ table.forward[j] - np.eye(64), 2) < 1e-6


def test_free_bundle(free32, grid32):
    bundle = ev.DiagonalizationBundle(free32, ev.TimeGrid.build(5.0, 0.05, 1.5))
    want = multiplier_matrix(grid32, np.sqrt(grid32.wavenumbers ** 2 + 1))
    for t in (-2.0, 0.0, 3.0):
        assert np.abs(bundle.eps(t) - want).max() < 1e-10
        assert np.abs(bundle.r_inf(t, 1)).max() < 1e-10
        assert np.abs(bundle.V_ad(t)).max() < 1e-10
        plus, minus = bundle.eps_pm(t)
        assert np.abs(plus - want).max() < 1e-10 and np.abs(minus + want).max() < 1e-10


@pytest.mark.parametrize("t", [-4.0, 0.0, 1.7])
def test_bundle_invariants(bump_bundle, bump15, t):
    dens = bump15.density(t)
    n = 32
    assert np.abs(bump_bundle.b(t, -1) + ev.block_adjoint(
        np.kron(np.eye(2), bump_bundle.b(t, 1)), dens, dens)[:n, :n]).max() < 1e-12
    T, T_inv = bump_bundle.T(t), bump_bundle.T_inv(t)
    assert np.linalg.norm(T @ T_inv - np.eye(2 * n), 2) < 1e-11
    lhs = ev.block_adjoint(T, dens, dens) @ ev.charge_form(n) @ T
    assert np.linalg.norm(lhs - ev.charge_form_ad(n), 2) < 1e-11
    gap = bump_bundle.node(t).b_plus - bump_bundle.node(t).b_minus
    assert np.linalg.eigvalsh(0.5 * (gap + gap.conj().T)).min() > 0


def test_ad_generator_splits_exactly(bump_bundle):
    gen = bump_bundle.generator_ad(0.8)
    assert np.abs(gen.H_d - gen.V_ad - gen.H_ad).max() < 1e-13
    n = 32
    assert np.abs(gen.V_ad[:n, :n] + gen.V_ad[:n, :n].conj().T).max() < 1e-13


def test_refinement_reduces_remainder(bump15, short_slab):
    plain = ev.DiagonalizationBundle(bump15, short_slab, refine=0)
    refined = ev.DiagonalizationBundle(bump15, short_slab, refine=1)
    # the preset is even in t, so the unrefined remainder vanishes at t = 0
    assert np.linalg.norm(plain.r_inf(0.0, 1), 2) < 1e-12
    for t in (1.0, 2.0, 4.0):
        assert np.linalg.norm(plain.r_inf(t, 1), 2) >= 2 * np.linalg.norm(refined.r_inf(t, 1), 2)


def test_negative_refinement_rejected(bump15, short_slab):
    with pytest.raises(ValueError):
        ev.DiagonalizationBundle(bump15, short_slab, refine=-1)


def test_decay_diagnostics_on_bump(bump15):
    bundle = ev.DiagonalizationBundle(bump15, ev.TimeGrid.build(40.0, 0.05, 1.5))
    fits = ev.decay_diagnostics(bundle)
    delta = 1.5
    assert fits["sqrt_difference"].slope <= -delta + 0.15
    assert fits["V_ad"].slope <= -1 - delta + 0.3
    assert max(fits["eps_plus"].slope, fits["eps_minus"].slope) <= -1 - delta + 0.3


def test_zero_source_gives_homogeneous_evolution(bump_evolutions, short_slab, grid32):
    evo = bump_evolutions["full"]
    rng = np.random.default_rng(3)
    v = np.concatenate([smoothed_random_field(grid32, rng), smoothed_random_field(grid32, rng)])
    u = ev.solve_inhomogeneous(evo, v, None)
    for t in (-5.0, 3.0):
        j = short_slab.index_of(t)
        assert np.abs(u[j] - (evo.matrix(j, short_slab.zero_index) @ v)[:32]).max() < 1e-10


def test_duhamel_residual_on_bump(bump15, grid32):
    tg = ev.TimeGrid.build(10.0, 0.02, 1.5)
    evo = ev.Evolution(bump15, tg, "full")
    rng = np.random.default_rng(11)
    v = 1e-2 * np.concatenate([smoothed_random_field(grid32, rng), smoothed_random_field(grid32, rng)])
    for f in random_sources(tg, grid32, 2, seed=5):
        u = ev.solve_inhomogeneous(evo, v, f)
        assert relative_residual(bump15, tg, u, f) < 1e-4


def _dense_spacetime_solve(evo, datum, source):
    """Solve the trapezoid Duhamel recursion as one block linear system."""
    tg, n = evo.tg, evo.n
    nt, z, c = tg.n_times, tg.zero_index, tg.step / 2
    size = 2 * n
    eye = np.eye(size, dtype=complex)
    roots = evo.roots()
    g = [np.concatenate([np.zeros(n), roots[j] * source[j]]) for j in range(nt)]
    A = np.zeros((nt * size, nt * size), dtype=complex)
    b = np.zeros(nt * size, dtype=complex)
    block = lambda j: slice(j * size, (j + 1) * size)  # noqa: E731
    A[block(z), block(z)] = eye
    b[block(z)] = np.concatenate([roots[z], roots[z]]) * datum
    for j in range(z, nt - 1):
        S = evo.step_flat(eye, j, True)
        A[block(j + 1), block(j + 1)] = eye
        A[block(j + 1), block(j)] = -S
        b[block(j + 1)] = -1j * c * (S @ g[j] + g[j + 1])
    for j in range(z, 0, -1):
        S = evo.step_flat(eye, j - 1, False)
        A[block(j - 1), block(j - 1)] = eye
        A[block(j - 1), block(j)] = -S
        b[block(j - 1)] = 1j * c * (S @ g[j] + g[j - 1])
    Y = np.linalg.solve(A, b).reshape(nt, size)
    return Y[:, :n] / roots


def test_tiny_instance_against_dense_solve():
    from kgscatter import geometry as geo
    from kgscatter.grid_ops import SpatialGrid

    grid = SpatialGrid(8, 20.0)
    red = geo.reduce(geo.preset("bump15"), grid)
    tg = ev.TimeGrid.build(0.8, 0.1, 1.5)
    assert tg.n_times - 1 == 16
    evo = ev.Evolution(red, tg, "full")
    rng = np.random.default_rng(2)
    datum = rng.standard_normal(16) + 1j * rng.standard_normal(16)
    source = rng.standard_normal((tg.n_times, 8)) + 1j * rng.standard_normal((tg.n_times, 8))
    got = ev.solve_inhomogeneous(evo, datum, source)
    want = _dense_spacetime_solve(evo, datum, source)
    assert np.abs(got - want).max() / np.abs(want).max() < 1e-9
