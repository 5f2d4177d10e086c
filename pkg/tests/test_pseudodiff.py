import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from kgscatter.grid_ops import GridOperator, OperatorFamily, SpatialGrid, fourier_derivative, multiplier_matrix
from kgscatter.pseudodiff import (
    PositivityError,
    PowerRoutine,
    QuadratureError,
    Symbol,
    WeightConfig,
    contour_constant,
    decay_exponent_fit,
    fractional_power_contour,
    fractional_power_spectral,
    weyl_quantize,
)

GRID = SpatialGrid(64, 40.0)
MASS = 1.0


def free_operator(grid=GRID, mass=MASS):
    return GridOperator(-fourier_derivative(grid, 2).matrix + mass ** 2 * np.eye(grid.n_points), grid,
                        claimed_order=2.0)


def test_weyl_multiplier_case():
    op = weyl_quantize(Symbol(lambda t, x, k: k ** 2 + 0 * x, 2.0), 0.7, GRID)
    assert np.abs(op.matrix + fourier_derivative(GRID, 2).matrix).max() < 1e-10


def test_weyl_of_one_is_identity():
    op = weyl_quantize(Symbol(lambda t, x, k: np.ones_like(x * k)), 0.0, GRID)
    assert np.abs(op.matrix - np.eye(64)).max() < 1e-12


def test_weyl_of_position_is_diagonal():
    op = weyl_quantize(Symbol(lambda t, x, k: np.cos(x) + 0 * k), 0.0, GRID)
    assert np.abs(op.matrix - np.diag(np.cos(GRID.points))).max() < 1e-12


def test_weyl_of_x_times_k_is_symmetrized_product():
    op = weyl_quantize(Symbol(lambda t, x, k: x * k, 1.0), 0.0, GRID)
    X = np.diag(GRID.points)
    D = -1j * fourier_derivative(GRID, 1).matrix
    assert np.abs(op.matrix - 0.5 * (X @ D + D @ X)).max() < 1e-8
    assert np.abs(op.matrix - op.matrix.conj().T).max() < 1e-10


@settings(max_examples=15, deadline=None)
@given(a=st.floats(-2, 2), b=st.floats(0.1, 3), c=st.floats(-1, 1))
def test_weyl_of_real_symbol_is_hermitian(a, b, c):
    sym = Symbol(lambda t, x, k: a * np.exp(-x ** 2 / b) * k ** 2 + c * np.sin(x) * k + x ** 2 / 50)
    mat = weyl_quantize(sym, 0.0, SpatialGrid(32, 20.0)).matrix
    assert np.abs(mat - mat.conj().T).max() <= 1e-10 * max(1.0, np.abs(mat).max())


def test_power_one_returns_operator():
    A = free_operator()
    assert np.abs(fractional_power_spectral(A, 1.0).matrix - A.matrix).max() < 1e-12 * np.abs(A.matrix).max()


def test_square_root_of_four():
    A = GridOperator(4 * np.eye(64), GRID)
    assert np.abs(fractional_power_spectral(A, 0.5).matrix - 2 * np.eye(64)).max() < 1e-13


def test_free_square_root_is_fourier_multiplier():
    root = fractional_power_spectral(free_operator(), 0.5).matrix
    want = multiplier_matrix(GRID, np.sqrt(GRID.wavenumbers ** 2 + MASS ** 2))
    for idx in range(64):
        wave = GRID.plane_wave(idx)
        assert np.abs(root @ wave - want @ wave).max() < 1e-10


def test_non_positive_operator_rejected():
    A = GridOperator(np.diag(np.linspace(-1, 1, 64)), GRID)
    with pytest.raises(PositivityError):
        fractional_power_spectral(A, 0.5)
    with pytest.raises(PositivityError):
        fractional_power_contour(A, -0.5)


def test_spectral_floor_is_reported():
    _, c0 = fractional_power_spectral(free_operator(), -0.5, return_floor=True)
    assert c0 == pytest.approx(MASS ** 2, rel=1e-10)


def test_contour_constant_matches_scalar_quadrature():
    # solve 4^{-1/2} = C * int_0^inf (4+s)^{-1} s^{-1/2} ds for C
    integral, _ = integrate.quad(lambda s: 1.0 / ((4 + s) * math.sqrt(s)), 0, np.inf,
                                 epsabs=1e-13, epsrel=1e-13)
    assert contour_constant(-0.5) == pytest.approx(0.5 / integral, rel=1e-10)


@pytest.mark.parametrize("alpha", [-0.2, -0.5, -0.8])
def test_contour_constant_general(alpha):
    # s = e^u removes the endpoint singularity
    integral, _ = integrate.quad(lambda u: math.exp((alpha + 1) * u) / (4 + math.exp(u)), -200, 200,
                                 epsabs=1e-13, epsrel=1e-12, limit=400)
    assert contour_constant(alpha) * integral == pytest.approx(4 ** alpha, rel=1e-8)


def test_contour_scalar_calibration():
    A = GridOperator(4 * np.eye(8, dtype=complex), SpatialGrid(8, 4.0))
    out = fractional_power_contour(A, -0.5).matrix
    assert np.abs(out - 0.5 * np.eye(8)).max() < 1e-9


@pytest.mark.parametrize("alpha", [-0.25, -0.5, -0.75])
def test_contour_of_identity(alpha):
    A = GridOperator(np.eye(16, dtype=complex), SpatialGrid(16, 4.0))
    assert np.abs(fractional_power_contour(A, alpha).matrix - np.eye(16)).max() < 1e-9


@pytest.mark.parametrize("alpha", [-0.5, -0.25, 0.5, 1.5])
def test_contour_agrees_with_spectral_on_free_operator(alpha):
    A = free_operator()
    spectral = fractional_power_spectral(A, alpha).matrix
    contour = fractional_power_contour(A, alpha).matrix
    assert np.linalg.norm(contour - spectral, 2) / np.linalg.norm(spectral, 2) < 1e-6


def test_contour_self_check_raises_on_too_few_nodes():
    with pytest.raises(QuadratureError, match="unstable"):
        fractional_power_contour(free_operator(), -0.5, PowerRoutine(quadrature_nodes=6))


def test_contour_report_fields():
    _, report = fractional_power_contour(free_operator(), 0.5, return_report=True)
    assert report["shift"] == 1 and report["beta"] == pytest.approx(-0.5)
    assert report["self_check"] < 1e-5


@settings(max_examples=20, deadline=None)
@given(alpha=st.floats(-1, 1), beta=st.floats(-1, 1))
def test_spectral_semigroup_law(alpha, beta):
    A = free_operator(SpatialGrid(24, 20.0))
    lhs = fractional_power_spectral(A, alpha).matrix @ fractional_power_spectral(A, beta).matrix
    rhs = fractional_power_spectral(A, alpha + beta).matrix
    assert np.linalg.norm(lhs - rhs, 2) <= 1e-9 * np.linalg.norm(rhs, 2)


@settings(max_examples=15, deadline=None)
@given(alpha=st.floats(-1, 1), beta=st.floats(-1, 1))
def test_spectral_power_of_power(alpha, beta):
    A = free_operator(SpatialGrid(24, 20.0))
    inner = fractional_power_spectral(A, alpha)
    lhs = fractional_power_spectral(inner, beta).matrix
    rhs = fractional_power_spectral(A, alpha * beta).matrix
    assert np.linalg.norm(lhs - rhs, 2) <= 1e-9 * np.linalg.norm(rhs, 2)


def _times():
    return np.geomspace(1.0, 60.0, 12)


def test_decay_fit_recovers_constructed_scaling():
    rng = np.random.default_rng(5)
    B = rng.standard_normal((64, 64))
    fam = OperatorFamily.from_callable(lambda t: (1 + t * t) ** -0.75 * B, _times(), GRID)
    fit = decay_exponent_fit(fam)
    assert fit.slope == pytest.approx(-1.5, abs=0.1)
    assert not fit.flagged


def test_decay_fit_of_constant_family():
    fam = OperatorFamily.from_callable(lambda t: np.eye(64), _times(), GRID)
    assert decay_exponent_fit(fam).slope == pytest.approx(0.0, abs=0.05)


def test_decay_fit_needs_enough_samples():
    fam = OperatorFamily.from_callable(lambda t: np.eye(64), [1.0, 2.0, 3.0], GRID)
    with pytest.raises(ValueError, match="at least"):
        decay_exponent_fit(fam)


def test_decay_fit_needs_a_decade():
    fam = OperatorFamily.from_callable(lambda t: np.eye(64), np.linspace(1, 3, 10), GRID)
    with pytest.raises(ValueError, match="decade"):
        decay_exponent_fit(fam)


def test_decay_fit_flags_noise():
    rng = np.random.default_rng(6)
    scales = rng.random(12) + 0.01
    fam = OperatorFamily.from_callable(lambda t: scales[int(np.argmin(abs(_times() - t)))] * np.eye(64),
                                       _times(), GRID)
    fit = decay_exponent_fit(fam)
    assert fit.flagged and fit.reasons


@pytest.mark.parametrize("delta", [1.2, 1.5, 2.0])
def test_square_root_difference_decays(delta):
    a2 = free_operator()
    bump = np.diag(np.exp(-GRID.points ** 2 / 4)).astype(complex)
    root2 = fractional_power_spectral(a2, 0.5).matrix

    def difference(t):
        a1 = a2.matrix + (1 + t * t) ** (-delta / 2) * bump
        return fractional_power_spectral(a1, 0.5) - root2

    fam = OperatorFamily.from_callable(difference, _times(), GRID)
    fit = decay_exponent_fit(fam, WeightConfig(left_frequency=0.5, right_frequency=0.5))
    assert fit.slope <= -delta + 0.15
