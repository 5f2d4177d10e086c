"""Weyl quantization, fractional powers and decay-slope diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .grid_ops import (
    GridOperator,
    OperatorFamily,
    SpatialGrid,
    _matrix_of,
    _values_of,
    multiplier_matrix,
    sobolev_multiplier,
)


class PositivityError(ValueError):
    """Raised when an operator that must be uniformly positive is not."""


class QuadratureError(RuntimeError):
    pass


@dataclass(frozen=True)
class Symbol:
    """Time-dependent phase-space function ``a(t, x, k)`` (vectorized)."""

    evaluator: Callable[[float, np.ndarray, np.ndarray], np.ndarray]
    claimed_m: float = 0.0
    claimed_delta: float = 0.0
    polyhomogeneous: bool = False

    def __call__(self, t, x, k):
        return self.evaluator(t, x, k)


def weyl_quantize(sym: Symbol, t: float, grid: SpatialGrid) -> GridOperator:
    """Matrix of the Weyl quantization of ``sym`` at time ``t``.

    Entry ``(i, j)`` is ``(1/n) sum_k exp(i k (x_i - x_j)) a(t, (x_i + x_j)/2, k)``,
    i.e. the kernel ``(1/L) sum_k ...`` times the quadrature weight ``dx``.
    The midpoint ranges over the doubled grid ``-L/2 + p*dx/2`` in the
    unwrapped chart, and the Nyquist row is split evenly between ``+-k_N``.
    """
    n = grid.n_points
    k = grid.wavenumbers
    nyq = grid.nyquist_index
    ks = k.copy()
    weights = np.ones(n)
    if nyq is not None:
        ks = np.append(k, -k[nyq])
        weights = np.append(weights, 0.0)
        weights[nyq] = 0.5
        weights[-1] = 0.5
    mid = -0.5 * grid.box_length + 0.5 * grid.dx * np.arange(2 * n - 1)
    table = np.asarray(sym(t, mid[:, None], ks[None, :]), dtype=complex)
    table = np.broadcast_to(table, (2 * n - 1, ks.size)) * weights[None, :]
    offsets = grid.dx * np.arange(-(n - 1), n)
    phases = np.exp(1j * offsets[:, None] * ks[None, :])
    idx = np.arange(n)
    diff = idx[:, None] - idx[None, :] + (n - 1)
    total = idx[:, None] + idx[None, :]
    out = np.empty((n, n), dtype=complex)
    for i in range(n):
        out[i] = np.einsum("jk,jk->j", phases[diff[i]], table[total[i]])
    return GridOperator(out / n, grid, claimed_order=sym.claimed_m, claimed_decay=sym.claimed_delta)


# ----------------------------------------------------------------------------
# Fractional powers


def _weighted_hermitian_form(mat: np.ndarray, density: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    root = np.sqrt(density)
    herm = root[:, None] * mat / root[None, :]
    return 0.5 * (herm + herm.conj().T), root


def weighted_eigh(A, density=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Eigenpairs of an operator self-adjoint for the density-weighted product.

    Returns ``(eigvals, vecs, root)`` with ``A = root^{-1} V diag(w) V^H root``.
    """
    mat = _matrix_of(A)
    n = mat.shape[0]
    dens = np.ones(n) if density is None else np.asarray(_values_of(density), dtype=float).real
    herm, root = _weighted_hermitian_form(mat, dens)
    w, vecs = np.linalg.eigh(herm)
    return w, vecs, root


def function_of_operator(w: np.ndarray, vecs: np.ndarray, root: np.ndarray,
                         fn: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    inner = (vecs * fn(w)[None, :]) @ vecs.conj().T
    return inner * (1.0 / root)[:, None] * root[None, :]


def fractional_power_spectral(A, alpha: float, density=None, floor: float = 1e-10,
                              return_floor: bool = False):
    """``A^alpha`` through the density-weighted eigendecomposition.

    Raises :class:`PositivityError` if the smallest eigenvalue is ``<= floor``.
    """
    w, vecs, root = weighted_eigh(A, density)
    c0 = float(w.min())
    if c0 <= floor:
        raise PositivityError(f"operator is not uniformly positive: min eigenvalue {c0:.3e}")
    out = function_of_operator(w, vecs, root, lambda lam: lam ** alpha)
    if isinstance(A, GridOperator):
        out = GridOperator(out, A.grid, claimed_order=alpha * A.claimed_order,
                           selfadjoint_wrt=density)
    return (out, c0) if return_floor else out


@dataclass(frozen=True)
class PowerRoutine:
    mode: str = "contour"
    quadrature_nodes: int = 200
    alpha: float = -0.5
    lower_factor: float = 1e-6
    upper_factor: float = 1e6
    truncation_tol: float = 1e-13
    tail_correction: bool = False
    self_check_tol: float = 1e-5

    def window(self, beta: float, c0: float, lam_max: float) -> tuple[float, float]:
        """Integration limits in ``s``.

        The integrand behaves like ``s^beta`` near 0 and ``s^(beta-1)`` at
        infinity, so the nominal factors leave a truncation error of order
        ``factor^(1+beta)`` and ``factor^beta``.  The limits are widened
        until both end pieces fall below ``truncation_tol``.
        """
        lower = min(self.lower_factor, self.truncation_tol ** (1.0 / (1.0 + beta)))
        upper = max(self.upper_factor, self.truncation_tol ** (1.0 / beta))
        return lower * c0, upper * lam_max


def contour_constant(alpha: float) -> float:
    """Normalization making ``C int_0^inf (a+s)^{-1} s^alpha ds = a^alpha`` for ``-1 < alpha < 0``."""
    return -math.sin(math.pi * alpha) / math.pi


def _contour_sum(mat: np.ndarray, alpha: float, s_min: float, s_max: float,
                 nodes: int, tail: bool) -> np.ndarray:
    n = mat.shape[0]
    eye = np.eye(n, dtype=complex)
    u = np.linspace(math.log(s_min), math.log(s_max), nodes)
    du = u[1] - u[0]
    acc = np.zeros((n, n), dtype=complex)
    for q, uq in enumerate(u):
        s = math.exp(uq)
        weight = du * (0.5 if q in (0, nodes - 1) else 1.0) * s ** (alpha + 1.0)
        acc += weight * np.linalg.solve(mat + s * eye, eye)
    if tail:
        inv = np.linalg.solve(mat, eye)
        # small-s piece: (A+s)^{-1} = A^{-1} - s A^{-2} + ...
        acc += inv * s_min ** (alpha + 1) / (alpha + 1) - inv @ inv * s_min ** (alpha + 2) / (alpha + 2)
        # large-s piece: (A+s)^{-1} = s^{-1} - A s^{-2} + ...
        acc += eye * s_max ** alpha / (-alpha) - mat * s_max ** (alpha - 1) / (1 - alpha)
    return contour_constant(alpha) * acc


def fractional_power_contour(A, alpha: float, routine: Optional[PowerRoutine] = None,
                             density=None, return_report: bool = False):
    """``A^alpha`` from the resolvent integral, without any eigendecomposition of ``A``.

    The quadrature window comes from power and inverse-power iteration, so
    this route never touches an eigendecomposition of ``A``.
    """
    routine = routine or PowerRoutine(alpha=alpha)
    mat = np.asarray(_matrix_of(A), dtype=complex)
    if float(alpha).is_integer():
        out = _integer_power(mat, int(alpha))
        return (out, {"nodes": 0, "self_check": 0.0}) if return_report else out
    # alpha = p + beta with beta in (-1, 0)
    p = math.ceil(alpha)
    beta = alpha - p
    lam_max, c0 = _spectral_bounds(mat, density)
    if c0 <= 1e-10:
        raise PositivityError(f"operator is not uniformly positive: lower bound {c0:.3e}")
    s_min, s_max = routine.window(beta, c0, lam_max)
    q = routine.quadrature_nodes
    coarse = _contour_sum(mat, beta, s_min, s_max, q, routine.tail_correction)
    fine = _contour_sum(mat, beta, s_min, s_max, 2 * q, routine.tail_correction)
    disagreement = float(np.linalg.norm(fine - coarse) / np.linalg.norm(fine))
    if disagreement > routine.self_check_tol:
        raise QuadratureError(
            f"contour quadrature unstable: Q vs 2Q relative difference {disagreement:.2e}")
    out = _integer_power(mat, p) @ fine if p != 0 else fine
    report = {"nodes": q, "self_check": disagreement, "beta": beta, "shift": p,
              "s_min": s_min, "s_max": s_max}
    if isinstance(A, GridOperator):
        out = GridOperator(out, A.grid, claimed_order=alpha * A.claimed_order)
    return (out, report) if return_report else out


def _integer_power(mat: np.ndarray, p: int) -> np.ndarray:
    if p >= 0:
        return np.linalg.matrix_power(mat, p)
    return np.linalg.matrix_power(np.linalg.inv(mat), -p)


def _spectral_bounds(mat: np.ndarray, density=None, iters: int = 200) -> tuple[float, float]:
    """Upper bound via power iteration, lower bound via inverse power iteration."""
    n = mat.shape[0]
    dens = np.ones(n) if density is None else np.asarray(_values_of(density), dtype=float).real
    rng = np.random.default_rng(0)
    vec = rng.standard_normal(n) + 0j

    def rayleigh(v, w):
        return float(np.real(np.vdot(v, dens * w)) / np.real(np.vdot(v, dens * v)))

    v = vec.copy()
    lam_max = 0.0
    for _ in range(iters):
        w = mat @ v
        lam_max = rayleigh(v, w)
        v = w / np.linalg.norm(w)
    lu_inv = np.linalg.inv(mat)
    v = vec.copy()
    mu = 0.0
    for _ in range(iters):
        w = lu_inv @ v
        mu = rayleigh(v, w)
        v = w / np.linalg.norm(w)
    c0 = 1.0 / mu if mu > 0 else -1.0
    # power iteration converges from below; pad the window generously
    return 2.0 * abs(lam_max), 0.5 * c0


# ----------------------------------------------------------------------------
# Decay fits


@dataclass
class DecayFit:
    slope: float
    stderr: float
    r2: float
    times: np.ndarray
    values: np.ndarray
    flagged: bool
    reasons: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"slope": self.slope, "stderr": self.stderr, "r2": self.r2,
                "flagged": self.flagged, "reasons": list(self.reasons)}


@dataclass(frozen=True)
class WeightConfig:
    left_frequency: float = 0.0
    right_frequency: float = 0.0
    left_position: float = 0.0
    right_position: float = 0.0
    window: float = 0.25


def loglog_slope(xs: np.ndarray, ys: np.ndarray) -> tuple[float, float, float]:
    """Least-squares slope of ``log y`` against ``log x`` with stderr and R^2."""
    lx = np.log(np.asarray(xs, dtype=float))
    ly = np.log(np.asarray(ys, dtype=float))
    design = np.vstack([lx, np.ones_like(lx)]).T
    coef, *_ = np.linalg.lstsq(design, ly, rcond=None)
    resid = ly - design @ coef
    dof = max(len(lx) - 2, 1)
    ss_res = float(resid @ resid)
    ss_tot = float(((ly - ly.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    sxx = float(((lx - lx.mean()) ** 2).sum())
    stderr = math.sqrt(ss_res / dof / sxx) if sxx > 0 else float("inf")
    return float(coef[0]), stderr, r2


def weighted_window_norm(mat: np.ndarray, grid: SpatialGrid, config: WeightConfig) -> float:
    left = multiplier_matrix(grid, sobolev_multiplier(grid, -config.left_frequency))
    right = multiplier_matrix(grid, sobolev_multiplier(grid, -config.right_frequency))
    xw = (1.0 + grid.points ** 2)
    core = left @ mat @ right
    core = (xw ** (config.left_position / 2))[:, None] * core * (xw ** (config.right_position / 2))[None, :]
    mask = grid.interior_mask(config.window)
    return float(np.linalg.norm(core[np.ix_(mask, mask)], 2))


def decay_exponent_fit(family: OperatorFamily, config: Optional[WeightConfig] = None,
                       min_samples: int = 8) -> DecayFit:
    """Slope of ``log ||<D>^{-m} F(t) <D>^{-m'}||_window`` against ``log <t>``."""
    config = config or WeightConfig()
    times = np.asarray(family.times, dtype=float)
    brackets = np.sqrt(1.0 + times ** 2)
    if len(times) < min_samples:
        raise ValueError(f"need at least {min_samples} sample times, got {len(times)}")
    if brackets.max() / brackets.min() < 10.0 - 1e-9:
        raise ValueError("sample times must span at least one decade of <t>")
    values = np.array([weighted_window_norm(np.asarray(m), family.grid, config)
                       for m in family.matrices])
    return fit_decay_values(brackets, values, times=times)


def fit_decay_values(brackets: np.ndarray, values: np.ndarray,
                     times: Optional[np.ndarray] = None, floor: float = 1e-300) -> DecayFit:
    values = np.asarray(values, dtype=float)
    reasons = []
    if np.any(values <= floor):
        reasons.append("values at or below the noise floor")
        values = np.maximum(values, floor)
    slope, stderr, r2 = loglog_slope(brackets, values)
    if r2 < 0.9:
        reasons.append(f"poor fit (R^2 = {r2:.3f})")
    order = np.argsort(brackets)
    steps = np.diff(values[order])
    if slope < 0 and np.any(steps > 1e-9 * values.max()) and np.any(steps < 0):
        increases = int(np.sum(steps > 1e-9 * values.max()))
        if increases > len(steps) // 4:
            reasons.append("non-monotone samples")
    return DecayFit(slope, stderr, r2, np.asarray(times if times is not None else brackets),
                    values, bool(reasons), reasons)
