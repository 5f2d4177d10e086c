"""Periodic spatial grid, spectral derivatives, weights and weighted norms.

Every operator in the package is a dense complex matrix acting on values
sampled at the grid points ``x_i = -L/2 + i*dx``.  Fourier multipliers
treat the Nyquist wavenumber symmetrically: its multiplier is the average
of the symbol at ``+k_N`` and ``-k_N``, so odd derivatives vanish there
and even ones keep ``k_N**2``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

ArrayLike = Union[np.ndarray, Sequence[complex]]


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform periodic grid on ``[-L/2, L/2)``."""

    n_points: int = 128
    box_length: float = 80.0

    def __post_init__(self) -> None:
        if self.n_points < 2:
            raise ValueError("n_points must be at least 2")
        if not self.box_length > 0:
            raise ValueError("box_length must be positive")

    @property
    def dx(self) -> float:
        return self.box_length / self.n_points

    @property
    def points(self) -> np.ndarray:
        return -0.5 * self.box_length + self.dx * np.arange(self.n_points)

    @property
    def wavenumbers(self) -> np.ndarray:
        return 2.0 * np.pi * np.fft.fftfreq(self.n_points, d=self.dx)

    @property
    def nyquist_index(self) -> Optional[int]:
        return self.n_points // 2 if self.n_points % 2 == 0 else None

    def forward(self, values: np.ndarray) -> np.ndarray:
        """Discrete Fourier coefficients (unitary normalization)."""
        return np.fft.fft(values, axis=-1, norm="ortho")

    def inverse(self, coeffs: np.ndarray) -> np.ndarray:
        return np.fft.ifft(coeffs, axis=-1, norm="ortho")

    def interior_mask(self, fraction: float = 0.25) -> np.ndarray:
        """Boolean mask of points with ``|x| <= fraction * L``."""
        return np.abs(self.points) <= fraction * self.box_length + 1e-12

    def plane_wave(self, index: int) -> np.ndarray:
        """On-grid mode ``exp(i k x)`` for the wavenumber at ``index``."""
        return np.exp(1j * self.wavenumbers[index] * self.points)

    def to_json(self) -> dict:
        return {"n_points": self.n_points, "box_length": self.box_length}


@dataclass(frozen=True)
class GridFunction:
    values: np.ndarray
    grid: SpatialGrid

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=complex)
        if vals.shape != (self.grid.n_points,):
            raise ValueError(
                f"values have shape {vals.shape}, grid needs ({self.grid.n_points},)"
            )
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class GridOperator:
    matrix: np.ndarray
    grid: SpatialGrid
    claimed_order: float = 0.0
    claimed_decay: Optional[float] = None
    selfadjoint_wrt: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        mat = np.asarray(self.matrix, dtype=complex)
        n = self.grid.n_points
        if mat.shape != (n, n):
            raise ValueError(f"operator shape {mat.shape} does not match grid size {n}")
        object.__setattr__(self, "matrix", mat)

    def __matmul__(self, other):
        if isinstance(other, GridOperator):
            return GridOperator(self.matrix @ other.matrix, self.grid,
                                self.claimed_order + other.claimed_order)
        if isinstance(other, GridFunction):
            return GridFunction(self.matrix @ other.values, self.grid)
        return self.matrix @ other

    def selfadjoint_residual(self, density: Optional[np.ndarray] = None) -> float:
        dens = self.selfadjoint_wrt if density is None else density
        dens = np.ones(self.grid.n_points) if dens is None else np.asarray(dens)
        adj = weighted_adjoint(self.matrix, dens)
        return float(np.linalg.norm(adj - self.matrix, 2))


@dataclass(frozen=True)
class CauchyDatum:
    """Pair ``(u, i^{-1} d_t u)`` at a fixed time."""

    u0: GridFunction
    u1: GridFunction

    def __post_init__(self) -> None:
        if self.u0.grid != self.u1.grid:
            raise ValueError("Cauchy datum components live on different grids")

    @property
    def grid(self) -> SpatialGrid:
        return self.u0.grid

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.u0.values, self.u1.values])

    @classmethod
    def from_stacked(cls, vec: np.ndarray, grid: SpatialGrid) -> "CauchyDatum":
        n = grid.n_points
        return cls(GridFunction(vec[:n], grid), GridFunction(vec[n:], grid))


@dataclass
class OperatorFamily:
    """Operators sampled at a sequence of times."""

    times: np.ndarray
    matrices: list
    grid: SpatialGrid
    label: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=float)
        if len(self.matrices) != len(self.times):
            raise ValueError("one matrix per sample time is required")

    def __len__(self) -> int:
        return len(self.times)

    def __iter__(self):
        return iter(zip(self.times, self.matrices))

    @classmethod
    def from_callable(cls, fn: Callable[[float], np.ndarray], times: Sequence[float],
                      grid: SpatialGrid, label: str = "") -> "OperatorFamily":
        mats = [np.asarray(_matrix_of(fn(float(t))), dtype=complex) for t in times]
        return cls(np.asarray(times, dtype=float), mats, grid, label)


def _matrix_of(obj) -> np.ndarray:
    return obj.matrix if isinstance(obj, GridOperator) else np.asarray(obj)


def _values_of(obj) -> np.ndarray:
    return obj.values if isinstance(obj, GridFunction) else np.asarray(obj)


# ----------------------------------------------------------------------------
# Fourier multipliers


def symmetric_multiplier(grid: SpatialGrid, symbol: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Per-wavenumber multiplier with the Nyquist entry averaged over ``+-k_N``."""
    k = grid.wavenumbers
    mult = np.asarray(symbol(k), dtype=complex).copy()
    nyq = grid.nyquist_index
    if nyq is not None:
        kn = abs(k[nyq])
        mult[nyq] = 0.5 * (symbol(np.array([kn]))[0] + symbol(np.array([-kn]))[0])
    return mult


def multiplier_matrix(grid: SpatialGrid, multiplier: np.ndarray) -> np.ndarray:
    """Dense matrix of the Fourier multiplier ``F^{-1} diag(multiplier) F``."""
    n = grid.n_points
    eye = np.eye(n)
    coeffs = np.fft.fft(eye, axis=0)
    return np.fft.ifft(np.asarray(multiplier)[:, None] * coeffs, axis=0)


def fourier_derivative(grid: SpatialGrid, order: int = 1) -> GridOperator:
    """Spectral differentiation matrix of the given order."""
    if order < 0:
        raise ValueError("order must be nonnegative")
    mult = symmetric_multiplier(grid, lambda k: (1j * k) ** order)
    return GridOperator(multiplier_matrix(grid, mult), grid, claimed_order=float(order))


def full_nyquist_derivative(grid: SpatialGrid) -> np.ndarray:
    """First derivative keeping ``i k_N`` at Nyquist.

    Used for divergence-form operators so that ``-D D`` reproduces the
    second-derivative multiplier including the Nyquist mode.  The matrix
    is skew-Hermitian.
    """
    return multiplier_matrix(grid, 1j * grid.wavenumbers)


def weight_operator(grid: SpatialGrid, kind: str, exponent: float) -> GridOperator:
    """``<x>^s`` (diagonal, chart ``[-L/2, L/2)``) or ``<D>^s`` (Fourier multiplier)."""
    if kind == "position":
        diag = (1.0 + grid.points ** 2) ** (exponent / 2.0)
        return GridOperator(np.diag(diag).astype(complex), grid, claimed_order=0.0)
    if kind == "frequency":
        mult = (1.0 + grid.wavenumbers ** 2) ** (exponent / 2.0)
        return GridOperator(multiplier_matrix(grid, mult), grid, claimed_order=float(exponent))
    raise ValueError(f"unknown weight kind {kind!r}; expected 'position' or 'frequency'")


def japanese_bracket(values: np.ndarray) -> np.ndarray:
    return np.sqrt(1.0 + np.asarray(values, dtype=float) ** 2)


def sobolev_multiplier(grid: SpatialGrid, m: float) -> np.ndarray:
    return (1.0 + grid.wavenumbers ** 2) ** (m / 2.0)


# ----------------------------------------------------------------------------
# Inner products, norms, adjoints


def _check_density(density: np.ndarray) -> np.ndarray:
    dens = np.asarray(density)
    if np.iscomplexobj(dens):
        if np.any(np.abs(dens.imag) > 0):
            raise ValueError("density must be real")
        dens = dens.real
    if np.any(~np.isfinite(dens)) or np.any(dens <= 0):
        raise ValueError("density must be strictly positive")
    return dens.astype(float)


def weighted_inner_product(u, v, density, grid: Optional[SpatialGrid] = None) -> complex:
    """``dx * sum(conj(u) * v * density)``; conjugate-linear in ``u``."""
    if grid is None:
        for obj in (u, v, density):
            if isinstance(obj, GridFunction):
                grid = obj.grid
                break
    if grid is None:
        raise ValueError("a grid is needed to fix the spacing")
    dens = _check_density(_values_of(density))
    return complex(grid.dx * np.sum(np.conj(_values_of(u)) * _values_of(v) * dens))


def sobolev_norm(u, m: float, grid: Optional[SpatialGrid] = None) -> float:
    """Plain L2 norm of ``<D>^m u`` (spacing-weighted)."""
    grid = u.grid if isinstance(u, GridFunction) else grid
    if grid is None:
        raise ValueError("a grid is needed to fix the spacing")
    coeffs = grid.forward(_values_of(u)) * sobolev_multiplier(grid, m)
    return float(np.sqrt(grid.dx) * np.linalg.norm(coeffs))


def energy_norm(datum: CauchyDatum, m: float) -> float:
    return float(np.hypot(sobolev_norm(datum.u0, m + 1), sobolev_norm(datum.u1, m)))


def weighted_adjoint(A, density) -> np.ndarray | GridOperator:
    """Adjoint for the density-weighted inner product: ``rho^{-1} A^H rho``."""
    dens = _check_density(_values_of(density))
    mat = _matrix_of(A)
    adj = (mat.conj().T * dens[None, :]) / dens[:, None]
    if isinstance(A, GridOperator):
        return GridOperator(adj, A.grid, A.claimed_order, A.claimed_decay, A.selfadjoint_wrt)
    return adj


def weighted_symmetrize(mat: np.ndarray, density: np.ndarray) -> tuple[np.ndarray, float]:
    """Weighted self-adjoint part of ``mat`` and the Frobenius size of the removed part."""
    adj = weighted_adjoint(mat, density)
    sym = 0.5 * (mat + adj)
    return sym, float(np.linalg.norm(mat - sym))


def smoothed_random_field(grid: SpatialGrid, rng: np.random.Generator,
                          smoothing: float = 2.0, complex_valued: bool = True) -> np.ndarray:
    """Seeded Gaussian field smoothed by ``<D>^{-smoothing}``."""
    noise = rng.standard_normal(grid.n_points)
    if complex_valued:
        noise = noise + 1j * rng.standard_normal(grid.n_points)
    coeffs = grid.forward(noise) * sobolev_multiplier(grid, -smoothing)
    return grid.inverse(coeffs)


def interpolation_matrix(grid: SpatialGrid, targets: np.ndarray) -> np.ndarray:
    """Trigonometric interpolation from grid values to arbitrary points."""
    k = grid.wavenumbers
    offsets = np.asarray(targets, dtype=float)[:, None] - grid.points[None, :]
    phase = np.exp(1j * offsets[:, :, None] * k[None, None, :])
    nyq = grid.nyquist_index
    if nyq is not None:
        # symmetric Nyquist: cos(k_N d) instead of exp(i k_N d)
        phase[:, :, nyq] = np.cos(offsets * k[nyq])
    return phase.sum(axis=2) / grid.n_points


# ----------------------------------------------------------------------------
# CSV + JSON sidecar


def save_operator(path: Union[str, Path], op: GridOperator) -> None:
    """Write ``op`` as CSV (real/imag column pairs, row-major) plus a JSON sidecar."""
    path = Path(path)
    mat = op.matrix
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        for row in mat:
            writer.writerow([repr(float(v)) for pair in zip(row.real, row.imag) for v in pair])
    sidecar = {
        "n_points": op.grid.n_points,
        "box_length": op.grid.box_length,
        "claimed_order": op.claimed_order,
        "claimed_decay": op.claimed_decay,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))


def load_operator(path: Union[str, Path]) -> GridOperator:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    grid = SpatialGrid(int(meta["n_points"]), float(meta["box_length"]))
    with path.open() as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh)]
    arr = np.asarray(rows)
    mat = arr[:, 0::2] + 1j * arr[:, 1::2]
    return GridOperator(mat, grid, float(meta["claimed_order"]), meta.get("claimed_decay"))


def save_function(path: Union[str, Path], fn: GridFunction) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([repr(float(v)) for pair in zip(fn.values.real, fn.values.imag) for v in pair])
    sidecar = {"n_points": fn.grid.n_points, "box_length": fn.grid.box_length,
               "claimed_order": None, "claimed_decay": None}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))


def load_function(path: Union[str, Path]) -> GridFunction:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    grid = SpatialGrid(int(meta["n_points"]), float(meta["box_length"]))
    with path.open() as fh:
        row = [float(v) for v in next(csv.reader(fh))]
    arr = np.asarray(row)
    return GridFunction(arr[0::2] + 1j * arr[1::2], grid)
