"""Cauchy evolution of ``d_t^2 + r d_t + a(t)``, its approximate diagonalization and
the inhomogeneous Cauchy problem.

Cauchy data are pairs ``(u, i^{-1} d_t u)``.  Operators act in the *weighted
frame*, where the inner product at time ``t`` carries the density ``rho_t``.
Internally most work happens in the *flat frame* ``psi = rho_t^{1/2} u``, where
weighted adjoints become plain conjugate transposes.  In the flat frame the
generator of the full evolution is

    K(t) = [[-i r/2, 1], [a~(t), i r/2]],     a~ = rho^{1/2} a rho^{-1/2},

which is self-adjoint for ``q = [[0, 1], [1, 0]]``, so every factor of the
Strang step ``exp(i h R/2) exp(i h K0) exp(i h R/2)`` is exactly symplectic.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional

import numpy as np
import scipy.linalg

from .geometry import ReducedModel
from .grid_ops import full_nyquist_derivative
from .pseudodiff import DecayFit, PositivityError, WeightConfig, fit_decay_values, weighted_window_norm


class ConfigurationError(ValueError):
    pass


# ----------------------------------------------------------------------------
# Time grid


def admissible_gamma_interval(delta: float) -> tuple[float, float]:
    return 0.5, 0.5 + delta


def default_gamma(delta: float) -> float:
    lo, hi = admissible_gamma_interval(delta)
    guess = 0.5 + delta / 2 + 0.25
    margin = 1e-3 * (hi - lo)
    return float(min(max(guess, lo + margin), hi - margin))


@dataclass(frozen=True)
class TimeGrid:
    half_width: float
    step: float
    gamma: float
    delta: float

    def __post_init__(self) -> None:
        if self.half_width <= 0 or self.step <= 0:
            raise ConfigurationError("slab half-width and step must be positive")
        ratio = self.half_width / self.step
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise ConfigurationError(f"dt = {self.step} does not divide T = {self.half_width}")
        lo, hi = admissible_gamma_interval(self.delta)
        if not lo < self.gamma < hi:
            raise ConfigurationError(
                f"gamma = {self.gamma} violates 1/2 < γ < 1/2 + δ (δ = {self.delta}, "
                f"interval ({lo}, {hi}))")

    @classmethod
    def build(cls, half_width: float, step: float, delta: float,
              gamma: Optional[float] = None) -> "TimeGrid":
        return cls(float(half_width), float(step),
                   default_gamma(delta) if gamma is None else float(gamma), float(delta))

    @property
    def n_half(self) -> int:
        return int(round(self.half_width / self.step))

    @property
    def n_times(self) -> int:
        return 2 * self.n_half + 1

    @property
    def zero_index(self) -> int:
        return self.n_half

    @property
    def times(self) -> np.ndarray:
        return (np.arange(self.n_times) - self.n_half) * self.step

    def time(self, j: int) -> float:
        return (j - self.n_half) * self.step

    def index_of(self, t: float) -> int:
        j = int(round(t / self.step)) + self.n_half
        if not 0 <= j < self.n_times or abs(self.time(j) - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not on the grid")
        return j

    @property
    def weights(self) -> np.ndarray:
        """``<t_j>^{-2 gamma} dt``, the quadrature weights of the weighted slab norm."""
        return (1.0 + self.times ** 2) ** (-self.gamma) * self.step

    def to_json(self) -> dict:
        return {"T": self.half_width, "dt": self.step, "gamma": self.gamma, "delta": self.delta}


# ----------------------------------------------------------------------------
# Block helpers


def charge_form(n: int) -> np.ndarray:
    eye = np.eye(n)
    zero = np.zeros((n, n))
    return np.block([[zero, eye], [eye, zero]])


def charge_form_ad(n: int) -> np.ndarray:
    eye = np.eye(n)
    zero = np.zeros((n, n))
    return np.block([[eye, zero], [zero, -eye]])


def projection_plus(n: int) -> np.ndarray:
    out = np.zeros((2 * n, 2 * n))
    out[:n, :n] = np.eye(n)
    return out


def projection_minus(n: int) -> np.ndarray:
    out = np.zeros((2 * n, 2 * n))
    out[n:, n:] = np.eye(n)
    return out


def block_adjoint(mat: np.ndarray, density_out: np.ndarray, density_in: np.ndarray) -> np.ndarray:
    """Adjoint of a block map from the ``density_in`` space to the ``density_out`` space."""
    d_out = np.concatenate([density_out, density_out])
    d_in = np.concatenate([density_in, density_in])
    return (mat.conj().T * d_out[None, :]) / d_in[:, None]


def to_flat(mat: np.ndarray, root_out: np.ndarray, root_in: np.ndarray) -> np.ndarray:
    """Conjugate a block operator into the flat frame: ``S_out M S_in^{-1}``."""
    r_out = np.concatenate([root_out, root_out])
    r_in = np.concatenate([root_in, root_in])
    return r_out[:, None] * mat / r_in[None, :]


def from_flat(mat: np.ndarray, root_out: np.ndarray, root_in: np.ndarray) -> np.ndarray:
    r_out = np.concatenate([root_out, root_out])
    r_in = np.concatenate([root_in, root_in])
    return mat / r_out[:, None] * r_in[None, :]


def _herm(mat: np.ndarray) -> np.ndarray:
    return 0.5 * (mat + mat.conj().T)


def _eigh_function(w: np.ndarray, vecs: np.ndarray, values: np.ndarray) -> np.ndarray:
    return (vecs * values[None, :]) @ vecs.conj().T


# ----------------------------------------------------------------------------
# Per-time data


@dataclass
class Node:
    """Reduced-model data at one time, flat frame."""

    t: float
    density: np.ndarray
    root: np.ndarray
    r: np.ndarray
    a_flat: np.ndarray
    eigvals: np.ndarray
    vecs: np.ndarray

    @property
    def omega(self) -> np.ndarray:
        return np.sqrt(self.eigvals)

    @property
    def eps_flat(self) -> np.ndarray:
        return _eigh_function(self.eigvals, self.vecs, self.omega)


class _LRU(OrderedDict):
    def __init__(self, capacity: int):
        super().__init__()
        self.capacity = max(1, int(capacity))

    def fetch(self, key, build):
        if key in self:
            self.move_to_end(key)
            return self[key]
        value = build()
        self[key] = value
        if len(self) > self.capacity:
            self.popitem(last=False)
        return value


class ModelDynamics:
    """Cached access to ``a(t)``, ``r(t)``, densities and spectral data."""

    def __init__(self, reduced: ReducedModel, cache_size: int = 64):
        self.reduced = reduced
        self.grid = reduced.grid
        self.n = reduced.grid.n_points
        self._nodes = _LRU(cache_size)
        self._free_node: Optional[Node] = None

    @staticmethod
    def _key(t: float) -> float:
        return round(float(t), 11)

    def node(self, t: float) -> Node:
        if self.reduced.is_free:
            if self._free_node is None:
                self._free_node = self._build(0.0)
            node = self._free_node
            return Node(float(t), node.density, node.root, node.r, node.a_flat, node.eigvals, node.vecs)
        return self._nodes.fetch(self._key(t), lambda: self._build(float(t)))

    def _build(self, t: float) -> Node:
        co = self.reduced.coefficients(t)
        a = self.reduced.spatial_operator(t)
        root = np.sqrt(co["density"])
        a_flat = _herm(root[:, None] * a / root[None, :])
        w, vecs = np.linalg.eigh(a_flat)
        if w.min() <= 1e-10:
            raise PositivityError(f"a({t}) is not positive definite: min eigenvalue {w.min():.3e}")
        return Node(t, co["density"], root, co["r"], a_flat, w, vecs)


def build_generator(reduced: ReducedModel, t: float) -> np.ndarray:
    """``H(t) = [[0, 1], [a(t), i r(t)]]`` in the weighted frame."""
    n = reduced.grid.n_points
    a = reduced.spatial_operator(t)
    r = reduced.damping(t)
    return np.block([[np.zeros((n, n)), np.eye(n)], [a, 1j * np.diag(r)]])


def generator_residual(H: np.ndarray, density: np.ndarray, damping: Optional[np.ndarray] = None,
                       form: Optional[np.ndarray] = None) -> float:
    """``|| H^dagger q - q H ||`` for the density-weighted block adjoint.

    With ``damping`` given, the term ``-i r q`` produced by the moving density is
    added back, so the residual vanishes at every ``t`` and not only where
    ``r = 0``.
    """
    n = H.shape[0] // 2
    q = charge_form(n) if form is None else form
    res = block_adjoint(H, density, density) @ q - q @ H
    if damping is not None:
        rr = np.concatenate([damping, damping])
        res = res + 1j * rr[:, None] * q
    return float(np.linalg.norm(res, 2))


# ----------------------------------------------------------------------------
# Free evolution


def free_operator(grid, mass: float) -> np.ndarray:
    deriv = full_nyquist_derivative(grid)
    return _herm(-(deriv @ deriv)) + mass ** 2 * np.eye(grid.n_points)


@dataclass
class FreeDynamics:
    """Exact evolution of ``[[0, 1], [a_free, 0]]`` via the spectral decomposition."""

    grid: object
    mass: float
    operator: np.ndarray = field(default=None, repr=False)
    eigvals: np.ndarray = field(default=None, repr=False)
    vecs: np.ndarray = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.operator is None:
            self.operator = free_operator(self.grid, self.mass)
        self.eigvals, self.vecs = np.linalg.eigh(self.operator)

    @property
    def omega(self) -> np.ndarray:
        return np.sqrt(self.eigvals)

    @property
    def eps(self) -> np.ndarray:
        return _eigh_function(self.eigvals, self.vecs, self.omega)

    def generator(self) -> np.ndarray:
        n = self.grid.n_points
        return np.block([[np.zeros((n, n)), np.eye(n)], [self.operator, np.zeros((n, n))]])

    def evolution(self, tau: float) -> np.ndarray:
        """``exp(i tau H_free)``."""
        w = self.omega
        c = np.cos(w * tau)
        s = np.sin(w * tau)
        V = self.vecs
        fn = lambda vals: _eigh_function(self.eigvals, V, vals)  # noqa: E731
        return np.block([[fn(c), fn(1j * s / w)], [fn(1j * w * s), fn(c)]])

    def T(self) -> np.ndarray:
        """``T_free`` built from ``b^+- = +-eps_free``."""
        return diagonalizer(self.eps, -self.eps)[0]

    def T_inv(self) -> np.ndarray:
        return diagonalizer(self.eps, -self.eps)[1]

    def evolution_ad(self, tau: float) -> np.ndarray:
        """``exp(i tau diag(eps, -eps))``."""
        n = self.grid.n_points
        plus = _eigh_function(self.eigvals, self.vecs, np.exp(1j * self.omega * tau))
        minus = _eigh_function(self.eigvals, self.vecs, np.exp(-1j * self.omega * tau))
        zero = np.zeros((n, n))
        return np.block([[plus, zero], [zero, minus]])


# ----------------------------------------------------------------------------
# Diagonalization


def diagonalizer(b_plus: np.ndarray, b_minus: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``T``, ``T^{-1}`` and ``N = (b^+ - b^-)^{-1/2}`` for a flat-frame pair ``b^+-``."""
    gap = _herm(b_plus - b_minus)
    w, vecs = np.linalg.eigh(gap)
    if w.min() <= 0:
        raise PositivityError(f"b+ - b- lost positivity: min eigenvalue {w.min():.3e}")
    N = _eigh_function(w, vecs, w ** -0.5)
    T = -1j * np.block([[N, -N], [b_plus @ N, -b_minus @ N]])
    T_inv = 1j * np.block([[-N @ b_minus, N], [-N @ b_plus, N]])
    return T, T_inv, N


@dataclass
class BundleNode:
    t: float
    b_plus: np.ndarray
    b_minus: np.ndarray
    N: np.ndarray
    T: np.ndarray
    T_inv: np.ndarray


@dataclass
class AdGenerator:
    """Flat-frame generators at one time."""

    t: float
    H_ad: np.ndarray
    H_d: np.ndarray
    V_ad: np.ndarray
    hermitization_residual: float


class DiagonalizationBundle:
    """``b^+-``, ``T``, ``H^ad = H^d - V^ad`` and the remainders ``r_inf^+-``, lazily in ``t``.

    ``refine = 0`` takes ``b^+ = eps = a^{1/2}``.  Each refinement level replaces
    ``b^+`` by ``(a + i d_t b + i r b)^{1/2}`` built from the previous level.
    Time derivatives are centered differences with spacing ``fd_step``.
    """

    def __init__(self, reduced: ReducedModel, tg: TimeGrid, refine: int = 0,
                 dynamics: Optional[ModelDynamics] = None, fd_step: Optional[float] = None,
                 cache_size: int = 64):
        if refine < 0:
            raise ValueError("refine must be nonnegative")
        self.reduced = reduced
        self.tg = tg
        self.refine = int(refine)
        self.dyn = dynamics or ModelDynamics(reduced)
        self.n = self.dyn.n
        self.fd_step = tg.step if fd_step is None else float(fd_step)
        self._b = _LRU(cache_size * (self.refine + 1))
        self._nodes = _LRU(cache_size)
        self._gens = _LRU(cache_size)
        self._grid: Dict[int, tuple] = {}

    # -- b^+ at each refinement level
    def _b_plus(self, t: float, level: int) -> np.ndarray:
        key = (level, ModelDynamics._key(t))

        def build():
            node = self.dyn.node(t)
            if level == 0:
                return node.eps_flat
            h = self.fd_step
            b_prev = self._b_plus(t, level - 1)
            b_dot = (self._b_plus(t + h, level - 1) - self._b_plus(t - h, level - 1)) / (2 * h)
            half_r = 0.5 * node.r
            target = node.a_flat + 1j * (b_dot + half_r[:, None] * b_prev + b_prev * half_r[None, :])
            return scipy.linalg.sqrtm(target)

        return self._b.fetch(key, build)

    def b_plus_flat(self, t: float) -> np.ndarray:
        return self._b_plus(t, self.refine)

    def node(self, t: float) -> BundleNode:
        def build():
            bp = self.b_plus_flat(t)
            bm = -bp.conj().T
            T, T_inv, N = diagonalizer(bp, bm)
            return BundleNode(float(t), bp, bm, N, T, T_inv)

        return self._nodes.fetch(ModelDynamics._key(t), build)

    def grid_frames(self, j: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Weighted-frame ``(T, T^{-1}, V^ad)`` at grid time ``t_j``, kept for the bundle's lifetime."""
        if j not in self._grid:
            t = self.tg.time(j)
            self._grid[j] = (self.T(t), self.T_inv(t), self.V_ad(t))
        return self._grid[j]

    # -- weighted-frame accessors
    def _root(self, t: float) -> np.ndarray:
        return self.dyn.node(t).root

    def eps(self, t: float) -> np.ndarray:
        root = self._root(t)
        return self.dyn.node(t).eps_flat / root[:, None] * root[None, :]

    def b(self, t: float, sign: int) -> np.ndarray:
        nd = self.node(t)
        root = self._root(t)
        mat = nd.b_plus if sign > 0 else nd.b_minus
        return mat / root[:, None] * root[None, :]

    def T(self, t: float) -> np.ndarray:
        root = self._root(t)
        return from_flat(self.node(t).T, root, root)

    def T_inv(self, t: float) -> np.ndarray:
        root = self._root(t)
        return from_flat(self.node(t).T_inv, root, root)

    def r_inf_flat(self, t: float, sign: int) -> np.ndarray:
        """``a - (b)^2 + i d_t b + i r b`` for ``b = b^+`` or ``b^-``, flat frame."""
        h = self.fd_step
        node = self.dyn.node(t)
        pick = (lambda s: self.node(s).b_plus) if sign > 0 else (lambda s: self.node(s).b_minus)
        b = pick(t)
        b_dot = (pick(t + h) - pick(t - h)) / (2 * h)
        half_r = 0.5 * node.r
        return node.a_flat - b @ b + 1j * (b_dot + half_r[:, None] * b + b * half_r[None, :])

    def r_inf(self, t: float, sign: int) -> np.ndarray:
        root = self._root(t)
        return self.r_inf_flat(t, sign) / root[:, None] * root[None, :]

    def flat_generator(self, t: float) -> np.ndarray:
        node = self.dyn.node(t)
        n = self.n
        half_r = np.diag(0.5j * node.r)
        return np.block([[-half_r, np.eye(n)], [node.a_flat, half_r]])

    def generator_ad(self, t: float, h: Optional[float] = None) -> AdGenerator:
        """``H^ad = T^{-1} K T + i T^{-1} d_t T`` and its diagonal/remainder split (flat frame)."""
        h = self.fd_step if h is None else float(h)

        def build():
            nd = self.node(t)
            T_dot = (self.node(t + h).T - self.node(t - h).T) / (2 * h)
            H_ad = nd.T_inv @ self.flat_generator(t) @ nd.T + 1j * nd.T_inv @ T_dot
            n = self.n
            H_d = np.zeros_like(H_ad)
            H_d[:n, :n] = _herm(H_ad[:n, :n])
            H_d[n:, n:] = _herm(H_ad[n:, n:])
            herm_res = float(np.linalg.norm(H_ad[:n, :n] - H_d[:n, :n])
                             + np.linalg.norm(H_ad[n:, n:] - H_d[n:, n:]))
            return AdGenerator(float(t), H_ad, H_d, H_d - H_ad, herm_res)

        return self._gens.fetch((ModelDynamics._key(t), round(h, 12)), build)

    def V_ad(self, t: float) -> np.ndarray:
        root = self._root(t)
        return from_flat(self.generator_ad(t).V_ad, root, root)

    def eps_pm(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        """Hermitized diagonal entries ``eps^+-`` of ``H^d`` in the weighted frame."""
        gen = self.generator_ad(t)
        node = self.dyn.node(t)
        n = self.n
        shift = np.diag(0.5j * node.r)
        root = node.root
        conv = lambda m: (m + shift) / root[:, None] * root[None, :]  # noqa: E731
        return conv(gen.H_d[:n, :n]), conv(gen.H_d[n:, n:])

    def H_ad(self, t: float) -> np.ndarray:
        gen = self.generator_ad(t)
        node = self.dyn.node(t)
        shift = np.concatenate([0.5j * node.r, 0.5j * node.r])
        return from_flat(gen.H_ad + np.diag(shift), node.root, node.root)

    def displayed_formula_residual(self, t: float) -> dict:
        """Compare the exact ``H^ad`` with the closed-form ``eps^+-`` and ``V^ad`` expressions.

        The closed forms are written with the ordering ``(b+ - b-)^{-1/2}`` on both
        sides of the remainder matrix.  Returns relative residuals of the
        diagonal and off-diagonal blocks.
        """
        n = self.n
        h = self.fd_step
        node = self.dyn.node(t)
        root = node.root
        to_w = lambda m: m / root[:, None] * root[None, :]  # noqa: E731
        nd = self.node(t)
        N = to_w(nd.N)
        N_dot = (to_w_at(self, t + h, self.node(t + h).N) - to_w_at(self, t - h, self.node(t - h).N)) / (2 * h)
        N_inv = np.linalg.inv(N)
        bp, bm = to_w(nd.b_plus), to_w(nd.b_minus)
        rp, rm = self.r_inf(t, 1), self.r_inf(t, -1)
        r_diag = np.diag(node.r)
        eps_plus = -bm + 1j * r_diag + (N @ bm - bm @ N) - 1j * N_dot @ N_inv - N @ rm @ N
        eps_minus = -bp + 1j * r_diag + (N @ bp - bp @ N) - 1j * N_dot @ N_inv - N @ rp @ N
        V = np.block([[N @ rm @ N, -N @ rm @ N], [N @ rp @ N, -N @ rp @ N]])
        zero = np.zeros((n, n))
        H_disp = np.block([[eps_plus, zero], [zero, eps_minus]]) - V
        H_exact = self.H_ad(t)
        scale = np.linalg.norm(H_exact, 2)
        diff = H_disp - H_exact
        return {
            "diagonal": float((np.linalg.norm(diff[:n, :n], 2) + np.linalg.norm(diff[n:, n:], 2)) / scale),
            "off_diagonal": float((np.linalg.norm(diff[:n, n:], 2) + np.linalg.norm(diff[n:, :n], 2)) / scale),
        }


def _block_window_norm(mat: np.ndarray, grid, config: WeightConfig) -> float:
    n = grid.n_points
    if mat.shape[0] == n:
        return weighted_window_norm(mat, grid, config)
    return max(weighted_window_norm(mat[i * n:(i + 1) * n, j * n:(j + 1) * n], grid, config)
               for i in range(2) for j in range(2))


def decay_diagnostics(bundle: DiagonalizationBundle, times: Optional[np.ndarray] = None,
                      config: Optional[WeightConfig] = None) -> Dict[str, DecayFit]:
    """Slopes in ``<t>`` of ``eps(t) - eps_free``, ``V^ad(t)`` and ``eps^+-(t) -+ eps(t)``.

    Norms are taken blockwise on the interior window (weighted frame).
    """
    config = config or WeightConfig()
    times = np.geomspace(2.0, 40.0, 10) if times is None else np.asarray(times, dtype=float)
    grid = bundle.reduced.grid
    free_eps = FreeDynamics(grid, bundle.reduced.mass).eps
    series = {"sqrt_difference": [], "V_ad": [], "eps_plus": [], "eps_minus": []}
    for t in times:
        eps = bundle.eps(t)
        plus, minus = bundle.eps_pm(t)
        series["sqrt_difference"].append(_block_window_norm(eps - free_eps, grid, config))
        series["V_ad"].append(_block_window_norm(bundle.V_ad(t), grid, config))
        series["eps_plus"].append(_block_window_norm(plus - eps, grid, config))
        series["eps_minus"].append(_block_window_norm(minus + eps, grid, config))
    brackets = np.sqrt(1.0 + times ** 2)
    return {k: fit_decay_values(brackets, np.array(v), times=times) for k, v in series.items()}


def to_w_at(bundle: DiagonalizationBundle, t: float, mat: np.ndarray) -> np.ndarray:
    root = bundle.dyn.node(t).root
    return mat / root[:, None] * root[None, :]


# ----------------------------------------------------------------------------
# Steppers


@dataclass
class _FullStep:
    h: float
    vecs: np.ndarray
    omega: np.ndarray
    r: np.ndarray

    def apply(self, Y: np.ndarray) -> np.ndarray:
        n = len(self.omega)
        e = np.exp(self.h * self.r / 4.0)[:, None]
        Y0 = Y[:n] * e
        Y1 = Y[n:] / e
        Vh = self.vecs.conj().T
        Z0 = Vh @ Y0
        Z1 = Vh @ Y1
        w = self.omega[:, None]
        c = np.cos(w * self.h)
        s = np.sin(w * self.h)
        N0 = c * Z0 + 1j * (s / w) * Z1
        N1 = 1j * (w * s) * Z0 + c * Z1
        return np.concatenate([(self.vecs @ N0) * e, (self.vecs @ N1) / e])


@dataclass
class _DiagStep:
    h: float
    vecs_plus: np.ndarray
    lam_plus: np.ndarray
    vecs_minus: np.ndarray
    lam_minus: np.ndarray

    def apply(self, Y: np.ndarray) -> np.ndarray:
        n = len(self.lam_plus)
        Vp, Vm = self.vecs_plus, self.vecs_minus
        Y0 = Vp @ (np.exp(1j * self.h * self.lam_plus)[:, None] * (Vp.conj().T @ Y[:n]))
        Y1 = Vm @ (np.exp(1j * self.h * self.lam_minus)[:, None] * (Vm.conj().T @ Y[n:]))
        return np.concatenate([Y0, Y1])


@dataclass
class _DenseStep:
    h: float
    forward: np.ndarray
    backward: np.ndarray

    def apply(self, Y: np.ndarray) -> np.ndarray:
        return self.forward @ Y


FLAVORS = ("full", "ad", "diag", "free")


class Evolution:
    """Propagators ``U(t_j, t_k)`` on a time grid for one flavor.

    ``full``: Strang-split exponential midpoint for ``K(t)``.
    ``diag``: exponential midpoint for the block-diagonal ``H^d``.
    ``ad``: exponential midpoint for ``H^ad`` (dense matrix exponential).  The
    conjugate ``T(t)^{-1} U(t, s) T(s)`` of the full flavor is available from
    :func:`conjugated_ad_columns` as an independent route.
    ``free``: exact evolution of ``[[0, 1], [a_free, 0]]``.
    """

    def __init__(self, reduced: ReducedModel, tg: TimeGrid, flavor: str = "full",
                 bundle: Optional[DiagonalizationBundle] = None, cache_bytes: float = 3e8):
        if flavor not in FLAVORS:
            raise ValueError(f"unknown flavor {flavor!r}")
        self.reduced = reduced
        self.tg = tg
        self.flavor = flavor
        self.n = reduced.grid.n_points
        if bundle is None and flavor in ("ad", "diag"):
            bundle = DiagonalizationBundle(reduced, tg)
        self.bundle = bundle
        self.dyn = bundle.dyn if bundle is not None else ModelDynamics(reduced)
        per_step = 16.0 * self.n ** 2 * {"diag": 2, "ad": 8}.get(flavor, 1)
        self._steps = _LRU(int(cache_bytes // per_step))
        self._densities: Optional[np.ndarray] = None
        self._free = FreeDynamics(reduced.grid, reduced.mass) if (
            flavor == "free" or reduced.is_free) else None

    # -- step factors for the interval [t_j, t_{j+1}]
    def _factors(self, j: int):
        def build():
            t0 = self.tg.time(j)
            h = self.tg.step
            mid = t0 + h / 2
            if self.flavor == "full":
                node = self.dyn.node(mid)
                return _FullStep(h, node.vecs, node.omega, node.r)
            gen = self.bundle.generator_ad(mid, h / 2)
            if self.flavor == "ad":
                return _DenseStep(h, scipy.linalg.expm(1j * h * gen.H_ad),
                                  scipy.linalg.expm(-1j * h * gen.H_ad))
            n = self.n
            lp, vp = np.linalg.eigh(gen.H_d[:n, :n])
            lm, vm = np.linalg.eigh(gen.H_d[n:, n:])
            return _DiagStep(h, vp, lp, vm, lm)

        return self._steps.fetch(j, build)

    def step_flat(self, Y: np.ndarray, j: int, forward: bool = True) -> np.ndarray:
        """Advance flat-frame columns across interval ``j`` forwards or backwards."""
        f = self._factors(j)
        if forward:
            return f.apply(Y)
        if isinstance(f, _DenseStep):
            return f.backward @ Y
        inv = _FullStep(-f.h, f.vecs, f.omega, f.r) if isinstance(f, _FullStep) else \
            _DiagStep(-f.h, f.vecs_plus, f.lam_plus, f.vecs_minus, f.lam_minus)
        return inv.apply(Y)

    def run_flat(self, Y: np.ndarray, i_from: int, i_to: int,
                 record: Optional[Iterable[int]] = None) -> tuple[np.ndarray, Dict[int, np.ndarray]]:
        record = set(record or ())
        out = {}
        if i_from in record:
            out[i_from] = Y.copy()
        j = i_from
        while j != i_to:
            if i_to > j:
                Y = self.step_flat(Y, j, True)
                j += 1
            else:
                Y = self.step_flat(Y, j - 1, False)
                j -= 1
            if j in record:
                out[j] = Y.copy()
        return Y, out

    def _root(self, j: int) -> np.ndarray:
        return self.roots()[j]

    def _free_matrix(self, i_to: int, i_from: int) -> np.ndarray:
        return self._free.evolution(self.tg.time(i_to) - self.tg.time(i_from))

    def matrix(self, i_to: int, i_from: int) -> np.ndarray:
        """Weighted-frame ``U(t_to, t_from)`` as a dense ``2n x 2n`` matrix."""
        return self.columns([i_to], i_from)[i_to]

    def columns(self, indices: Iterable[int], i_from: Optional[int] = None) -> Dict[int, np.ndarray]:
        """``U(t_j, t_from)`` for each requested ``j`` (weighted frame)."""
        i_from = self.tg.zero_index if i_from is None else i_from
        indices = sorted(set(int(i) for i in indices))
        if self.flavor == "free" or (self.flavor == "full" and self.reduced.is_free):
            return {j: self._free_matrix(j, i_from) for j in indices}
        out = {}
        root_from = self._root(i_from)
        start = np.diag(np.concatenate([root_from, root_from])).astype(complex)
        above = [j for j in indices if j >= i_from]
        below = [j for j in indices if j < i_from]
        for group, end in ((above, max(above, default=i_from)), (below, min(below, default=i_from))):
            if not group:
                continue
            _, recs = self.run_flat(start.copy(), i_from, end, record=group)
            for j, Y in recs.items():
                root_to = self._root(j)
                out[j] = np.concatenate([1 / root_to, 1 / root_to])[:, None] * Y
        return out

    def propagate(self, state: np.ndarray, i_from: int, i_to: int) -> np.ndarray:
        """Apply ``U(t_to, t_from)`` to weighted-frame state columns."""
        state = np.asarray(state, dtype=complex)
        vec = state.ndim == 1
        Y = state[:, None] if vec else state
        if self.flavor == "free" or (self.flavor == "full" and self.reduced.is_free):
            out = self._free_matrix(i_to, i_from) @ Y
        else:
            rf, rt = self._root(i_from), self._root(i_to)
            Yf = np.concatenate([rf, rf])[:, None] * Y
            Yf, _ = self.run_flat(Yf, i_from, i_to)
            out = Yf / np.concatenate([rt, rt])[:, None]
        return out[:, 0] if vec else out

    def density(self, j: int) -> np.ndarray:
        return self.densities()[j]

    def densities(self) -> np.ndarray:
        """``(n_times, n)`` table of densities on the slab grid, computed once."""
        if self._densities is None:
            self._densities = np.array([self.reduced.density(self.tg.time(j))
                                        for j in range(self.tg.n_times)])
        return self._densities

    def roots(self) -> np.ndarray:
        return np.sqrt(self.densities())


def conjugated_ad_columns(full: Evolution, bundle: DiagonalizationBundle,
                          indices: Iterable[int], i_from: Optional[int] = None) -> Dict[int, np.ndarray]:
    """``T(t_j)^{-1} U(t_j, t_from) T(t_from)`` from the full flavor (weighted frame)."""
    i_from = full.tg.zero_index if i_from is None else i_from
    cols = full.columns(indices, i_from)
    T_from = bundle.T(full.tg.time(i_from))
    return {j: bundle.T_inv(full.tg.time(j)) @ U @ T_from for j, U in cols.items()}


@dataclass
class EvolutionTable:
    flavor: str
    forward: Dict[int, np.ndarray]
    backward: Dict[int, np.ndarray]
    meta: dict = field(default_factory=dict)


def evolution_table(evo: Evolution, indices: Iterable[int]) -> EvolutionTable:
    """Columns ``U(t_j, 0)`` and ``U(0, t_j)``; the latter from the exact weighted adjoint relation."""
    indices = list(indices)
    fwd = evo.columns(indices)
    n = evo.n
    q = charge_form(n) if evo.flavor in ("full", "free") else charge_form_ad(n)
    z = evo.tg.zero_index
    bwd = {}
    for j, U in fwd.items():
        # U(0, t) = q^{-1} U(t, 0)^dagger q  (dagger from time t to time 0)
        bwd[j] = q @ block_adjoint(U, evo.density(j), evo.density(z)) @ q if evo.flavor != "free" \
            else q @ U.conj().T @ q
    meta = {"order": 2, "step": evo.tg.step,
            "scheme": "Strang exponential midpoint" if evo.flavor == "full" else evo.flavor}
    return EvolutionTable(evo.flavor, fwd, bwd, meta)


def symplectic_residual(evo: Evolution, indices: Iterable[int]) -> float:
    """``max_j || U(t_j, 0)^dagger q U(t_j, 0) - q ||`` with the flavor's charge form."""
    n = evo.n
    q = charge_form_ad(n) if evo.flavor in ("ad", "diag") else charge_form(n)
    z = evo.tg.zero_index
    worst = 0.0
    for j, U in evo.columns(indices).items():
        adj = block_adjoint(U, evo.density(j), evo.density(z))
        worst = max(worst, float(np.linalg.norm(adj @ q @ U - q, 2)))
    return worst


# ----------------------------------------------------------------------------
# Inhomogeneous problem and the discrete operator


def _source_flat(evo: Evolution, f: np.ndarray, j: int) -> np.ndarray:
    """Flat-frame ``pi_1^* f_j`` as a column block."""
    root = evo._root(j)
    vals = np.asarray(f[j])
    vals = vals[:, None] if vals.ndim == 1 else vals
    return np.concatenate([np.zeros_like(vals, dtype=complex), root[:, None] * vals])


def solve_inhomogeneous(evo: Evolution, datum: Optional[np.ndarray], source: Optional[np.ndarray]) -> np.ndarray:
    """``u(t) = pi_0 U(t,0) v - i pi_0 int_0^t U(t,s) pi_1^* f(s) ds`` on every grid time.

    ``datum`` is the stacked Cauchy datum at ``t = 0``; ``source`` has shape
    ``(n_times, n)``.  The Duhamel integral uses the trapezoid rule.
    """
    tg = evo.tg
    n = evo.n
    z = tg.zero_index
    dt = tg.step
    out = np.zeros((tg.n_times, n), dtype=complex)
    root0 = evo._root(z)
    Y0 = np.zeros((2 * n, 1), dtype=complex)
    if datum is not None:
        Y0 = (np.concatenate([root0, root0]) * np.asarray(datum, dtype=complex))[:, None]
    g = (lambda j: _source_flat(evo, source, j)) if source is not None else (lambda j: 0.0)
    out[z] = Y0[:n, 0] / root0
    for direction in (1, -1):
        Y = Y0.copy()
        j = z
        sgn = -1j * direction * dt / 2
        while 0 <= j + direction < tg.n_times:
            if direction > 0:
                Y = evo.step_flat(Y + sgn * g(j), j, True) + sgn * g(j + 1)
            else:
                Y = evo.step_flat(Y + sgn * g(j), j - 1, False) + sgn * g(j - 1)
            j += direction
            out[j] = Y[:n, 0] / evo._root(j)
    return out


def apply_discrete_P(reduced: ReducedModel, tg: TimeGrid, u: np.ndarray,
                     dynamics: Optional[ModelDynamics] = None) -> tuple[np.ndarray, np.ndarray]:
    """``d_t^2 u + r d_t u + a u`` by fourth-order central differences.

    Returns ``(indices, values)`` for the interior indices ``2 .. n_t - 3``.
    """
    dt = tg.step
    idx = np.arange(2, tg.n_times - 2)
    u_t = (-u[idx + 2] + 8 * u[idx + 1] - 8 * u[idx - 1] + u[idx - 2]) / (12 * dt)
    u_tt = (-u[idx + 2] + 16 * u[idx + 1] - 30 * u[idx] + 16 * u[idx - 1] - u[idx - 2]) / (12 * dt ** 2)
    out = np.empty_like(u_tt)
    for pos, j in enumerate(idx):
        t = tg.time(int(j))
        a = reduced.spatial_operator(t)
        r = reduced.damping(t)
        out[pos] = u_tt[pos] + r * u_t[pos] + a @ u[j]
    return idx, out


def slab_norm(tg: TimeGrid, values: np.ndarray, densities: np.ndarray, dx: float,
              indices: Optional[np.ndarray] = None) -> float:
    """``(sum_j <t_j>^{-2 gamma} dt ||v_j||^2_{rho_j})^{1/2}`` over the given indices."""
    idx = np.arange(tg.n_times) if indices is None else np.asarray(indices)
    w = tg.weights[idx]
    per = np.sum(np.abs(values) ** 2 * densities, axis=1) * dx
    return float(math.sqrt(np.sum(w * per)))


def densities_on_grid(evo: Evolution) -> np.ndarray:
    return evo.densities()
