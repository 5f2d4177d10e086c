"""Wave operators, asymptotic data, Feynman wave operators and the index estimate.

Matrices act on weighted-frame Cauchy data unless stated otherwise.  Norms
and singular values are taken after moving to the flat two-component frame
through ``T``, where the charge form is ``diag(1, -1)`` and the Hilbert norm
is the plain ``l^2`` norm; this is the discrete stand-in for the energy norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import scipy.linalg

from .evolution import (DiagonalizationBundle, Evolution, FreeDynamics, TimeGrid, block_adjoint,
                        charge_form, charge_form_ad, evolution_table, from_flat, projection_minus,
                        projection_plus, to_flat)
from .geometry import ReducedModel
from .grid_ops import SpatialGrid, japanese_bracket, multiplier_matrix
from .pseudodiff import fit_decay_values


class ConvergenceError(RuntimeError):
    pass


class AmbiguousRankError(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# Asymptotic dynamics and vacuum projections


@dataclass
class AsymptoticDynamics:
    """Evolution generated by ``a_out`` or ``a_in`` with its density, exact via ``eigh``."""

    grid: SpatialGrid
    mass: float
    root: np.ndarray
    flat: FreeDynamics = field(repr=False)

    @classmethod
    def of(cls, reduced: ReducedModel, which: str) -> "AsymptoticDynamics":
        grid = reduced.grid
        if reduced.model.shear_free:
            return cls(grid, reduced.mass, np.ones(grid.n_points), FreeDynamics(grid, reduced.mass))
        op, density = reduced.asymptotic_operator(which)
        root = np.sqrt(density)
        flat = root[:, None] * op / root[None, :]
        flat = 0.5 * (flat + flat.conj().T)
        return cls(grid, reduced.mass, root, FreeDynamics(grid, reduced.mass, operator=flat))

    @classmethod
    def free(cls, grid: SpatialGrid, mass: float) -> "AsymptoticDynamics":
        return cls(grid, mass, np.ones(grid.n_points), FreeDynamics(grid, mass))

    @property
    def density(self) -> np.ndarray:
        return self.root ** 2

    def _w(self, mat: np.ndarray) -> np.ndarray:
        return from_flat(mat, self.root, self.root)

    def evolution(self, tau: float) -> np.ndarray:
        return self._w(self.flat.evolution(tau))

    def evolution_ad(self, tau: float) -> np.ndarray:
        return self._w(self.flat.evolution_ad(tau))

    def T(self) -> np.ndarray:
        return self._w(self.flat.T())

    def T_inv(self) -> np.ndarray:
        return self._w(self.flat.T_inv())

    def generator(self) -> np.ndarray:
        return self._w(self.flat.generator())


@dataclass
class VacuumProjections:
    c_plus: np.ndarray
    c_minus: np.ndarray
    displayed_plus: np.ndarray = field(repr=False)
    displayed_minus: np.ndarray = field(repr=False)
    displayed_mismatch: float
    displayed_idempotence_defect: float


def free_vacuum_projections(grid: SpatialGrid, mass: float,
                            dynamics: Optional[AsymptoticDynamics] = None) -> VacuumProjections:
    """``c^+- = Z pi^+- Z^{-1}`` with ``Z = T_free``.

    Also builds the matrix ``1/2 [[1, +-eps], [+-eps, 1]]`` and reports how far
    it is from ``c^+-`` and from being idempotent.  For Cauchy data
    ``(u, i^{-1} d_t u)`` the projection is ``1/2 [[1, +-eps^{-1}], [+-eps, 1]]``.
    """
    if not mass > 0:
        raise ValueError("the vacuum projections need m > 0")
    dyn = dynamics or AsymptoticDynamics.free(grid, mass)
    n = grid.n_points
    Z, Z_inv = dyn.T(), dyn.T_inv()
    c_plus = Z @ projection_plus(n) @ Z_inv
    c_minus = Z @ projection_minus(n) @ Z_inv
    eps = dyn.flat.eps * dyn.root[None, :] / dyn.root[:, None]
    eye = np.eye(n)
    shown = [0.5 * np.block([[eye, s * eps], [s * eps, eye]]) for s in (1.0, -1.0)]
    mismatch = float(np.linalg.norm(shown[0] - c_plus, 2) / np.linalg.norm(c_plus, 2))
    defect = float(np.linalg.norm(shown[0] @ shown[0] - shown[0], 2) / np.linalg.norm(shown[0], 2))
    return VacuumProjections(c_plus, c_minus, shown[0], shown[1], mismatch, defect)


def q_adjoint(mat: np.ndarray, density_out: np.ndarray, density_in: np.ndarray,
              ad: bool = False) -> np.ndarray:
    """Adjoint for the charge forms: ``q^{-1} M^* q`` with the weighted inner products."""
    n = len(density_out)
    q = charge_form_ad(n) if ad else charge_form(n)
    return q @ block_adjoint(mat, density_out, density_in) @ q


# ----------------------------------------------------------------------------
# Ladders and tails


def geometric_ladder(tg: TimeGrid, t_min: float = 2.5, ratio: float = math.sqrt(2.0)) -> List[int]:
    """Grid indices of ``t_min * ratio^k`` rounded to the grid, ending at ``T``; positive side."""
    times = []
    t = t_min
    while t < tg.half_width * (1 - 1e-9):
        times.append(round(t / tg.step) * tg.step)
        t *= ratio
    times.append(tg.half_width)
    return sorted({tg.index_of(s) for s in times if s > 0})


@dataclass
class TailFit:
    times: np.ndarray
    increments: np.ndarray
    slope: float
    r2: float
    tail: float
    converged: bool

    def to_json(self) -> dict:
        return {"times": self.times.tolist(), "increments": self.increments.tolist(),
                "slope": self.slope, "r2": self.r2, "tail": self.tail, "converged": self.converged}


def fit_tail(times: np.ndarray, values: List[np.ndarray], fit_from: float = 0.25) -> TailFit:
    """Fit ``||W(t_{k+1}) - W(t_k)|| ~ C t_k^{slope}`` on a geometric ladder.

    Only rungs with ``t_k >= fit_from * T`` enter the fit.  The tail beyond
    ``T`` is the geometric series continuing the last increment.
    """
    times = np.abs(np.asarray(times, dtype=float))
    incr = np.array([np.linalg.norm(values[k + 1] - values[k], 2) for k in range(len(values) - 1)])
    starts = times[:-1]
    if np.all(incr == 0):
        return TailFit(starts, incr, -math.inf, 1.0, 0.0, True)
    use = starts >= fit_from * times[-1]
    if use.sum() < 2:
        use = np.arange(len(starts)) >= len(starts) - 2
    fit = fit_decay_values(starts[use], incr[use])
    step_ratio = times[-1] / times[-2]
    factor = step_ratio ** fit.slope
    tail = incr[-1] * factor / (1 - factor) if factor < 1 else math.inf
    return TailFit(starts, incr, float(fit.slope), float(fit.r2), float(tail), bool(fit.slope < -0.5))


# ----------------------------------------------------------------------------
# Moller operators


@dataclass
class MollerSet:
    """Wave operators at the slab ends with their ladders.

    ``W_out`` maps out-data (asymptotic frame) to Cauchy data at ``t = 0``.
    ``Z0 = T(0)`` and ``Z_out``/``Z_in`` are the asymptotic diagonalizers.
    """

    reduced: ReducedModel = field(repr=False)
    tg: TimeGrid
    W_out: np.ndarray = field(repr=False)
    W_in: np.ndarray = field(repr=False)
    W_ad_out: Optional[np.ndarray] = field(default=None, repr=False)
    W_ad_in: Optional[np.ndarray] = field(default=None, repr=False)
    Z0: np.ndarray = field(default=None, repr=False)
    Z_out: np.ndarray = field(default=None, repr=False)
    Z_in: np.ndarray = field(default=None, repr=False)
    density0: np.ndarray = field(default=None, repr=False)
    out_dyn: AsymptoticDynamics = field(default=None, repr=False)
    in_dyn: AsymptoticDynamics = field(default=None, repr=False)
    fits: Dict[str, TailFit] = field(default_factory=dict)
    ladders: Dict[str, Dict[float, np.ndarray]] = field(default_factory=dict, repr=False)

    @property
    def converged(self) -> bool:
        return all(f.converged for f in self.fits.values())

    @property
    def tail(self) -> float:
        return max((f.tail for f in self.fits.values()), default=0.0)

    def energy_frame(self, mat: np.ndarray, side: str) -> np.ndarray:
        """Flat two-component form of a map from ``side``-data to data at ``t = 0``."""
        Z = self.Z_out if side == "out" else self.Z_in
        dyn = self.out_dyn if side == "out" else self.in_dyn
        return to_flat(np.linalg.solve(self.Z0, mat @ Z), np.sqrt(self.density0), dyn.root)

    def inverse(self, side: str) -> np.ndarray:
        """``W^{-1} = W^dagger`` (charge-form adjoint)."""
        W = self.W_out if side == "out" else self.W_in
        dyn = self.out_dyn if side == "out" else self.in_dyn
        return q_adjoint(W, self.density0, dyn.density)

    def unitarity_residual(self, side: str) -> float:
        """``||W^dagger q W - q||`` in the flat ad frame."""
        E = self.energy_frame(self.W_out if side == "out" else self.W_in, side)
        q = charge_form_ad(E.shape[0] // 2)
        return float(np.linalg.norm(E.conj().T @ q @ E - q, 2))

    def inverse_consistency(self, side: str) -> float:
        """``||W^dagger W - 1||`` (flat ad frame of the asymptotic side) with ``W^dagger`` from the adjoint formula."""
        W = self.W_out if side == "out" else self.W_in
        Z = self.Z_out if side == "out" else self.Z_in
        root = (self.out_dyn if side == "out" else self.in_dyn).root
        defect = np.linalg.solve(Z, (self.inverse(side) @ W - np.eye(W.shape[0])) @ Z)
        return float(np.linalg.norm(to_flat(defect, root, root), 2))

    def ad_consistency(self, side: str) -> float:
        """``||W - Z0 W^ad Z^{-1}||`` relative, in the flat ad frame."""
        W = self.W_out if side == "out" else self.W_in
        W_ad = self.W_ad_out if side == "out" else self.W_ad_in
        if W_ad is None:
            raise ValueError("the ad ladder was not computed")
        Z = self.Z_out if side == "out" else self.Z_in
        lhs = self.energy_frame(W, side)
        rhs = self.energy_frame(self.Z0 @ W_ad @ np.linalg.inv(Z), side)
        return float(np.linalg.norm(lhs - rhs, 2) / np.linalg.norm(lhs, 2))

    def to_json(self) -> dict:
        return {"tg": self.tg.to_json(), "fits": {k: v.to_json() for k, v in self.fits.items()},
                "converged": self.converged, "tail": self.tail}


def moller(reduced: ReducedModel, tg: TimeGrid, bundle: Optional[DiagonalizationBundle] = None,
           with_ad: bool = False, full: Optional[Evolution] = None, t_min: float = 2.5,
           require_convergence: bool = False) -> MollerSet:
    """``W_out/in = lim U(0, t) U_out/in(t, 0)`` evaluated on a ladder up to ``+-T``.

    With ``with_ad`` the ad-frame operators ``U^ad(0, t) U^ad_out/in(t, 0)`` are
    computed by the direct ad stepper, independently of the scalar ladder.
    """
    n = reduced.grid.n_points
    z = tg.zero_index
    bundle = bundle or DiagonalizationBundle(reduced, tg)
    out_dyn = AsymptoticDynamics.of(reduced, "out")
    in_dyn = AsymptoticDynamics.of(reduced, "in")
    density0 = reduced.density(0.0)
    ms = MollerSet(reduced, tg, None, None, Z0=bundle.T(0.0), Z_out=out_dyn.T(), Z_in=in_dyn.T(),
                   density0=density0, out_dyn=out_dyn, in_dyn=in_dyn)
    pos = geometric_ladder(tg, t_min)
    neg = [2 * z - j for j in pos]
    eye = np.eye(2 * n, dtype=complex)
    if reduced.is_free:
        ms.W_out = ms.W_in = eye.copy()
        ms.W_ad_out = ms.W_ad_in = eye.copy() if with_ad else None
        for side, idx in (("out", pos), ("in", neg)):
            ms.ladders[side] = {tg.time(j): eye for j in idx}
            ms.fits[side] = fit_tail(np.array([tg.time(j) for j in idx]), [eye for _ in idx])
        return ms
    full = full or Evolution(reduced, tg, "full", bundle)
    table = evolution_table(full, pos + neg)
    for side, idx, dyn in (("out", pos, out_dyn), ("in", neg, in_dyn)):
        rungs = {}
        for j in idx:
            t = tg.time(j)
            rungs[t] = table.backward[j] @ dyn.evolution(t)
        ms.ladders[side] = rungs
        times = np.array([tg.time(j) for j in idx])
        ms.fits[side] = fit_tail(times, [ms.energy_frame(rungs[t], side) for t in times])
        W = rungs[tg.time(idx[-1])]
        if side == "out":
            ms.W_out = W
        else:
            ms.W_in = W
    if with_ad:
        ad = Evolution(reduced, tg, "ad", bundle)
        ad_table = evolution_table(ad, [pos[-1], neg[-1]])
        ms.W_ad_out = ad_table.backward[pos[-1]] @ out_dyn.evolution_ad(tg.half_width)
        ms.W_ad_in = ad_table.backward[neg[-1]] @ in_dyn.evolution_ad(-tg.half_width)
    if require_convergence and not ms.converged:
        raise ConvergenceError(f"Moller ladder slopes {[f.slope for f in ms.fits.values()]} are not below -0.5")
    return ms


# ----------------------------------------------------------------------------
# Scattering data


@dataclass
class ScatteringData:
    rho_out: np.ndarray
    rho_in: np.ndarray
    rho_F: np.ndarray
    rho_Fbar: np.ndarray
    doubling_change: float
    stable: bool


def _data_norm(dyn: AsymptoticDynamics, datum: np.ndarray) -> float:
    """Norm of asymptotic Cauchy data in the flat ad frame."""
    ad = dyn.T_inv() @ datum
    root2 = np.concatenate([dyn.root, dyn.root])
    return float(np.linalg.norm(root2 * ad))


def _assemble(ms: MollerSet, rho_out, rho_in, change, tol) -> ScatteringData:
    proj_out = free_vacuum_projections(ms.reduced.grid, ms.reduced.mass, ms.out_dyn)
    proj_in = free_vacuum_projections(ms.reduced.grid, ms.reduced.mass, ms.in_dyn)
    rho_F = proj_out.c_plus @ rho_out + proj_in.c_minus @ rho_in
    rho_Fbar = proj_out.c_minus @ rho_out + proj_in.c_plus @ rho_in
    return ScatteringData(rho_out, rho_in, rho_F, rho_Fbar, change, change <= tol)


def scattering_data(ms: MollerSet, full: Evolution, datum: np.ndarray, tol: float = 1e-3) -> ScatteringData:
    """``rho_out/in = U_out/in(0, +-T) rho_{+-T}`` for the homogeneous solution with data ``datum`` at 0.

    The same limit at ``+-T/2`` gives the doubling change, relative to ``||rho||``.
    """
    tg = full.tg
    z = tg.zero_index
    half = tg.n_half // 2
    marks = [z + tg.n_half, z - tg.n_half, z + half, z - half]
    cols = {j: full.propagate(datum, z, j) for j in marks}
    rho = {}
    for j in marks:
        t = tg.time(j)
        dyn = ms.out_dyn if t > 0 else ms.in_dyn
        rho[j] = dyn.evolution(-t) @ cols[j]
    out_full, in_full = rho[marks[0]], rho[marks[1]]
    change = max(_data_norm(ms.out_dyn, out_full - rho[marks[2]]) / _data_norm(ms.out_dyn, out_full),
                 _data_norm(ms.in_dyn, in_full - rho[marks[3]]) / _data_norm(ms.in_dyn, in_full))
    return _assemble(ms, out_full, in_full, change, tol)


def field_scattering_data(ms: MollerSet, u: np.ndarray, tol: float = 1e-3) -> ScatteringData:
    """Asymptotic data of a spacetime field that solves ``P u = 0`` near both slab ends.

    Cauchy data are read off two steps inside each end with five-point stencils.
    """
    tg = ms.tg
    dt = tg.step

    def cauchy(j: int) -> np.ndarray:
        du = (-u[j + 2] + 8 * u[j + 1] - 8 * u[j - 1] + u[j - 2]) / (12 * dt)
        return np.concatenate([u[j], -1j * du])

    def limit(j: int) -> np.ndarray:
        t = tg.time(j)
        dyn = ms.out_dyn if t > 0 else ms.in_dyn
        return dyn.evolution(-t) @ cauchy(j)

    last = tg.n_times - 3
    half = tg.zero_index + tg.n_half // 2
    rho_out, rho_in = limit(last), limit(2)
    change = max(_data_norm(ms.out_dyn, rho_out - limit(half)) / max(_data_norm(ms.out_dyn, rho_out), 1e-300),
                 _data_norm(ms.in_dyn, rho_in - limit(2 * tg.zero_index - half))
                 / max(_data_norm(ms.in_dyn, rho_in), 1e-300))
    return _assemble(ms, rho_out, rho_in, change, tol)


def data_via_wave_operators(ms: MollerSet, bundle: DiagonalizationBundle, datum: np.ndarray,
                            side: str) -> np.ndarray:
    """``Z W^{ad dagger} T(0)^{-1} v``: asymptotic data from the ad wave operator."""
    W_ad = ms.W_ad_out if side == "out" else ms.W_ad_in
    dyn = ms.out_dyn if side == "out" else ms.in_dyn
    Z = ms.Z_out if side == "out" else ms.Z_in
    adj = q_adjoint(W_ad, ms.density0, dyn.density, ad=True)
    return Z @ adj @ bundle.T_inv(0.0) @ datum


# ----------------------------------------------------------------------------
# Feynman wave operators


def _frequency_block(grid: SpatialGrid, exponent: float) -> np.ndarray:
    mult = multiplier_matrix(grid, (1.0 + grid.wavenumbers ** 2) ** (exponent / 2.0))
    return np.kron(np.eye(2), mult)


def _position_block(grid: SpatialGrid, exponent: float, window: float = 0.25) -> np.ndarray:
    """``<x>^s`` with ``x`` clamped to the interior window ``|x| <= window L``."""
    lim = window * grid.box_length
    weights = japanese_bracket(np.clip(grid.points, -lim, lim)) ** exponent
    return np.kron(np.eye(2), np.diag(weights))


@dataclass
class FeynmanWaveOps:
    W_F: np.ndarray = field(repr=False)
    W_Fbar: np.ndarray = field(repr=False)
    K1_singular_values: np.ndarray = field(repr=False)
    K2_singular_values: np.ndarray = field(repr=False)
    smoothing_norms: Dict[str, float] = field(default_factory=dict)
    low_frequency_ratio: float = 0.0

    def ratio(self, k: int) -> float:
        s = self.K2_singular_values
        # K2 is dimensionless; below roundoff it is the zero operator
        return float(s[k - 1] / s[0]) if s[0] > 1e-12 else 0.0


def feynman_wave_ops(ms: MollerSet, alpha: float = 0.6, orders=(0, 1, 2), low_modes: int = 4) -> FeynmanWaveOps:
    """``W_F = W_out c^+ + W_in c^-`` and the proxies ``K1 = W_F W_F^dagger - 1``, ``K2 = W_F^dagger W_F - 1``.

    The smoothing norms are ``|| <D>^m <x>^a (W pi^+ W^{-1} - pi^+) <x>^a <D>^m ||`` for the
    flat ad-frame wave operators of both ends.
    """
    grid = ms.reduced.grid
    n = grid.n_points
    mass = ms.reduced.mass
    proj_out = free_vacuum_projections(grid, mass, ms.out_dyn)
    proj_in = free_vacuum_projections(grid, mass, ms.in_dyn)
    # both asymptotic frames coincide for the shear-free models used here; the
    # energy frame below uses the out frame
    W_F = ms.W_out @ proj_out.c_plus + ms.W_in @ proj_in.c_minus
    W_Fbar = ms.W_out @ proj_out.c_minus + ms.W_in @ proj_in.c_plus
    W_F_adj = q_adjoint(W_F, ms.density0, ms.out_dyn.density)
    eye = np.eye(2 * n)
    K2 = W_F_adj @ W_F - eye
    K1 = W_F @ W_F_adj - eye
    root_out = ms.out_dyn.root
    root0 = np.sqrt(ms.density0)
    K2_flat = to_flat(np.linalg.solve(ms.Z_out, K2 @ ms.Z_out), root_out, root_out)
    K1_flat = to_flat(np.linalg.solve(ms.Z0, K1 @ ms.Z0), root0, root0)
    s2 = np.linalg.svd(K2_flat, compute_uv=False)
    s1 = np.linalg.svd(K1_flat, compute_uv=False)
    norms = {}
    pi_plus = projection_plus(n)
    for side in ("out", "in"):
        E = ms.energy_frame(ms.W_out if side == "out" else ms.W_in, side)
        q = charge_form_ad(n)
        E_inv = q @ E.conj().T @ q
        R = E @ pi_plus @ E_inv - pi_plus
        X = _position_block(grid, alpha)
        for m in orders:
            D = _frequency_block(grid, m)
            norms[f"{side}:m={m}"] = float(np.linalg.norm(D @ X @ R @ X @ D, 2))
    # low-frequency probes: smoothed and plain norms of K2 applied to the lowest modes
    order = np.argsort(np.abs(grid.wavenumbers))[:low_modes]
    probes = []
    for idx in order:
        wave = grid.plane_wave(int(idx)) / math.sqrt(n)
        for block in range(2):
            v = np.zeros(2 * n, dtype=complex)
            v[block * n:(block + 1) * n] = wave
            probes.append(v)
    smooth = _frequency_block(grid, 2)
    ratios = []
    for v in probes:
        w = K2_flat @ v
        plain = np.linalg.norm(w)
        if plain > 1e-14:
            ratios.append(np.linalg.norm(smooth @ w) / plain)
    return FeynmanWaveOps(W_F, W_Fbar, s1, s2, norms, float(max(ratios, default=1.0)))


# ----------------------------------------------------------------------------
# Index


@dataclass
class IndexEstimate:
    index: int
    kernel_dimension: int
    cokernel_dimension: int
    singular_values: np.ndarray = field(repr=False)
    threshold: float
    gap: float
    confident: bool
    order: int

    def to_json(self) -> dict:
        return {"index": self.index, "kernel_dimension": self.kernel_dimension,
                "cokernel_dimension": self.cokernel_dimension, "threshold": self.threshold,
                "gap": self.gap, "confident": self.confident, "order": self.order,
                "smallest_singular_values": self.singular_values[-5:].tolist()}


def index_operator(ms: MollerSet) -> np.ndarray:
    """``c^- W_out^{-1} + c^+ W_in^{-1}`` in the flat frames (time-0 data to out data)."""
    grid = ms.reduced.grid
    proj_out = free_vacuum_projections(grid, ms.reduced.mass, ms.out_dyn)
    proj_in = free_vacuum_projections(grid, ms.reduced.mass, ms.in_dyn)
    A = proj_out.c_minus @ ms.inverse("out") + proj_in.c_plus @ ms.inverse("in")
    inner = np.linalg.solve(ms.Z_out, A @ ms.Z0)
    return to_flat(inner, ms.out_dyn.root, np.sqrt(ms.density0))


def index_estimate(ms: MollerSet, tau: float = 1e-6, order: int = 0, gap_required: float = 1e2,
                   strict: bool = False) -> IndexEstimate:
    """Count singular values below ``tau * sigma_max`` on both sides of the index operator.

    ``order`` conjugates by ``<D>^order`` on both components (the energy spaces
    of different regularity).  The gap is the ratio of the singular values
    straddling the threshold; with no small singular values it is
    ``sigma_min / (tau sigma_max)``.
    """
    A = index_operator(ms)
    if order:
        D = _frequency_block(ms.reduced.grid, order)
        A = D @ A @ np.linalg.inv(D)
    s = np.linalg.svd(A, compute_uv=False)
    thr = tau * s[0]
    small = int(np.sum(s < thr))
    rows, cols = A.shape
    ker = small + max(0, cols - rows)
    coker = small + max(0, rows - cols)
    if small == 0:
        gap = float(s[-1] / thr)
    elif small == len(s):
        gap = float(thr / s[0]) if s[0] > 0 else math.inf
    else:
        gap = float(s[len(s) - small - 1] / s[len(s) - small])
    confident = gap > gap_required
    if strict and not confident:
        raise AmbiguousRankError(f"no singular-value gap at tau = {tau}: gap {gap:.3g}")
    return IndexEstimate(ker - coker, ker, coker, s, float(thr), gap, confident, order)


def brute_force_index(matrix: np.ndarray, tau: float = 1e-6) -> int:
    """``dim ker - dim coker`` from pivoted QR of the matrix and of its adjoint."""
    def rank(M):
        _, R, _ = scipy.linalg.qr(M, pivoting=True)
        diag = np.abs(np.diag(R))
        return int(np.sum(diag > tau * diag[0])) if diag.size and diag[0] > 0 else 0

    rows, cols = matrix.shape
    return (cols - rank(matrix)) - (rows - rank(matrix.conj().T))


# ----------------------------------------------------------------------------
# Weighted propagation


@dataclass
class PropagationLadder:
    times: np.ndarray
    values: np.ndarray
    sup: float
    order: int
    weight: int


def weighted_propagation_check(reduced: ReducedModel, tg: TimeGrid, order: int, weight: int,
                               bundle: Optional[DiagonalizationBundle] = None,
                               window: float = 0.25) -> PropagationLadder:
    """``|| <D>^m <x>^k U^ad(0, t) (<x> + <t>)^{-k} <D>^{-m} ||`` on the positive ladder.

    ``U^ad`` comes from the direct ad stepper in the flat frame; ``<x>`` is
    evaluated with ``x`` clamped to the interior window.
    """
    grid = reduced.grid
    n = grid.n_points
    ladder = [tg.zero_index] + geometric_ladder(tg, t_min=tg.step * max(1, round(1.0 / tg.step)))
    if reduced.is_free:
        free = FreeDynamics(grid, reduced.mass)
        backward = {j: free.evolution_ad(-tg.time(j)) for j in ladder}
        roots = {j: np.ones(n) for j in ladder}
    else:
        bundle = bundle or DiagonalizationBundle(reduced, tg)
        ad = Evolution(reduced, tg, "ad", bundle)
        table = evolution_table(ad, ladder)
        backward = table.backward
        roots = {j: ad.roots()[j] for j in ladder}
    root0 = np.sqrt(reduced.density(0.0))
    D = _frequency_block(grid, order)
    D_inv = _frequency_block(grid, -order)
    lim = window * grid.box_length
    xb = japanese_bracket(np.clip(grid.points, -lim, lim))
    left = np.kron(np.ones(2), xb ** weight)
    values = []
    for j in ladder:
        t = tg.time(j)
        U = to_flat(backward[j], root0, roots[j])
        right = np.kron(np.ones(2), (xb + math.sqrt(1 + t * t)) ** (-weight))
        M = D @ (left[:, None] * U * right[None, :]) @ D_inv
        values.append(float(np.linalg.norm(M, 2)))
    values = np.array(values)
    return PropagationLadder(np.array([tg.time(j) for j in ladder]), values, float(values.max()), order, weight)
