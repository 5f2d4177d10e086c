"""Retarded, advanced and Feynman inverses of the model operator on a time slab.

All time integrals use the same quadrature: weight ``dt`` per grid time with
``theta(0) = 1/2`` on the diagonal.  With this choice the retarded and advanced
kernels are exact adjoints of each other for the slab pairing
``<f, g> = dt sum_j (f_j, g_j)_{rho_j}``, and sums are evaluated by the
one-step recursion

    W_0 = dt/2 g_0,    W_{j+1} = S_j (W_j + dt/2 g_j) + dt/2 g_{j+1},

which leaves ``W_j`` identically zero until the first nonzero source column.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import math

import numpy as np

from .evolution import (DiagonalizationBundle, Evolution, TimeGrid, apply_discrete_P, slab_norm)
from .geometry import ReducedModel


class CapExceeded(ValueError):
    pass


# ----------------------------------------------------------------------------
# Causal sums in the flat frame


def _causal_sum(evo: Evolution, sources: np.ndarray, forward: bool) -> np.ndarray:
    """``dt sum_k theta_jk U(t_j, t_k) g_k`` for flat-frame columns ``g`` of shape ``(n_t, 2n, m)``.

    ``forward=True`` sums over ``k <= j`` (retarded), otherwise ``k >= j``.
    """
    tg = evo.tg
    dt = tg.step
    n_t = tg.n_times
    out = np.zeros_like(sources)
    order = range(n_t) if forward else range(n_t - 1, -1, -1)
    W = None
    prev = None
    for j in order:
        if W is None:
            W = 0.5 * dt * sources[j]
        else:
            carry = W + 0.5 * dt * sources[prev]
            if np.any(carry):
                carry = evo.step_flat(carry, prev, True) if forward else evo.step_flat(carry, j, False)
            W = carry + 0.5 * dt * sources[j]
        out[j] = W
        prev = j
    return out


def _roots(evo: Evolution) -> np.ndarray:
    return evo.roots()


def _as_columns(f: np.ndarray) -> tuple[np.ndarray, bool]:
    f = np.asarray(f, dtype=complex)
    if f.ndim == 2:
        return f[:, :, None], True
    return f, False


def _scalar_sources_flat(evo: Evolution, f: np.ndarray) -> np.ndarray:
    """Flat-frame ``pi_1^* f`` for scalar sources ``(n_t, n, m)``."""
    roots = _roots(evo)
    zeros = np.zeros_like(f)
    return np.concatenate([zeros, roots[:, :, None] * f], axis=1)


def apply_retarded(evo: Evolution, f: np.ndarray) -> np.ndarray:
    """``(G_+ f)(t) = -i pi_0 int_{s <= t} U(t, s) pi_1^* f(s) ds`` (scalar level)."""
    return _scalar_causal(evo, f, forward=True)


def apply_advanced(evo: Evolution, f: np.ndarray) -> np.ndarray:
    """``(G_- f)(t) = i pi_0 int_{s >= t} U(t, s) pi_1^* f(s) ds`` (scalar level)."""
    return _scalar_causal(evo, f, forward=False)


def _scalar_causal(evo: Evolution, f: np.ndarray, forward: bool) -> np.ndarray:
    cols, squeeze = _as_columns(f)
    n = evo.n
    W = _causal_sum(evo, _scalar_sources_flat(evo, cols), forward)
    roots = _roots(evo)
    u = (-1j if forward else 1j) * W[:, :n, :] / roots[:, :, None]
    return u[:, :, 0] if squeeze else u


def apply_system_causal(evo: Evolution, f_sys: np.ndarray, forward: bool) -> np.ndarray:
    """``+- i int U(t, s) f(s) ds`` over ``s <= t`` (``+``) or ``s >= t`` (``-``) for
    two-component weighted-frame sources ``(n_t, 2n[, m])``."""
    f_sys = np.asarray(f_sys, dtype=complex)
    squeeze = f_sys.ndim == 2
    cols = f_sys[:, :, None] if squeeze else f_sys
    roots = _roots(evo)
    r2 = np.concatenate([roots, roots], axis=1)[:, :, None]
    W = _causal_sum(evo, r2 * cols, forward)
    out = (1j if forward else -1j) * W / r2
    return out[:, :, 0] if squeeze else out


# ----------------------------------------------------------------------------
# Feynman inverses


def _diag_columns(evo: Evolution) -> tuple[np.ndarray, np.ndarray]:
    """Flat-frame blocks of ``U^d(t_j, 0)`` for every grid time, shape ``(n_t, n, n)`` each."""
    n = evo.n
    tg = evo.tg
    z = tg.zero_index
    plus = np.empty((tg.n_times, n, n), dtype=complex)
    minus = np.empty_like(plus)
    start = np.eye(2 * n, dtype=complex)
    for direction in (1, -1):
        Y = start.copy()
        j = z
        plus[z], minus[z] = Y[:n, :n], Y[n:, n:]
        while 0 <= j + direction < tg.n_times:
            Y = evo.step_flat(Y, j if direction > 0 else j - 1, direction > 0)
            j += direction
            plus[j], minus[j] = Y[:n, :n].copy(), Y[n:, n:].copy()
    return plus, minus


def apply_feynman_ad_kernel(diag: Evolution, f_ad: np.ndarray,
                            columns: Optional[tuple[np.ndarray, np.ndarray]] = None) -> np.ndarray:
    """``G^ad_F f = i int_{s<t} U^d(t,0) pi^+ U^d(0,s) f - i int_{s>t} U^d(t,0) pi^- U^d(0,s) f``.

    Uses stored columns ``U^d(t_j, 0)`` and ``U^d(0, s) = U^d(s, 0)^{-1}``
    with cumulative sums; weighted-frame input and output.
    """
    if diag.flavor != "diag":
        raise ValueError("the displayed kernel needs the diag flavor")
    plus, minus = columns if columns is not None else _diag_columns(diag)
    f_ad = np.asarray(f_ad, dtype=complex)
    squeeze = f_ad.ndim == 2
    cols = f_ad[:, :, None] if squeeze else f_ad
    n = diag.n
    dt = diag.tg.step
    roots = _roots(diag)
    fp = roots[:, :, None] * cols[:, :n]
    fm = roots[:, :, None] * cols[:, n:]
    # U^d is unitary in the flat frame
    back_p = np.einsum("jba,jbm->jam", plus.conj(), fp)
    back_m = np.einsum("jba,jbm->jam", minus.conj(), fm)
    cum_p = np.cumsum(back_p, axis=0) - 0.5 * back_p
    cum_m = np.cumsum(back_m[::-1], axis=0)[::-1] - 0.5 * back_m
    out_p = 1j * dt * np.einsum("jab,jbm->jam", plus, cum_p)
    out_m = -1j * dt * np.einsum("jab,jbm->jam", minus, cum_m)
    out = np.concatenate([out_p / roots[:, :, None], out_m / roots[:, :, None]], axis=1)
    return out[:, :, 0] if squeeze else out


def apply_feynman_ad(diag: Evolution, f_ad: np.ndarray) -> np.ndarray:
    """``G^ad_F = G^d_+ pi^+ + G^d_- pi^-`` by the causal recursion."""
    f_ad = np.asarray(f_ad, dtype=complex)
    n = diag.n
    fp = np.zeros_like(f_ad)
    fm = np.zeros_like(f_ad)
    fp[:, :n] = f_ad[:, :n]
    fm[:, n:] = f_ad[:, n:]
    return apply_system_causal(diag, fp, True) + apply_system_causal(diag, fm, False)


def transport_to_ad(bundle: DiagonalizationBundle, f: np.ndarray) -> np.ndarray:
    """``f^ad = T^{-1} pi_1^* f`` at each grid time (weighted frame)."""
    tg = bundle.tg
    n = bundle.n
    f = np.asarray(f, dtype=complex)
    squeeze = f.ndim == 2
    cols = f[:, :, None] if squeeze else f
    out = np.empty((tg.n_times, 2 * n, cols.shape[2]), dtype=complex)
    for j in range(tg.n_times):
        out[j] = bundle.grid_frames(j)[1][:, n:] @ cols[j]
    return out[:, :, 0] if squeeze else out


def apply_T(bundle: DiagonalizationBundle, states: np.ndarray) -> np.ndarray:
    tg = bundle.tg
    out = np.empty_like(states)
    for j in range(tg.n_times):
        out[j] = bundle.grid_frames(j)[0] @ states[j]
    return out


def apply_feynman(diag: Evolution, f: np.ndarray, kernel: str = "recursion") -> np.ndarray:
    """Scalar Feynman inverse ``G_F = -pi_0 T G^ad_F T^{-1} pi_1^*`` in the model frame."""
    bundle = diag.bundle
    n = diag.n
    f_ad = transport_to_ad(bundle, f)
    g_ad = apply_feynman_ad(diag, f_ad) if kernel == "recursion" else apply_feynman_ad_kernel(diag, f_ad)
    return -apply_T(bundle, g_ad)[:, :n]


def _fd_time_derivative(values: np.ndarray, idx: np.ndarray, dt: float) -> np.ndarray:
    return (-values[idx + 2] + 8 * values[idx + 1] - 8 * values[idx - 1] + values[idx - 2]) / (12 * dt)


def _half_order_norm(diag: Evolution, flat: np.ndarray, idx: np.ndarray) -> float:
    """Slab norm of flat-frame two-component fields with ``eps(t)^{1/2}`` applied to each block."""
    tg = diag.tg
    n = diag.n
    total = 0.0
    for j in idx:
        node = diag.dyn.node(tg.time(int(j)))
        half = (node.vecs * node.omega ** 0.5) @ node.vecs.conj().T
        block = np.concatenate([half @ flat[j, :n], half @ flat[j, n:]])
        total += tg.weights[j] * diag.reduced.grid.dx * float(np.sum(np.abs(block) ** 2))
    return math.sqrt(total)


@dataclass
class FeynmanRemainder:
    """Remainder structure of ``P G_F - 1`` on one source.

    ``residual_norm`` is the measured ``||P G_F f - f||``; ``predicted`` is
    ``e_1 - i d_t e_0 - i r e_0`` with ``e = T V^ad G^ad_F f^ad``;
    ``ad_remainder_norm`` is ``||V^ad G^ad_F f^ad||`` with half an order of
    ``eps`` on the two-component side, the pairing under which ``-pi_1 T``
    is order zero.
    """

    indices: np.ndarray = field(repr=False)
    residual: np.ndarray = field(repr=False)
    predicted: np.ndarray = field(repr=False)
    residual_norm: float
    predicted_norm: float
    mismatch_norm: float
    ad_remainder_norm: float
    ad_remainder_l2: float

    @property
    def ratio(self) -> float:
        return self.residual_norm / self.ad_remainder_norm


def feynman_remainder(diag: Evolution, f: np.ndarray) -> FeynmanRemainder:
    """Measure ``P G_F f - f`` and compare it with the prediction from ``V^ad``.

    With ``rho = -T G^ad_F f^ad`` one has ``(D_t - H) rho = -pi_1^* f - e``; since
    ``rho`` differs from the Cauchy data of ``u = pi_0 rho`` by ``e_0`` in the
    second slot, ``P u - f = e_1 - i d_t e_0 - i r e_0``.
    """
    bundle = diag.bundle
    reduced = diag.reduced
    tg = diag.tg
    n = diag.n
    f_ad = transport_to_ad(bundle, f)
    g_ad = apply_feynman_ad(diag, f_ad)
    vg = np.empty_like(g_ad)
    for j in range(tg.n_times):
        vg[j] = bundle.grid_frames(j)[2] @ g_ad[j]
    e = apply_T(bundle, vg)
    idx = np.arange(2, tg.n_times - 2)
    e0 = e[:, :n]
    r = np.array([reduced.damping(tg.time(int(j))) for j in idx])
    pred = e[idx, n:] - 1j * _fd_time_derivative(e0, idx, tg.step) - 1j * r * e0[idx]
    u = -apply_T(bundle, g_ad)[:, :n]
    _, Pu = apply_discrete_P(reduced, tg, u)
    res = Pu - f[idx]
    dens = diag.densities()
    dx = reduced.grid.dx
    roots2 = np.concatenate([diag.roots(), diag.roots()], axis=1)
    vg_flat = roots2 * vg
    l2 = slab_norm(tg, vg_flat[idx], np.ones((len(idx), 2 * n)), dx, idx)
    return FeynmanRemainder(idx, res, pred, slab_norm(tg, res, dens[idx], dx, idx),
                            slab_norm(tg, pred, dens[idx], dx, idx),
                            slab_norm(tg, res - pred, dens[idx], dx, idx),
                            _half_order_norm(diag, vg_flat, idx), l2)


def ad_feynman_residual(diag: Evolution, f_ad: np.ndarray) -> dict:
    """``(D_t - H^ad) G^ad_F f^ad - f^ad`` against ``V^ad G^ad_F f^ad`` (flat frame, interior times)."""
    bundle = diag.bundle
    tg = diag.tg
    g = apply_feynman_ad(diag, f_ad)
    roots2 = np.concatenate([diag.roots(), diag.roots()], axis=1)
    g_flat = roots2 * g
    f_flat = roots2 * np.asarray(f_ad, dtype=complex)
    idx = np.arange(2, tg.n_times - 2)
    dg = -1j * _fd_time_derivative(g_flat, idx, tg.step)
    res = np.empty((len(idx), 2 * diag.n), dtype=complex)
    vg = np.empty_like(res)
    for pos, j in enumerate(idx):
        gen = bundle.generator_ad(tg.time(int(j)))
        res[pos] = dg[pos] - gen.H_ad @ g_flat[j] - f_flat[j]
        vg[pos] = gen.V_ad @ g_flat[j]
    ones = np.ones_like(res, dtype=float)
    dx = diag.reduced.grid.dx
    return {"residual_norm": slab_norm(tg, res, ones, dx, idx),
            "ad_remainder_norm": slab_norm(tg, vg, ones, dx, idx),
            "mismatch_norm": slab_norm(tg, res - vg, ones, dx, idx)}


# ----------------------------------------------------------------------------
# Frames


FRAMES = ("model", "original")


@dataclass
class SpacetimeField:
    """Samples ``values[j, i]`` at ``(t_j, x_i)`` tagged with their frame and role."""

    values: np.ndarray
    times: np.ndarray
    frame: str = "model"
    is_source: bool = False

    def __post_init__(self) -> None:
        if self.frame not in FRAMES:
            raise ValueError(f"unknown frame {self.frame!r}")
        self.values = np.asarray(self.values, dtype=complex)
        self.times = np.asarray(self.times, dtype=float)

    def to_frame(self, reduced: ReducedModel, frame: str) -> "SpacetimeField":
        if frame == self.frame:
            return self
        if frame == "model":
            vals = (reduced.transport_source if self.is_source else reduced.transport_solution_inverse)(
                self.values, self.times)
        else:
            vals = (reduced.transport_source_inverse if self.is_source else reduced.transport_solution)(
                self.values, self.times)
        return SpacetimeField(vals, self.times, frame, self.is_source)


def apply_in_frame(apply: Callable[[np.ndarray], np.ndarray], reduced: ReducedModel,
                   source: SpacetimeField) -> SpacetimeField:
    """Run a model-frame propagator on a source given in either frame; the result keeps that frame."""
    model_src = source.to_frame(reduced, "model")
    out = SpacetimeField(apply(model_src.values), source.times, "model", False)
    return out.to_frame(reduced, source.frame)


# ----------------------------------------------------------------------------
# Kernels, residuals and forms


@dataclass
class PropagatorKernel:
    """Block kernel ``(t_j, s_k) -> G(t_j, s_k)`` given by applying ``G`` to unit sources."""

    flavor: str
    level: str
    tg: TimeGrid
    n: int
    apply: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    dense: Optional[np.ndarray] = field(default=None, repr=False)

    def materialize(self, cap: int = 4096) -> np.ndarray:
        """Dense ``(n_t n) x (n_t n)`` matrix of the scalar kernel including quadrature weights."""
        size = self.tg.n_times * self.n
        if size > cap:
            raise CapExceeded(f"n * n_t = {size} exceeds the dense cap {cap}")
        if self.dense is None:
            dense = np.empty((size, size), dtype=complex)
            for lo in range(0, size, 256):
                hi = min(size, lo + 256)
                unit = np.zeros((size, hi - lo), dtype=complex)
                unit[np.arange(lo, hi), np.arange(hi - lo)] = 1.0
                cols = self.apply(unit.reshape(self.tg.n_times, self.n, hi - lo))
                dense[:, lo:hi] = cols.reshape(size, hi - lo)
            self.dense = dense
        return self.dense

    def block(self, j: int, k: int) -> np.ndarray:
        dense = self.materialize()
        n = self.n
        return dense[j * n:(j + 1) * n, k * n:(k + 1) * n] / self.tg.step


def scalar_kernel(flavor: str, evo: Evolution) -> PropagatorKernel:
    appliers = {
        "ret": lambda f: apply_retarded(evo, f),
        "adv": lambda f: apply_advanced(evo, f),
        "feyn": lambda f: apply_feynman(evo, f),
    }
    return PropagatorKernel(flavor, "scalar", evo.tg, evo.n, appliers[flavor])


def _pairing_weights(evo: Evolution) -> np.ndarray:
    dens = evo.densities()
    return (evo.tg.step * evo.reduced.grid.dx * dens).ravel()


def hermitian_form(kernel: PropagatorKernel, evo: Evolution, cap: int = 4096) -> np.ndarray:
    """Matrix of ``f -> <f, i (G - G^*) f>`` for the slab pairing."""
    G = kernel.materialize(cap)
    B = _pairing_weights(evo)[:, None] * G
    form = 1j * (B - B.conj().T)
    return 0.5 * (form + form.conj().T)


@dataclass
class PositivityResult:
    min_eigenvalue: float
    max_eigenvalue: float
    relative_min: float
    eigenvalues: np.ndarray = field(repr=False)


def positivity_check(kernel: PropagatorKernel, evo: Evolution, cap: int = 4096) -> PositivityResult:
    form = hermitian_form(kernel, evo, cap)
    w = np.linalg.eigvalsh(form)
    top = float(np.max(np.abs(w)))
    return PositivityResult(float(w.min()), float(w.max()), float(w.min()) / top if top else 0.0, w)


def adjoint_pairing_residual(evo: Evolution, sources: list[np.ndarray]) -> float:
    """Max ``|<g, G_+ f> - <G_- g, f>|`` over pairs, relative to the Gram scale."""
    dens = evo.densities()
    dx = evo.reduced.grid.dx
    dt = evo.tg.step

    def pair(a, b):
        return dt * dx * np.sum(np.conj(a) * b * dens)

    plus = [apply_retarded(evo, f) for f in sources]
    minus = [apply_advanced(evo, f) for f in sources]
    worst = 0.0
    scale = 0.0
    for i, g in enumerate(sources):
        for k, f in enumerate(sources):
            lhs = pair(g, plus[k])
            rhs = pair(minus[i], f)
            worst = max(worst, abs(lhs - rhs))
            scale = max(scale, abs(lhs))
    return worst / scale


def retarded_route_residual(full: Evolution, ad: Evolution, sources: list[np.ndarray]) -> float:
    """Max relative gap between ``G_+ f`` and ``-pi_0 T G^ad_+ T^{-1} pi_1^* f``.

    ``full`` and ``ad`` must share a time grid; ``ad`` carries the bundle.
    """
    n = full.n
    worst = 0.0
    for f in sources:
        direct = apply_retarded(full, f)
        via_ad = -apply_T(ad.bundle, apply_system_causal(ad, transport_to_ad(ad.bundle, f), True))[:, :n]
        worst = max(worst, float(np.abs(direct - via_ad).max() / np.abs(direct).max()))
    return worst


def relative_residual(reduced: ReducedModel, tg: TimeGrid, u: np.ndarray, f: np.ndarray) -> float:
    """``||P u - f|| / ||f||`` in the weighted slab norm over the interior indices."""
    idx, Pu = apply_discrete_P(reduced, tg, u)
    dens = np.array([reduced.density(tg.time(int(j))) for j in idx])
    dx = reduced.grid.dx
    return slab_norm(tg, Pu - f[idx], dens, dx, idx) / slab_norm(tg, f[idx], dens, dx, idx)


def discrete_P(reduced: ReducedModel, tg: TimeGrid, u: np.ndarray) -> np.ndarray:
    """``P u`` on interior times; the two outermost times on each side are set to zero."""
    idx, Pu = apply_discrete_P(reduced, tg, u)
    out = np.zeros_like(u, dtype=complex)
    out[idx] = Pu
    return out


@dataclass
class InversionReport:
    flavor: str
    forward_residuals: list
    backward_residuals: list
    remainder_norms: list = field(default_factory=list)
    predicted_norms: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in ("flavor", "forward_residuals", "backward_residuals",
                                              "remainder_norms", "predicted_norms")}


def _compact_source(tg: TimeGrid, grid, rng: np.random.Generator, center: Optional[float] = None,
                    width: Optional[float] = None) -> np.ndarray:
    from .grid_ops import smoothed_random_field

    span = tg.half_width
    center = rng.uniform(-0.3 * span, 0.3 * span) if center is None else center
    width = 0.12 * span if width is None else width
    profile = smoothed_random_field(grid, rng) * np.exp(-grid.points ** 2 / (2 * (grid.box_length / 16) ** 2))
    return np.exp(-((tg.times - center) / width) ** 2)[:, None] * profile[None, :]


def random_sources(tg: TimeGrid, grid, count: int, seed: int = 0) -> list[np.ndarray]:
    """Seeded smooth sources localized in the slab interior."""
    rng = np.random.default_rng(seed)
    return [_compact_source(tg, grid, rng) for _ in range(count)]


def inversion_report(flavor: str, evo: Evolution, samples: int = 4, seed: int = 0) -> InversionReport:
    """Residuals of ``P G f - f`` and of ``G P u - u`` on inputs ``u = G g``.

    Inputs of the form ``G g`` lie in the constrained space of the flavor, which
    is where ``G P = 1`` is expected.

    Interior slab norms; the outermost two time slices are excluded because the
    discrete ``P`` is a centered five-point stencil.
    """
    reduced, tg = evo.reduced, evo.tg
    apply = {"ret": lambda f: apply_retarded(evo, f), "adv": lambda f: apply_advanced(evo, f),
             "feyn": lambda f: apply_feynman(evo, f)}[flavor]
    report = InversionReport(flavor, [], [])
    idx = np.arange(2, tg.n_times - 2)
    dens = np.array([reduced.density(tg.time(int(j))) for j in idx])
    dx = reduced.grid.dx
    sources = random_sources(tg, reduced.grid, 2 * samples, seed)
    for f in sources[:samples]:
        report.forward_residuals.append(relative_residual(reduced, tg, apply(f), f))
        if flavor == "feyn":
            rem = feynman_remainder(evo, f)
            report.remainder_norms.append(rem.ad_remainder_norm)
            report.predicted_norms.append(rem.predicted_norm)
    for g in sources[samples:]:
        u = apply(g)
        back = apply(discrete_P(reduced, tg, u))
        diff = slab_norm(tg, back[idx] - u[idx], dens, dx, idx)
        report.backward_residuals.append(diff / slab_norm(tg, u[idx], dens, dx, idx))
    return report


# ----------------------------------------------------------------------------
# Mode kernels


def mode_kernel(apply: Callable[[np.ndarray], np.ndarray], tg: TimeGrid, grid, mode: int,
                source_index: int) -> np.ndarray:
    """Time kernel ``g(t_j, s)`` of a scalar propagator restricted to one Fourier mode."""
    wave = grid.plane_wave(mode)
    f = np.zeros((tg.n_times, grid.n_points), dtype=complex)
    f[source_index] = wave / tg.step
    u = apply(f)
    return u @ wave.conj() / np.vdot(wave, wave)


def feynman_mode_oracle(omega: float, tau: np.ndarray) -> np.ndarray:
    """Solution of ``(d_t^2 + omega^2) g = delta`` that is ``e^{i omega t}`` as ``t -> +inf`` and
    ``e^{-i omega t}`` as ``t -> -inf``; the jump ``g'(0+) - g'(0-) = 1`` fixes ``-i/(2 omega)``."""
    amp = 1.0 / (2j * omega)
    return amp * np.exp(1j * omega * np.abs(tau))


def spectrum_peaks(kernel: np.ndarray, tau_step: float) -> dict:
    """Peak frequencies of the discrete time-Fourier transform of a mode kernel.

    Uses the convention ``hat g(nu) = sum_j g(tau_j) e^{-i nu tau_j} dt``, returning the
    strongest positive and negative frequency peaks and the sign of the imaginary
    part there.
    """
    m = len(kernel)
    spec = np.fft.fftshift(np.fft.fft(np.fft.ifftshift(kernel))) * tau_step
    freqs = np.fft.fftshift(np.fft.fftfreq(m, d=tau_step)) * 2 * np.pi
    pos = freqs > 0
    neg = freqs < 0
    i_pos = np.flatnonzero(pos)[np.argmax(np.abs(spec[pos]))]
    i_neg = np.flatnonzero(neg)[np.argmax(np.abs(spec[neg]))]
    return {"positive": float(freqs[i_pos]), "negative": float(freqs[i_neg]),
            "bin": float(freqs[1] - freqs[0]),
            "imag_sign_positive": float(np.sign(spec[i_pos].imag)),
            "imag_sign_negative": float(np.sign(spec[i_neg].imag))}
