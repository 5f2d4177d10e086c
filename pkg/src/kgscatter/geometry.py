"""Asymptotically flat 1+1 metrics, their validation, null geodesics and the
reduction to the model operator ``d_t^2 + r d_t + a(t)``.

Metrics are given by component functions of ``(t, x)`` that accept numpy
arrays.  The reduction follows the integral curves of
``v = g^{-1} dt / (dt . g^{-1} dt)`` from the slice ``t = 0``; in the resulting
chart the metric is ``-c^2 dt^2 + h_hat dx^2`` and the conformally rescaled
operator ``c^2 (-Box_g + V)`` has the model form with spatial metric
``h = h_hat / c^2`` and potential ``c^2 V``.
"""

from __future__ import annotations

import ast
import json
import math
import operator
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Optional

import numpy as np

from .grid_ops import SpatialGrid, full_nyquist_derivative, weighted_symmetrize
from .pseudodiff import fit_decay_values

Field = Callable[[np.ndarray, np.ndarray], np.ndarray]
CONFORMAL_EXPONENT_N = 2  # spacetime dimension 1 + d with d = 1


def _const(value: float) -> Field:
    return lambda t, x: np.full(np.broadcast(t, x).shape, float(value))


def _time_coordinate(t, x):
    return np.broadcast_to(np.asarray(t, dtype=float), np.broadcast(t, x).shape).copy()


@dataclass(frozen=True)
class MetricModel:
    g_tt: Field
    g_tx: Field
    g_xx: Field
    potential: Field
    mass: float = 1.0
    delta: float = 1.5
    time_function: Field = _time_coordinate
    name: str = "custom"
    shear_free: bool = False  # g_tx identically zero
    time_function_is_t: bool = True

    def metric(self, t, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
        return self.g_tt(t, x), self.g_tx(t, x), self.g_xx(t, x)

    def inverse_metric(self, t, x):
        gtt, gtx, gxx = self.metric(t, x)
        det = gtt * gxx - gtx ** 2
        return gxx / det, -gtx / det, gtt / det

    def flow_velocity(self, t, x) -> np.ndarray:
        """Spatial velocity ``dx/dt`` of the integral curves of ``v`` when ``t~ = t``."""
        _, gtx, gxx = self.metric(t, x)
        return -gtx / gxx


# ----------------------------------------------------------------------------
# Presets


def bump_profile(t, x, delta: float, width: float = 5.0) -> np.ndarray:
    """``<(t,x)>^{-delta}`` times the angular factor ``x/<(t,x)>`` and a spatial
    Gaussian envelope that keeps the perturbation inside ``|x| <~ 2 width``."""
    br2 = 1.0 + t ** 2 + x ** 2
    return br2 ** (-delta / 2.0) * (x / np.sqrt(br2)) * np.exp(-(x ** 2) / (2.0 * width ** 2))


def free_model(mass: float = 1.0, delta: float = 1.5) -> MetricModel:
    return MetricModel(_const(-1.0), _const(0.0), _const(1.0), _const(mass ** 2), mass, delta,
                       name="free", shear_free=True)


def bump_model(delta: float, mass: float = 1.0, amplitude: float = 1.0, shear: float = 0.0,
               name: Optional[str] = None) -> MetricModel:
    a = amplitude
    prof = lambda t, x: bump_profile(t, x, delta)  # noqa: E731
    m2 = mass ** 2
    return MetricModel(
        g_tt=lambda t, x: -(1.0 + 0.3 * a * prof(t, x)),
        g_tx=(lambda t, x: shear * prof(t, x)) if shear else _const(0.0),
        g_xx=lambda t, x: 1.0 + 0.4 * a * prof(t, x),
        potential=lambda t, x: m2 * (1.0 + 0.5 * a * prof(t, x)),
        mass=mass, delta=delta,
        name=name or f"bump{int(round(delta * 10))}",
        shear_free=not shear,
    )


def conformal_model(delta: float = 1.5, mass: float = 1.0, amplitude: float = 0.3) -> MetricModel:
    """``g = -dt^2 + (1 + beta)^2 dx^2`` with ``beta = amplitude * profile``."""
    beta = lambda t, x: amplitude * bump_profile(t, x, delta)  # noqa: E731
    return MetricModel(_const(-1.0), _const(0.0), lambda t, x: (1.0 + beta(t, x)) ** 2,
                       _const(mass ** 2), mass, delta, name="conformal", shear_free=True)


def flipped_model(mass: float = 1.0, delta: float = 1.5) -> MetricModel:
    """Spatial metric turns negative in a ball around the origin."""
    return MetricModel(_const(-1.0), _const(0.0),
                       lambda t, x: 1.0 - 2.5 * np.exp(-(t ** 2 + x ** 2) / 4.0),
                       _const(mass ** 2), mass, delta, name="flipped", shear_free=True)


PRESETS: Dict[str, Callable[..., MetricModel]] = {
    "free": free_model,
    "bump12": lambda mass=1.0: bump_model(1.2, mass),
    "bump15": lambda mass=1.0: bump_model(1.5, mass),
    "bump20": lambda mass=1.0: bump_model(2.0, mass),
    "shear15": lambda mass=1.0: bump_model(1.5, mass, shear=0.3, name="shear15"),
    "conformal": lambda mass=1.0: conformal_model(1.5, mass),
    "flipped": lambda mass=1.0: flipped_model(mass),
}
VALID_PRESETS = ("free", "bump12", "bump15", "bump20", "shear15", "conformal")


def preset(name: str, mass: float = 1.0) -> MetricModel:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; available: {sorted(PRESETS)}") from None
    return factory(mass=mass)


# ----------------------------------------------------------------------------
# Whitelisted expression grammar for custom metrics

_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
           ast.Div: operator.truediv, ast.Pow: operator.pow}
_UNARY = {ast.USub: operator.neg, ast.UAdd: operator.pos}
_FUNCS = {
    "exp": np.exp,
    "sqrt": np.sqrt,
    "gauss": lambda z, w: np.exp(-(z ** 2) / (w ** 2)),
    "bracket": lambda t, x: np.sqrt(1.0 + t ** 2 + x ** 2),
}


class ExpressionError(ValueError):
    pass


def compile_expression(text: str) -> Field:
    """Compile a coefficient expression in ``t`` and ``x``.

    Allowed: numbers, ``t``, ``x``, ``pi``, ``+ - * / **``, and the calls
    ``exp``, ``sqrt``, ``gauss(z, width)`` and ``bracket(t, x)``.
    """
    try:
        tree = ast.parse(text, mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse {text!r}: {exc.msg}") from None

    def check(node):
        if isinstance(node, ast.Expression):
            check(node.body)
        elif isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            check(node.left)
            check(node.right)
        elif isinstance(node, ast.UnaryOp) and type(node.op) in _UNARY:
            check(node.operand)
        elif isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            pass
        elif isinstance(node, ast.Name) and node.id in ("t", "x", "pi"):
            pass
        elif (isinstance(node, ast.Call) and isinstance(node.func, ast.Name)
              and node.func.id in _FUNCS and not node.keywords):
            for arg in node.args:
                check(arg)
        else:
            raise ExpressionError(f"disallowed construct in {text!r}: {ast.dump(node)[:60]}")

    check(tree)

    def evaluate(node, env):
        if isinstance(node, ast.Expression):
            return evaluate(node.body, env)
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](evaluate(node.left, env), evaluate(node.right, env))
        if isinstance(node, ast.UnaryOp):
            return _UNARY[type(node.op)](evaluate(node.operand, env))
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            return env[node.id]
        return _FUNCS[node.func.id](*[evaluate(a, env) for a in node.args])

    def field_fn(t, x):
        t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
        out = evaluate(tree, {"t": t, "x": x, "pi": math.pi})
        return np.broadcast_to(np.asarray(out, dtype=float), t.shape).copy()

    return field_fn


def model_from_spec(spec: dict) -> MetricModel:
    """Build a metric from ``{"g_tt": expr, "g_tx": expr, "g_xx": expr, "V": expr, "mass", "delta"}``."""
    required = ("g_tt", "g_tx", "g_xx", "V")
    missing = [k for k in required if k not in spec]
    if missing:
        raise ExpressionError(f"metric spec lacks {missing}")
    fns = {k: compile_expression(str(spec[k])) for k in required}
    shear_free = str(spec["g_tx"]).strip() in ("0", "0.0")
    return MetricModel(fns["g_tt"], fns["g_tx"], fns["g_xx"], fns["V"],
                       float(spec.get("mass", 1.0)), float(spec.get("delta", 1.5)),
                       name=str(spec.get("name", "custom")), shear_free=shear_free)


def load_model_file(path) -> MetricModel:
    return model_from_spec(json.loads(Path(path).read_text()))


# ----------------------------------------------------------------------------
# Validation


@dataclass
class ValidationReport:
    clauses: Dict[str, dict] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c["pass"] for c in self.clauses.values())

    def to_json(self) -> dict:
        return {"passed": self.passed, "clauses": self.clauses}


def validate_am(model: MetricModel, half_width: float = 40.0, box_length: float = 80.0,
                samples: int = 64, noise_floor: float = 1e-13) -> ValidationReport:
    """Check signature, time-function and decay clauses; never raises on failure."""
    report = ValidationReport()
    ts = np.linspace(-half_width, half_width, samples)
    xs = np.linspace(-box_length / 2, box_length / 2, samples)
    tt, xx = np.meshgrid(ts, xs, indexing="ij")
    gtt, gtx, gxx = model.metric(tt, xx)
    det = gtt * gxx - gtx ** 2
    bad = np.argwhere(~(det < 0))
    report.clauses["signature"] = {
        "pass": bad.size == 0,
        "violations": int(bad.shape[0]),
        "points": [(float(tt[i, j]), float(xx[i, j])) for i, j in bad[:10]],
    }

    h = 1e-5
    dtt = (model.time_function(tt + h, xx) - model.time_function(tt - h, xx)) / (2 * h)
    dtx = (model.time_function(tt, xx + h) - model.time_function(tt, xx - h)) / (2 * h)
    with np.errstate(divide="ignore", invalid="ignore"):
        itt, itx, ixx = gxx / det, -gtx / det, gtt / det
    norm = itt * dtt ** 2 + 2 * itx * dtt * dtx + ixx * dtx ** 2
    badt = np.argwhere(~(norm < 0))
    report.clauses["time_function"] = {
        "pass": badt.size == 0,
        "violations": int(badt.shape[0]),
        "points": [(float(tt[i, j]), float(xx[i, j])) for i, j in badt[:10]],
    }

    radii = np.geomspace(4.0, 400.0, 14)
    window = box_length / 4
    amps = []
    m2 = model.mass ** 2
    for radius in radii:
        xsh = np.linspace(-min(window, radius * 0.999), min(window, radius * 0.999), 201)
        tsh = np.sqrt(np.maximum(radius ** 2 - 1.0 - xsh ** 2, 0.0))
        tsh = np.concatenate([tsh, -tsh])
        xsh = np.concatenate([xsh, xsh])
        a_tt, a_tx, a_xx = model.metric(tsh, xsh)
        dev = np.max(np.abs(np.stack([a_tt + 1.0, a_tx, a_xx - 1.0,
                                      model.potential(tsh, xsh) - m2])))
        amps.append(dev)
    amps = np.asarray(amps)
    if np.all(amps <= noise_floor):
        report.clauses["decay"] = {"pass": True, "slope": None, "note": "below noise floor",
                                   "bound": -model.delta + 0.2}
    else:
        fit = fit_decay_values(radii, amps)
        report.clauses["decay"] = {"pass": bool(fit.slope <= -model.delta + 0.2),
                                   "slope": fit.slope, "r2": fit.r2,
                                   "bound": -model.delta + 0.2}
    return report


# ----------------------------------------------------------------------------
# Null geodesics


def _partial(fn: Field, t, x, axis: int, step: float = 1e-3) -> np.ndarray:
    """Fourth-order central difference of a field."""
    def shifted(s):
        return fn(t + s, x) if axis == 0 else fn(t, x + s)
    return (8 * (shifted(step) - shifted(-step)) - (shifted(2 * step) - shifted(-2 * step))) / (12 * step)


@dataclass
class GeodesicResult:
    path: np.ndarray  # columns t, x, tau, k
    hamiltonian: np.ndarray
    trapped: bool
    max_abs_x: float
    relative_drift: float


class StepSizeError(RuntimeError):
    pass


def project_null(model: MetricModel, t: float, x: float, tau: float, k: float) -> tuple[float, float]:
    """Adjust ``tau`` (keeping ``k``) so that ``xi . g^{-1} xi = 0``; keeps the sign of ``tau``."""
    itt, itx, ixx = (float(v) for v in model.inverse_metric(np.array(t), np.array(x)))
    disc = (itx * k) ** 2 - itt * ixx * k ** 2
    roots = [(-itx * k + s * math.sqrt(max(disc, 0.0))) / itt for s in (1.0, -1.0)]
    want = 1.0 if tau >= 0 else -1.0
    roots.sort(key=lambda r: (np.sign(r) != want, abs(r - tau)))
    return roots[0], k


def _hamiltonian(model: MetricModel, t, x, tau, k):
    itt, itx, ixx = model.inverse_metric(t, x)
    return itt * tau ** 2 + 2 * itx * tau * k + ixx * k ** 2


def _geodesic_rhs(model: MetricModel, state: np.ndarray) -> np.ndarray:
    t, x, tau, k = state
    itt, itx, ixx = model.inverse_metric(t, x)
    ham = lambda a, b: _hamiltonian(model, a, b, tau, k)  # noqa: E731
    return np.stack([2 * (itt * tau + itx * k), 2 * (itx * tau + ixx * k),
                     -_partial(ham, t, x, 0, 1e-4), -_partial(ham, t, x, 1, 1e-4)])


def trace_null_geodesics(model: MetricModel, inits, s_max: float = 200.0, step: float = 0.02,
                         box_length: float = 80.0, project: bool = True) -> list[GeodesicResult]:
    """RK4 integration of the Hamiltonian flow of ``p = xi . g^{-1}(y) xi`` for a batch."""
    rows = []
    for t0, x0, tau0, k0 in inits:
        if project:
            tau0, k0 = project_null(model, t0, x0, tau0, k0)
        rows.append((t0, x0, tau0, k0))
    state = np.array(rows, dtype=float).T
    n_steps = int(math.ceil(s_max / step))
    path = np.empty((n_steps + 1,) + state.shape)
    path[0] = state
    for i in range(n_steps):
        k1 = _geodesic_rhs(model, state)
        k2 = _geodesic_rhs(model, state + 0.5 * step * k1)
        k3 = _geodesic_rhs(model, state + 0.5 * step * k2)
        k4 = _geodesic_rhs(model, state + step * k3)
        state = state + step / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        path[i + 1] = state
    hvals = _hamiltonian(model, path[:, 0], path[:, 1], path[:, 2], path[:, 3])
    results = []
    for j in range(state.shape[1]):
        pj = path[:, :, j]
        scale = float(np.max(pj[:, 2] ** 2 + pj[:, 3] ** 2))
        drift = float(np.max(np.abs(hvals[:, j])) / scale)
        if drift > 1e-6:
            raise StepSizeError(f"Hamiltonian drifted by {drift:.2e}; reduce the step")
        max_x = float(np.max(np.abs(pj[:, 1])))
        results.append(GeodesicResult(pj.copy(), hvals[:, j].copy(), bool(max_x < box_length / 4),
                                      max_x, drift))
    return results


def null_geodesic_trace(model: MetricModel, init, s_max: float = 200.0, step: float = 0.02,
                        box_length: float = 80.0, project: bool = True) -> GeodesicResult:
    return trace_null_geodesics(model, [init], s_max, step, box_length, project)[0]


def random_null_initial_conditions(count: int, seed: int = 0, radius: float = 5.0):
    """Random base points with covectors of unit spatial size and random orientation."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        t0, x0 = rng.uniform(-radius, radius, size=2)
        tau_sign, k_sign = rng.choice([-1.0, 1.0], size=2)
        scale = rng.uniform(0.5, 1.5)
        out.append((float(t0), float(x0), tau_sign * scale, k_sign * scale))
    return out


# ----------------------------------------------------------------------------
# Flow chart


class ChartError(RuntimeError):
    pass


def _rk4_fibers(model: MetricModel, x0: np.ndarray, t_end: np.ndarray, steps: int,
                with_jacobian: bool = True, nodes: Optional[np.ndarray] = None):
    """Integrate ``(t, X)`` along ``v`` from ``(0, x0)`` to flow time ``t_end``.

    Works for a general time function: the flow parameter is ``t~``.  Returns
    the spacetime point and the derivative of the spatial coordinate with
    respect to ``x0``.  ``nodes`` overrides the uniform schedule with a shared
    sequence of flow times starting at 0.
    """
    x0 = np.asarray(x0, dtype=float)
    if nodes is None:
        t_end = np.broadcast_to(np.asarray(t_end, dtype=float), x0.shape)
        widths = [t_end / steps] * steps
    else:
        widths = list(np.diff(np.asarray(nodes, dtype=float)))

    def velocity(t, x):
        if model.time_function_is_t:
            return np.ones_like(x), model.flow_velocity(t, x)
        hh = 1e-5
        dtt = (model.time_function(t + hh, x) - model.time_function(t - hh, x)) / (2 * hh)
        dtx = (model.time_function(t, x + hh) - model.time_function(t, x - hh)) / (2 * hh)
        itt, itx, ixx = model.inverse_metric(t, x)
        vt = itt * dtt + itx * dtx
        vx = itx * dtt + ixx * dtx
        nrm = vt * dtt + vx * dtx
        return vt / nrm, vx / nrm

    def rhs(t, x, j):
        vt, vx = velocity(t, x)
        if not with_jacobian:
            return vt, vx, j
        eps = 1e-5
        _, vxp = velocity(t, x + eps)
        _, vxm = velocity(t, x - eps)
        return vt, vx, (vxp - vxm) / (2 * eps) * j

    t = np.zeros_like(x0)
    x = x0.copy()
    jac = np.ones_like(x0)
    for h in widths:
        a1 = rhs(t, x, jac)
        a2 = rhs(t + 0.5 * h * a1[0], x + 0.5 * h * a1[1], jac + 0.5 * h * a1[2])
        a3 = rhs(t + 0.5 * h * a2[0], x + 0.5 * h * a2[1], jac + 0.5 * h * a2[2])
        a4 = rhs(t + h * a3[0], x + h * a3[1], jac + h * a3[2])
        t = t + h / 6 * (a1[0] + 2 * a2[0] + 2 * a3[0] + a4[0])
        x = x + h / 6 * (a1[1] + 2 * a2[1] + 2 * a3[1] + a4[1])
        jac = jac + h / 6 * (a1[2] + 2 * a2[2] + 2 * a3[2] + a4[2])
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(jac))):
        raise ChartError("flow integration diverged")
    return t, x, jac


@dataclass
class Chart:
    """``chi(t, x) = phi_t(0, x)`` and its inverse, by fiber integration."""

    model: MetricModel
    step: float = 0.01

    def _steps(self, t) -> int:
        return max(8, int(math.ceil(float(np.max(np.abs(t))) / self.step)))

    def __call__(self, t, x) -> tuple[np.ndarray, np.ndarray]:
        t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
        if self.model.shear_free and self.model.time_function_is_t:
            return t.copy(), x.copy()
        tt, xx, _ = _rk4_fibers(self.model, x.ravel(), t.ravel(), self._steps(t), False)
        return tt.reshape(t.shape), xx.reshape(t.shape)

    def with_jacobian(self, t, x):
        t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
        if self.model.shear_free and self.model.time_function_is_t:
            return t.copy(), x.copy(), np.ones_like(x)
        tt, xx, jac = _rk4_fibers(self.model, x.ravel(), t.ravel(), self._steps(t), True)
        return tt.reshape(t.shape), xx.reshape(t.shape), jac.reshape(t.shape)

    def inverse(self, t, y) -> tuple[np.ndarray, np.ndarray]:
        """Chart coordinates of the spacetime point ``(t, y)`` (requires ``t~ = t``)."""
        if not self.model.time_function_is_t:
            raise ChartError("inverse chart implemented for t~ = t only")
        t, y = np.broadcast_arrays(np.asarray(t, float), np.asarray(y, float))
        if self.model.shear_free:
            return t.copy(), y.copy()
        steps = self._steps(t)
        h = -t.ravel() / steps
        tc = t.ravel().copy()
        xc = y.ravel().copy()
        w = self.model.flow_velocity
        for _ in range(steps):
            k1 = w(tc, xc)
            k2 = w(tc + 0.5 * h, xc + 0.5 * h * k1)
            k3 = w(tc + 0.5 * h, xc + 0.5 * h * k2)
            k4 = w(tc + h, xc + h * k3)
            xc = xc + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            tc = tc + h
        return t.copy(), xc.reshape(t.shape)


def flow_chart(model: MetricModel, step: float = 0.01) -> Chart:
    report = validate_am(model)
    if not report.passed:
        failing = [k for k, c in report.clauses.items() if not c["pass"]]
        raise ChartError(f"metric fails validation clauses {failing}")
    return Chart(model, step)


def chart_cross_term(chart: Chart, half_width: float = 20.0, window: float = 20.0,
                     samples: int = 32, fd_step: float = 1e-4) -> float:
    """Max ``|(chi^* g)_{tx}|`` on a sample of the slab, via finite differences."""
    ts = np.linspace(-half_width, half_width, samples)
    xs = np.linspace(-window, window, samples)
    tt, xx = np.meshgrid(ts, xs, indexing="ij")
    ct, cx = chart(tt, xx)
    # d chi / d t by finite differences in the flow parameter
    tp = chart(tt + fd_step, xx)
    tm = chart(tt - fd_step, xx)
    xp = chart(tt, xx + fd_step)
    xm = chart(tt, xx - fd_step)
    dt_t = (tp[0] - tm[0]) / (2 * fd_step)
    dt_x = (tp[1] - tm[1]) / (2 * fd_step)
    dx_t = (xp[0] - xm[0]) / (2 * fd_step)
    dx_x = (xp[1] - xm[1]) / (2 * fd_step)
    gtt, gtx, gxx = chart.model.metric(ct, cx)
    cross = gtt * dt_t * dx_t + gtx * (dt_t * dx_x + dt_x * dx_t) + gxx * dt_x * dx_x
    return float(np.max(np.abs(cross)))


def chart_roundtrip_error(chart: Chart, half_width: float = 20.0, window: float = 20.0,
                          samples: int = 32) -> float:
    ts = np.linspace(-half_width, half_width, samples)
    xs = np.linspace(-window, window, samples)
    tt, xx = np.meshgrid(ts, xs, indexing="ij")
    ct, cy = chart(tt, xx)
    _, back = chart.inverse(ct, cy)
    return float(np.max(np.abs(back - xx)))


@dataclass
class AsymptoticMaps:
    points: np.ndarray
    y_out: np.ndarray
    y_in: np.ndarray
    dy_out: np.ndarray
    dy_in: np.ndarray
    increments: Dict[str, float]
    decay_constant: Dict[str, float]


class ConvergenceError(RuntimeError):
    pass


def asymptotic_diffeos(model: MetricModel, points: np.ndarray, horizon: float = 800.0,
                       tol: float = 1e-4, step: float = 0.05) -> AsymptoticMaps:
    """``y_out/in(x) = lim_{t -> +-inf} pi_y chi(t, x)``.

    Estimates at ``T/2`` and ``T`` are combined by Richardson extrapolation
    assuming a ``T^{-delta}`` tail.
    """
    points = np.asarray(points, dtype=float)
    if model.shear_free and model.time_function_is_t:
        ones = np.ones_like(points)
        return AsymptoticMaps(points, points.copy(), points.copy(), ones, ones.copy(),
                              {"out": 0.0, "in": 0.0}, {"out": 0.0, "in": 0.0})
    results = {}
    increments = {}
    for label, sign in (("out", 1.0), ("in", -1.0)):
        estimates = []
        for horizon_k in (horizon / 2, horizon):
            # steps of about ``step`` near t = 0 growing like ``step * t / 2`` later on
            n_nodes = int(math.ceil(math.asinh(horizon_k / 2.0) / (step / 2.0)))
            nodes = sign * 2.0 * np.sinh(np.linspace(0.0, math.asinh(horizon_k / 2.0), n_nodes + 1))
            _, xk, jk = _rk4_fibers(model, points, None, 0, True, nodes)
            estimates.append((xk, jk))
        (x1, j1), (x2, j2) = estimates
        factor = 1.0 / (2.0 ** model.delta - 1.0)
        y = x2 + factor * (x2 - x1)
        dy = j2 + factor * (j2 - j1)
        increments[label] = float(np.max(np.abs(x2 - x1)))
        if increments[label] > tol:
            raise ConvergenceError(
                f"asymptotic map {label} not converged: successive estimates differ by "
                f"{increments[label]:.2e}")
        results[label] = (y, dy)
    consts = {}
    for label in ("out", "in"):
        y = results[label][0]
        consts[label] = float(np.max(np.abs(y - points) / (1 + points ** 2) ** ((1 - model.delta) / 2)))
    return AsymptoticMaps(points, results["out"][0], results["in"][0], results["out"][1],
                          results["in"][1], increments, consts)


# ----------------------------------------------------------------------------
# Reduced model


class ReductionError(RuntimeError):
    pass


def _fiber_derivative(fn: Field, t, x, w):
    """``d/dt fn(t, X(t))`` along a fiber with ``dX/dt = w``."""
    return _partial(fn, t, x, 0) + _partial(fn, t, x, 1) * w


class FiberTable:
    """Fibers through fixed base points, tabulated on a uniform time lattice.

    The lattice grows on demand in both directions.  Values between nodes use
    cubic Hermite interpolation with the exact time derivatives from the flow.
    """

    def __init__(self, model: MetricModel, base: np.ndarray, step: float):
        self.model = model
        self.step = step
        x0 = np.asarray(base, dtype=float)
        self._tables = {1: [(x0.copy(), np.ones_like(x0))], -1: [(x0.copy(), np.ones_like(x0))]}

    def _velocity(self, t, X, J):
        w = self.model.flow_velocity
        eps = 1e-5
        w_y = (w(t, X + eps) - w(t, X - eps)) / (2 * eps)
        return w(t, X), w_y * J

    def _extend(self, sign: int, count: int) -> None:
        table = self._tables[sign]
        h = sign * self.step
        while len(table) <= count:
            j = len(table) - 1
            t = j * h
            X, J = table[-1]
            k1 = self._velocity(t, X, J)
            k2 = self._velocity(t + h / 2, X + h / 2 * k1[0], J + h / 2 * k1[1])
            k3 = self._velocity(t + h / 2, X + h / 2 * k2[0], J + h / 2 * k2[1])
            k4 = self._velocity(t + h, X + h * k3[0], J + h * k3[1])
            table.append((X + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]),
                          J + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])))

    def node(self, sign: int, j: int):
        self._extend(sign, j)
        return self._tables[sign][j]

    def at(self, t: float):
        sign = 1 if t >= 0 else -1
        pos = abs(t) / self.step
        j = int(math.floor(pos + 1e-9))
        frac = pos - j
        if frac < 1e-9:
            X, J = self.node(sign, j)
            return X.copy(), J.copy()
        X0, J0 = self.node(sign, j)
        X1, J1 = self.node(sign, j + 1)
        t0 = sign * j * self.step
        t1 = sign * (j + 1) * self.step
        h = t1 - t0
        d0 = self._velocity(t0, X0, J0)
        d1 = self._velocity(t1, X1, J1)
        s = frac
        h00 = 2 * s ** 3 - 3 * s ** 2 + 1
        h10 = s ** 3 - 2 * s ** 2 + s
        h01 = -2 * s ** 3 + 3 * s ** 2
        h11 = s ** 3 - s ** 2
        X = h00 * X0 + h10 * h * d0[0] + h01 * X1 + h11 * h * d1[0]
        J = h00 * J0 + h10 * h * d0[1] + h01 * J1 + h11 * h * d1[1]
        return X, J


@dataclass
class ReducedModel:
    """Model-form coefficients on a spatial grid, evaluated lazily in ``t``."""

    model: MetricModel
    grid: SpatialGrid
    chart: Chart
    asymptotics: Optional[AsymptoticMaps] = None
    symmetrization_tol: float = 1e-8
    positivity_margin_fraction: float = 0.5
    _deriv: np.ndarray = field(default=None, repr=False)
    _cache: dict = field(default_factory=dict, repr=False)
    n_conformal: int = CONFORMAL_EXPONENT_N

    def __post_init__(self) -> None:
        self._deriv = full_nyquist_derivative(self.grid)
        self._fibers = FiberTable(self.model, self.grid.points, self.chart.step)

    @property
    def mass(self) -> float:
        return self.model.mass

    @property
    def delta(self) -> float:
        return self.model.delta

    @property
    def is_free(self) -> bool:
        return self.model.name == "free"

    def coefficients(self, t: float) -> dict:
        """Chart data and model coefficients at the grid points for time ``t``."""
        key = float(t)
        if key in self._cache:
            return self._cache[key]
        x = self.grid.points
        tt = np.full_like(x, key)
        if self.model.shear_free:
            X, Xx = x.copy(), np.ones_like(x)
        else:
            X, Xx = self._fibers.at(key)
        m = self.model
        gtt, gtx, gxx = m.metric(tt, X)
        det = gtt * gxx - gtx ** 2
        c2 = -det / gxx
        hhat = gxx * Xx ** 2
        h = hhat / c2
        V_hat = m.potential(tt, X)
        w = m.flow_velocity(tt, X) if not m.shear_free else np.zeros_like(X)
        c2_fn = lambda a, b: -(m.g_tt(a, b) * m.g_xx(a, b) - m.g_tx(a, b) ** 2) / m.g_xx(a, b)  # noqa: E731
        dlog_gxx = _fiber_derivative(m.g_xx, tt, X, w) / gxx
        dlog_c2 = _fiber_derivative(c2_fn, tt, X, w) / c2
        if m.shear_free:
            dlog_jac = np.zeros_like(X)
        else:
            eps = 1e-5
            w_y = (m.flow_velocity(tt, X + eps) - m.flow_velocity(tt, X - eps)) / (2 * eps)
            dlog_jac = w_y
        # r = d_t log |h|^{1/2} with h = g_xx X_x^2 / c^2
        r = 0.5 * (dlog_gxx + 2 * dlog_jac - dlog_c2)
        out = {"X": X, "Xx": Xx, "c": np.sqrt(c2), "c2": c2, "h_hat": hhat, "h": h,
               "density": np.sqrt(h), "V_hat": V_hat, "V": c2 * V_hat, "r": r}
        if len(self._cache) > 64:
            self._cache.clear()
        self._cache[key] = out
        return out

    def density(self, t: float) -> np.ndarray:
        return self.coefficients(t)["density"]

    def damping(self, t: float) -> np.ndarray:
        return self.coefficients(t)["r"]

    def spatial_operator(self, t: float, return_correction: bool = False):
        """``a(t) = -h^{-1/2} d_x h^{-1/2} d_x + c^2 V`` symmetrized for the density ``h^{1/2}``."""
        co = self.coefficients(t)
        mat = _divergence_form(self._deriv, co["h"], co["V"])
        sym, corr = weighted_symmetrize(mat, co["density"])
        if corr > self.symmetrization_tol * max(1.0, np.linalg.norm(mat)):
            raise ReductionError(f"self-adjointness correction {corr:.2e} exceeds tolerance")
        return (sym, corr) if return_correction else sym

    def positivity_margin(self, t: float) -> float:
        from .pseudodiff import weighted_eigh

        w, _, _ = weighted_eigh(self.spatial_operator(t), self.density(t))
        return float(w.min())

    def asymptotic_operator(self, which: str) -> tuple[np.ndarray, np.ndarray]:
        """``a_out`` or ``a_in`` and its density, from the asymptotic diffeomorphism."""
        if self.asymptotics is None:
            self.asymptotics = asymptotic_diffeos(self.model, self.grid.points)
        dy = self.asymptotics.dy_out if which == "out" else self.asymptotics.dy_in
        h = dy ** 2
        mat = _divergence_form(self._deriv, h, np.full_like(h, self.mass ** 2))
        sym, _ = weighted_symmetrize(mat, np.sqrt(h))
        return sym, np.sqrt(h)

    def transport_source(self, f_values: np.ndarray, times: np.ndarray) -> np.ndarray:
        """Move a scalar source from the original frame to the model frame.

        ``P~ = c^{1+n/2} chi^*P c^{1-n/2}``, so ``P u = f`` becomes
        ``P~ (c^{n/2-1} u o chi) = c^{1+n/2} (f o chi)``.  Inputs are samples at
        the original-frame grid points; the chart map is applied by
        trigonometric interpolation.
        """
        return self._transport(f_values, times, forward=True, is_source=True)

    def transport_solution(self, u_values: np.ndarray, times: np.ndarray) -> np.ndarray:
        """Model-frame solution back to the original frame."""
        return self._transport(u_values, times, forward=False, is_source=False)

    def transport_source_inverse(self, f_values: np.ndarray, times: np.ndarray) -> np.ndarray:
        return self._transport(f_values, times, forward=False, is_source=True)

    def transport_solution_inverse(self, u_values: np.ndarray, times: np.ndarray) -> np.ndarray:
        """Original-frame solution samples to the model frame."""
        return self._transport(u_values, times, forward=True, is_source=False)

    def _transport(self, values, times, forward: bool, is_source: bool):
        from .grid_ops import interpolation_matrix

        n = self.n_conformal
        out = np.empty_like(np.asarray(values, dtype=complex))
        for j, t in enumerate(times):
            co = self.coefficients(t)
            c = co["c"]
            if forward:
                interp = (np.eye(self.grid.n_points) if self.model.shear_free
                          else interpolation_matrix(self.grid, co["X"]))
                pulled = interp @ values[j]
                power = (1 + n / 2) if is_source else (n / 2 - 1)
                out[j] = c ** power * pulled
            else:
                power = (1 + n / 2) if is_source else (n / 2 - 1)
                unscaled = values[j] / c ** power
                if self.model.shear_free:
                    out[j] = unscaled
                else:
                    _, xs = self.chart.inverse(np.full_like(self.grid.points, t), self.grid.points)
                    out[j] = interpolation_matrix(self.grid, xs) @ unscaled
        return out


def _divergence_form(deriv: np.ndarray, h: np.ndarray, potential: np.ndarray) -> np.ndarray:
    inv_sqrt = 1.0 / np.sqrt(h)
    return -(inv_sqrt[:, None] * deriv) @ (inv_sqrt[:, None] * deriv) + np.diag(potential)


def reduce(model: MetricModel, grid: SpatialGrid, chart_step: float = 0.01) -> ReducedModel:
    """Build the model-form operator family for ``model`` on ``grid``."""
    if not model.time_function_is_t:
        raise ReductionError("reduction implemented for the time function t~ = t")
    chart = flow_chart(model, chart_step)
    reduced = ReducedModel(model, grid, chart)
    margin = reduced.positivity_margin(0.0)
    if margin < 0.5 * model.mass ** 2:
        raise ReductionError(f"a(0) positivity margin {margin:.3e} below m^2/2")
    return reduced


# ----------------------------------------------------------------------------
# Conformal-reduction consistency


def direct_operator(model: MetricModel, u: Field, t, y, step: float = 2e-3) -> np.ndarray:
    """``(-Box_g + V) u`` by nested fourth-order differences in ``(t, y)``."""
    def flux(component):
        def fn(a, b):
            gtt, gtx, gxx = model.metric(a, b)
            det = gtt * gxx - gtx ** 2
            vol = np.sqrt(-det)
            itt, itx, ixx = gxx / det, -gtx / det, gtt / det
            du_t = _partial(u, a, b, 0, step)
            du_x = _partial(u, a, b, 1, step)
            if component == 0:
                return vol * (itt * du_t + itx * du_x)
            return vol * (itx * du_t + ixx * du_x)
        return fn

    gtt, gtx, gxx = model.metric(t, y)
    vol = np.sqrt(-(gtt * gxx - gtx ** 2))
    box = (_partial(flux(0), t, y, 0, step) + _partial(flux(1), t, y, 1, step)) / vol
    return -box + model.potential(t, y) * u(t, y)


def reduced_operator_pointwise(model: MetricModel, chart: Chart, w: Field, t, x,
                               step: float = 2e-3) -> np.ndarray:
    """Model operator ``d_t^2 + r d_t + a`` applied to ``w`` at chart points."""
    def coeffs(a, b):
        _, X, Xx = chart.with_jacobian(a, b)
        gtt, gtx, gxx = model.metric(a, X)
        c2 = -(gtt * gxx - gtx ** 2) / gxx
        h = gxx * Xx ** 2 / c2
        return h, c2 * model.potential(a, X)

    def sqrt_h(a, b):
        return np.sqrt(coeffs(a, b)[0])

    def flux(a, b):
        return _partial(w, a, b, 1, step) / sqrt_h(a, b)

    h, vmod = coeffs(t, x)
    r = _partial(lambda a, b: np.log(sqrt_h(a, b)), t, x, 0, step)
    w_t = _partial(w, t, x, 0, step)
    w_tt = (-w(t + 2 * step, x) + 16 * w(t + step, x) - 30 * w(t, x)
            + 16 * w(t - step, x) - w(t - 2 * step, x)) / (12 * step ** 2)
    a_w = -_partial(flux, t, x, 1, step) / np.sqrt(h) + vmod * w(t, x)
    return w_tt + r * w_t + a_w


def conformal_consistency(model: MetricModel, chart: Optional[Chart] = None,
                          samples: int = 64, half_width: float = 4.0,
                          n: int = CONFORMAL_EXPONENT_N) -> float:
    """Relative mismatch between ``(P u) o chi`` and ``c^{-1-n/2} P~ (c^{n/2-1} u o chi)``."""
    chart = chart or Chart(model, step=0.02)

    def u(a, b):
        return np.exp(-((a - 0.3) ** 2 + (b + 0.5) ** 2) / 3.0) * (1.0 + 0.2 * b)

    def c_of(a, b):
        _, X = chart(a, b)
        gtt, gtx, gxx = model.metric(a, X)
        return np.sqrt(-(gtt * gxx - gtx ** 2) / gxx)

    def w(a, b):
        _, X = chart(a, b)
        return c_of(a, b) ** (n / 2 - 1) * u(a, X)

    ts = np.linspace(-half_width, half_width, samples)
    xs = np.linspace(-half_width, half_width, samples)
    tt, xx = np.meshgrid(ts, xs, indexing="ij")
    _, yy = chart(tt, xx)
    direct = direct_operator(model, u, tt, yy)
    reduced = reduced_operator_pointwise(model, chart, w, tt, xx) / c_of(tt, xx) ** (1 + n / 2)
    return float(np.max(np.abs(direct - reduced)) / np.max(np.abs(direct)))
