"""Scenario configuration, the verification registry and the ``kgscatter`` command line.

A scenario is a JSON document validated against ``config_schema.json`` and
then checked for the constraints a schema cannot express (the admissible
``gamma`` window, ``dt`` dividing ``T``).  :class:`Scenario` builds the
numerical objects lazily so that a filtered ``verify`` only pays for what the
selected checks touch.
"""

from __future__ import annotations

import copy
import csv
import json
import math
import os
import sys
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import click
import jsonschema
import numpy as np

from . import evolution as ev
from . import geometry as geo
from . import propagators as prop
from . import pseudodiff as pdo
from . import scattering as sc
from .grid_ops import (SpatialGrid, fourier_derivative, smoothed_random_field, weight_operator,
                       weighted_adjoint)

OUTPUT_ENV = "KGSCATTER_OUTPUT_DIR"

DEFAULT_CONFIG: dict = {
    "model": {"preset": "bump15", "mass": 1.0},
    "grid": {"n": 32, "L": 40.0},
    "slab": {"T": 10.0, "dt": 0.025, "gamma": None},
    "physics": {"m": 1, "delta": None},
    "scattering": {"T": 40.0, "dt": 0.05},
    "positivity": {"n": 8, "T": 8.0, "dt": 0.5},
    "samples": 3,
    "seed": 0,
    "tolerances": {},
    "output_dir": "kgscatter-out",
    "emit_kernel": False,
}

EXIT_PASS, EXIT_LEDGER_FAILURE, EXIT_CONFIG_ERROR = 0, 1, 2


class ConfigError(ValueError):
    pass


# ----------------------------------------------------------------------------
# Configuration


def _schema() -> dict:
    return json.loads(resources.files("kgscatter").joinpath("config_schema.json").read_text())


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key != "tolerances":
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _divides(step: float, span: float) -> bool:
    ratio = span / step
    return abs(ratio - round(ratio)) <= 1e-9 * max(1.0, ratio)


@dataclass(frozen=True)
class ScenarioConfig:
    raw: dict = field(repr=False)
    preset: Optional[str]
    metric: Optional[dict]
    mass: float
    n: int
    box_length: float
    T: float
    dt: float
    gamma: Optional[float]
    order: int
    delta: float
    scattering_T: float
    scattering_dt: float
    positivity_n: int
    positivity_T: float
    positivity_dt: float
    samples: int
    seed: int
    tolerances: Dict[str, float]
    output_dir: str
    emit_kernel: bool

    @property
    def model_name(self) -> str:
        return self.preset or str(self.metric.get("name", "custom"))

    def to_json(self) -> dict:
        return copy.deepcopy(self.raw)


def load_config(source: Optional[dict | str | Path] = None, overrides: Optional[dict] = None,
                env: Optional[dict] = None) -> ScenarioConfig:
    """Merge ``source`` (a dict or JSON file) and ``overrides`` over the defaults and validate.

    Raises :class:`ConfigError` naming the violated constraint.
    """
    if source is None:
        user = {}
    elif isinstance(source, dict):
        user = source
    else:
        try:
            user = json.loads(Path(source).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {source}: {exc}") from None
    if not isinstance(user, dict):
        raise ConfigError("config must be a JSON object")
    raw = _merge(_merge(DEFAULT_CONFIG, user), overrides or {})
    # a model section is replaced wholesale so that a metric never sits beside a preset
    for layer in (user, overrides or {}):
        if "model" in layer:
            raw["model"] = copy.deepcopy(layer["model"])
    try:
        jsonschema.validate(raw, _schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None
    env = os.environ if env is None else env
    if env.get(OUTPUT_ENV):
        raw["output_dir"] = env[OUTPUT_ENV]
    return _semantic_checks(raw)


def _semantic_checks(raw: dict) -> ScenarioConfig:
    model = raw["model"]
    preset = model.get("preset")
    metric = model.get("metric")
    if preset is not None and preset not in geo.PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; available: {sorted(geo.PRESETS)}")
    if metric is not None:
        try:
            geo.model_from_spec(metric)
        except (geo.ExpressionError, ValueError, TypeError) as exc:
            raise ConfigError(f"metric spec rejected: {exc}") from None
    mass = float(metric.get("mass", 1.0) if metric is not None else model.get("mass", 1.0))
    if preset is not None:
        model_delta = geo.preset(preset, mass).delta
    else:
        model_delta = float(metric.get("delta", 1.5))
    delta = raw["physics"]["delta"]
    delta = model_delta if delta is None else float(delta)
    if not delta > 1:
        raise ConfigError(f"delta = {delta} must exceed 1 (short range)")
    gamma = raw["slab"]["gamma"]
    lo, hi = ev.admissible_gamma_interval(delta)
    if gamma is not None and not lo < gamma < hi:
        raise ConfigError(f"gamma = {gamma} violates 1/2 < γ < 1/2 + δ (δ = {delta})")
    spans = [("slab", raw["slab"]["T"], raw["slab"]["dt"]),
             ("scattering", raw["scattering"]["T"], raw["scattering"]["dt"]),
             ("scattering (half slab)", raw["scattering"]["T"] / 2, raw["scattering"]["dt"]),
             ("positivity", raw["positivity"]["T"], raw["positivity"]["dt"])]
    for name, span, step in spans:
        if not _divides(step, span):
            raise ConfigError(f"{name}: dt = {step} does not divide T = {span}")
    unknown = sorted(set(raw["tolerances"]) - set(ANCHORS))
    if unknown:
        raise ConfigError(f"tolerances given for unknown anchors {unknown}")
    return ScenarioConfig(
        raw=raw, preset=preset, metric=metric, mass=mass,
        n=int(raw["grid"]["n"]), box_length=float(raw["grid"]["L"]),
        T=float(raw["slab"]["T"]), dt=float(raw["slab"]["dt"]),
        gamma=None if gamma is None else float(gamma), order=int(raw["physics"]["m"]), delta=delta,
        scattering_T=float(raw["scattering"]["T"]), scattering_dt=float(raw["scattering"]["dt"]),
        positivity_n=int(raw["positivity"]["n"]), positivity_T=float(raw["positivity"]["T"]),
        positivity_dt=float(raw["positivity"]["dt"]),
        samples=int(raw["samples"]), seed=int(raw["seed"]),
        tolerances={k: float(v) for k, v in raw["tolerances"].items()},
        output_dir=str(raw["output_dir"]), emit_kernel=bool(raw["emit_kernel"]))


# ----------------------------------------------------------------------------
# Lazily built scenario objects


class Scenario:
    def __init__(self, config: ScenarioConfig):
        self.config = config

    # -- model and grids
    @cached_property
    def model(self) -> geo.MetricModel:
        c = self.config
        if c.preset is not None:
            return geo.preset(c.preset, c.mass)
        return geo.model_from_spec(c.metric)

    @cached_property
    def grid(self) -> SpatialGrid:
        return SpatialGrid(self.config.n, self.config.box_length)

    @cached_property
    def reduced(self) -> geo.ReducedModel:
        return geo.reduce(self.model, self.grid)

    @cached_property
    def free_reduced(self) -> geo.ReducedModel:
        return geo.reduce(geo.free_model(self.config.mass, self.config.delta), self.grid)

    def _time_grid(self, T: float, dt: float) -> ev.TimeGrid:
        return ev.TimeGrid.build(T, dt, self.config.delta, self.config.gamma)

    @cached_property
    def tg(self) -> ev.TimeGrid:
        return self._time_grid(self.config.T, self.config.dt)

    @cached_property
    def bundle(self) -> ev.DiagonalizationBundle:
        return ev.DiagonalizationBundle(self.reduced, self.tg)

    @cached_property
    def full(self) -> ev.Evolution:
        return ev.Evolution(self.reduced, self.tg, "full", self.bundle)

    @cached_property
    def diag(self) -> ev.Evolution:
        return ev.Evolution(self.reduced, self.tg, "diag", self.bundle)

    @cached_property
    def ad(self) -> ev.Evolution:
        return ev.Evolution(self.reduced, self.tg, "ad", self.bundle)

    @cached_property
    def sources(self) -> List[np.ndarray]:
        return prop.random_sources(self.tg, self.grid, self.config.samples, self.config.seed)

    @cached_property
    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.config.seed)

    def inversion(self, flavor: str) -> prop.InversionReport:
        cache = self.__dict__.setdefault("_inversion", {})
        if flavor not in cache:
            evo = self.diag if flavor == "feyn" else self.full
            cache[flavor] = prop.inversion_report(flavor, evo, self.config.samples, self.config.seed)
        return cache[flavor]

    @cached_property
    def feynman_remainders(self) -> List[prop.FeynmanRemainder]:
        return [prop.feynman_remainder(self.diag, f) for f in self.sources]

    def source_norm(self, f: np.ndarray) -> float:
        idx = np.arange(2, self.tg.n_times - 2)
        return ev.slab_norm(self.tg, f[idx], self.diag.densities()[idx], self.grid.dx, idx)

    @cached_property
    def decay(self) -> Dict[str, pdo.DecayFit]:
        return ev.decay_diagnostics(self.bundle)

    # -- positivity instance
    @cached_property
    def positivity_grid(self) -> SpatialGrid:
        return SpatialGrid(self.config.positivity_n, self.config.box_length)

    @cached_property
    def positivity_evolutions(self) -> tuple[ev.Evolution, ev.Evolution]:
        c = self.config
        reduced = geo.reduce(self.model, self.positivity_grid)
        tg = self._time_grid(c.positivity_T, c.positivity_dt)
        bundle = ev.DiagonalizationBundle(reduced, tg)
        return ev.Evolution(reduced, tg, "diag", bundle), ev.Evolution(reduced, tg, "full", bundle)

    def kernel(self, flavor: str) -> prop.PropagatorKernel:
        cache = self.__dict__.setdefault("_kernels", {})
        if flavor not in cache:
            diag, full = self.positivity_evolutions
            cache[flavor] = prop.scalar_kernel(flavor, diag if flavor == "feyn" else full)
        return cache[flavor]

    def positivity(self, flavor: str) -> prop.PositivityResult:
        cache = self.__dict__.setdefault("_positivity", {})
        if flavor not in cache:
            diag, full = self.positivity_evolutions
            cache[flavor] = prop.positivity_check(self.kernel(flavor), diag if flavor == "feyn" else full)
        return cache[flavor]

    # -- scattering
    @cached_property
    def scattering_tg(self) -> ev.TimeGrid:
        return self._time_grid(self.config.scattering_T, self.config.scattering_dt)

    @cached_property
    def scattering_bundle(self) -> ev.DiagonalizationBundle:
        return ev.DiagonalizationBundle(self.reduced, self.scattering_tg)

    @cached_property
    def scattering_full(self) -> ev.Evolution:
        return ev.Evolution(self.reduced, self.scattering_tg, "full", self.scattering_bundle)

    @cached_property
    def moller_set(self) -> sc.MollerSet:
        return sc.moller(self.reduced, self.scattering_tg, self.scattering_bundle, with_ad=True,
                         full=self.scattering_full)

    @cached_property
    def moller_half(self) -> sc.MollerSet:
        c = self.config
        tg = self._time_grid(c.scattering_T / 2, c.scattering_dt)
        return sc.moller(self.reduced, tg)

    @cached_property
    def wave_ops(self) -> sc.FeynmanWaveOps:
        return sc.feynman_wave_ops(self.moller_set)

    @cached_property
    def wave_ops_half(self) -> sc.FeynmanWaveOps:
        return sc.feynman_wave_ops(self.moller_half)

    def index(self, order: int) -> sc.IndexEstimate:
        cache = self.__dict__.setdefault("_index", {})
        if order not in cache:
            cache[order] = sc.index_estimate(self.moller_set, order=order)
        return cache[order]

    @cached_property
    def homogeneous_data(self) -> List[np.ndarray]:
        rng = np.random.default_rng(self.config.seed + 1)
        return [np.concatenate([smoothed_random_field(self.grid, rng), smoothed_random_field(self.grid, rng)])
                for _ in range(self.config.samples)]

    @cached_property
    def scattering_data(self) -> List[sc.ScatteringData]:
        return [sc.scattering_data(self.moller_set, self.scattering_full, v) for v in self.homogeneous_data]

    def propagation(self, order: int, weight: int) -> sc.PropagationLadder:
        cache = self.__dict__.setdefault("_propagation", {})
        if (order, weight) not in cache:
            cache[(order, weight)] = sc.weighted_propagation_check(
                self.reduced, self.scattering_tg, order, weight, self.scattering_bundle)
        return cache[(order, weight)]

    # -- geometry
    @cached_property
    def validation(self) -> geo.ValidationReport:
        return geo.validate_am(self.model)

    @cached_property
    def chart(self) -> geo.Chart:
        return geo.flow_chart(self.model)

    @cached_property
    def geodesics(self) -> List[geo.GeodesicResult]:
        inits = geo.random_null_initial_conditions(32, seed=self.config.seed)
        return geo.trace_null_geodesics(self.model, inits)


# ----------------------------------------------------------------------------
# Verification registry


@dataclass(frozen=True)
class Measurement:
    value: float
    note: str = ""


@dataclass(frozen=True)
class Check:
    anchor: str
    quantity: str
    tolerance: float
    measure: Callable[[Scenario], Measurement] = field(repr=False)
    bound: str = "upper"  # "upper": value <= tolerance; "lower": value >= tolerance

    def passes(self, value: float, tolerance: float) -> bool:
        if math.isnan(value):
            return False
        return value <= tolerance if self.bound == "upper" else value >= tolerance


REGISTRY: List[Check] = []


def _check(anchor: str, quantity: str, tolerance: float, bound: str = "upper"):
    def register(fn):
        def measure(s: Scenario) -> Measurement:
            out = fn(s)
            return out if isinstance(out, Measurement) else Measurement(float(out))
        REGISTRY.append(Check(anchor, quantity, tolerance, measure, bound))
        return fn
    return register


def _vanishes(values, floor: float = 1e-12) -> bool:
    return bool(np.max(np.abs(np.asarray(values, dtype=float))) <= floor)


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    scale = np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / scale) if scale else float(np.linalg.norm(a - b))


# -- spatial grid

@_check("grid.fourier_roundtrip", "max relative error of inverse(forward(v))", 1e-12)
def _grid_roundtrip(s: Scenario):
    v = s.rng.standard_normal(s.grid.n_points) + 1j * s.rng.standard_normal(s.grid.n_points)
    return _rel(s.grid.inverse(s.grid.forward(v)), v)


@_check("grid.derivative", "max error of d/dx sin(2 pi x / L) against the closed form", 1e-10)
def _grid_derivative(s: Scenario):
    x = s.grid.points
    k = 2 * np.pi / s.grid.box_length
    D = fourier_derivative(s.grid, 1).matrix
    return float(np.max(np.abs(D @ np.sin(k * x) - k * np.cos(k * x))))


@_check("grid.weight_positivity", "largest shortfall of min eigenvalue below the weight's lower bound", 1e-10)
def _grid_weights(s: Scenario):
    worst = -math.inf
    for kind, values in (("position", s.grid.points), ("frequency", s.grid.wavenumbers)):
        for exponent in (-1.0, 1.0, 2.0):
            w = np.linalg.eigvalsh(weight_operator(s.grid, kind, exponent).matrix)
            bound = np.min((1 + values ** 2) ** (exponent / 2))
            worst = max(worst, float(bound - w.min()))
    return worst


# -- pseudodifferential calculus

@_check("pseudodiff.weyl_selfadjoint", "relative anti-Hermitian part of a real-symbol quantization", 1e-12)
def _weyl(s: Scenario):
    sym = pdo.Symbol(lambda t, x, k: (1 + k ** 2) * (1 + 0.3 * np.exp(-x ** 2 - t ** 2)), 2.0, 0.0)
    Q = pdo.weyl_quantize(sym, 0.5, s.grid).matrix
    return float(np.linalg.norm(Q - Q.conj().T, 2) / np.linalg.norm(Q, 2))


def _spatial(s: Scenario, t: float = 0.0):
    return s.reduced.spatial_operator(t), s.reduced.density(t)


@_check("pseudodiff.power_routes", "spectral vs contour fractional powers of a(0), relative", 1e-6)
def _power_routes(s: Scenario):
    A, rho = _spatial(s)
    worst = 0.0
    for alpha in (-0.5, 0.5, 0.3):
        spec = pdo.fractional_power_spectral(A, alpha, rho)
        cont = pdo.fractional_power_contour(A, alpha, density=rho)
        worst = max(worst, _rel(cont, spec))
    return worst


@_check("pseudodiff.power_calibration", "|4^(-1/2) - 1/2| by the contour route", 1e-9)
def _power_calibration(s: Scenario):
    return abs(complex(pdo.fractional_power_contour(np.array([[4.0]]), -0.5)[0, 0]) - 0.5)


@_check("pseudodiff.power_composition", "(A^a)^b vs A^(ab) on a(0), relative", 1e-9)
def _power_composition(s: Scenario):
    A, rho = _spatial(s)
    worst = 0.0
    for a, b in ((0.5, -1.0), (-0.5, 0.6), (0.8, 0.5)):
        left = pdo.fractional_power_spectral(pdo.fractional_power_spectral(A, a, rho), b, rho)
        worst = max(worst, _rel(left, pdo.fractional_power_spectral(A, a * b, rho)))
    return worst


# -- geometry

@_check("geometry.asymptotic_flatness", "number of failing hypothesis clauses", 0)
def _am(s: Scenario):
    failing = [k for k, c in s.validation.clauses.items() if not c["pass"]]
    return Measurement(len(failing), ",".join(failing))


@_check("geometry.non_trapping", "trapped null geodesics out of 32", 0)
def _trapping(s: Scenario):
    trapped = sum(r.trapped for r in s.geodesics)
    drift = max(r.relative_drift for r in s.geodesics)
    return Measurement(trapped, f"max Hamiltonian drift {drift:.2e}")


@_check("geometry.chart_cross_term", "max |g_tx| in the flow chart", 1e-7)
def _cross_term(s: Scenario):
    return geo.chart_cross_term(s.chart)


@_check("geometry.chart_roundtrip", "max |x - chart^-1(chart(x))|", 1e-6)
def _roundtrip(s: Scenario):
    return geo.chart_roundtrip_error(s.chart)


@_check("geometry.conformal_reduction", "relative mismatch of direct and reduced operators", 1e-4)
def _conformal(s: Scenario):
    return geo.conformal_consistency(s.model, s.chart)


@_check("geometry.reduced_symmetry", "weighted anti-symmetric part of a(t), relative, over the slab", 1e-8)
def _reduced_symmetry(s: Scenario):
    worst = 0.0
    for t in np.linspace(-s.tg.half_width, s.tg.half_width, 9):
        A, rho = _spatial(s, float(t))
        worst = max(worst, float(np.linalg.norm(weighted_adjoint(A, rho) - A, 2) / np.linalg.norm(A, 2)))
    return worst


@_check("geometry.positivity_margin", "min over the slab of the lower bound of a(t)", 0.0, bound="lower")
def _margin(s: Scenario):
    return min(s.reduced.positivity_margin(float(t)) for t in np.linspace(-s.tg.half_width, s.tg.half_width, 9))


# -- evolution

@_check("evolution.generator_symmetry", "|| H^dagger q - q H + i r q || / ||H||, worst slab time", 1e-8)
def _generator(s: Scenario):
    worst = 0.0
    for t in np.linspace(-s.tg.half_width, s.tg.half_width, 9):
        H = ev.build_generator(s.reduced, float(t))
        res = ev.generator_residual(H, s.reduced.density(float(t)), s.reduced.damping(float(t)))
        worst = max(worst, res / float(np.linalg.norm(H, 2)))
    return worst


def _ladder_indices(tg: ev.TimeGrid, count: int = 8) -> List[int]:
    return sorted(set(np.linspace(0, tg.n_times - 1, count).round().astype(int).tolist()))


@_check("evolution.symplectic", "max || U^dagger q U - q || over the slab", 1e-6)
def _symplectic(s: Scenario):
    return ev.symplectic_residual(s.full, _ladder_indices(s.tg))


@_check("evolution.symplectic_ad", "max || U_ad^dagger q_ad U_ad - q_ad || over the slab", 1e-6)
def _symplectic_ad(s: Scenario):
    return ev.symplectic_residual(s.ad, _ladder_indices(s.tg))


@_check("evolution.free_oracle", "stepper vs closed-form modes on the free model, relative", 1e-6)
def _free_oracle(s: Scenario):
    red = s.free_reduced
    tg = s.tg
    evo = ev.Evolution(red, tg, "full")
    grid = s.grid
    n = grid.n_points
    worst = 0.0
    for mode in (1, 2, 5):
        wave = grid.plane_wave(mode)
        omega = math.sqrt(grid.wavenumbers[mode] ** 2 + s.config.mass ** 2)
        start = np.concatenate([wave, np.zeros(n)])
        # run the flat stepper itself, not the closed-form shortcut used for free models
        Y, recs = evo.run_flat(start[:, None].astype(complex), tg.zero_index, tg.n_times - 1,
                               record=_ladder_indices(tg))
        for j, col in recs.items():
            t = tg.time(j)
            exact = np.concatenate([np.cos(omega * t) * wave, 1j * omega * np.sin(omega * t) * wave])
            worst = max(worst, float(np.max(np.abs(col[:, 0] - exact)) / np.max(np.abs(exact))))
    return worst


@_check("evolution.ad_conjugation", "T^-1 U T from the full stepper vs the ad stepper, relative", 1e-4)
def _ad_conjugation(s: Scenario):
    ends = [0, s.tg.n_times - 1]
    conj = ev.conjugated_ad_columns(s.full, s.bundle, ends)
    direct = s.ad.columns(ends)
    return max(_rel(conj[j], direct[j]) for j in ends)


@_check("evolution.inhomogeneous", "relative residual of P applied to the Duhamel solution", 1e-4)
def _duhamel(s: Scenario):
    f = s.sources[0]
    n = s.grid.n_points
    rng = np.random.default_rng(s.config.seed + 2)
    v = np.concatenate([smoothed_random_field(s.grid, rng), smoothed_random_field(s.grid, rng)])[:2 * n]
    u = ev.solve_inhomogeneous(s.full, 1e-2 * v, f)
    return prop.relative_residual(s.reduced, s.tg, u, f)


def _decay_check(key: str, offset: float):
    def measure(s: Scenario):
        fits = [s.decay[k] for k in (("eps_plus", "eps_minus") if key == "eps_pm" else (key,))]
        if all(_vanishes(f.values) for f in fits):
            return Measurement(-math.inf, "identically zero")
        worst = max(f.slope for f in fits)
        return Measurement(worst + s.config.delta + offset,
                           f"slope {worst:.3f}" + (" (flagged)" if any(f.flagged for f in fits) else ""))
    return measure


_check("evolution.decay.sqrt_difference", "slope of ||eps - eps_free|| plus delta", 0.15)(
    _decay_check("sqrt_difference", 0.0))
_check("evolution.decay.V_ad", "slope of ||V^ad|| plus 1 + delta", 0.3)(_decay_check("V_ad", 1.0))
_check("evolution.decay.eps_pm", "slope of ||eps^+- -+ eps|| plus 1 + delta", 0.3)(_decay_check("eps_pm", 1.0))


# -- propagators

@_check("propagators.retarded.right_inverse", "max relative ||P G_+ f - f||", 1e-4)
def _ret_right(s: Scenario):
    return max(s.inversion("ret").forward_residuals)


@_check("propagators.retarded.left_inverse", "max relative ||G_+ P u - u|| on u = G_+ g", 1e-4)
def _ret_left(s: Scenario):
    return max(s.inversion("ret").backward_residuals)


@_check("propagators.advanced.right_inverse", "max relative ||P G_- f - f||", 1e-4)
def _adv_right(s: Scenario):
    return max(s.inversion("adv").forward_residuals)


@_check("propagators.advanced.left_inverse", "max relative ||G_- P u - u|| on u = G_- g", 1e-4)
def _adv_left(s: Scenario):
    return max(s.inversion("adv").backward_residuals)


@_check("propagators.retarded.support", "nonzero entries of G_+ f before the source starts", 0)
def _support(s: Scenario):
    f = s.sources[0].copy()
    cut = s.tg.index_of(0.0)
    f[:cut] = 0.0
    return int(np.count_nonzero(prop.apply_retarded(s.full, f)[:cut]))


@_check("propagators.adjoint_pairing", "max |<g, G_+ f> - <G_- g, f>| relative", 1e-10)
def _pairing(s: Scenario):
    return prop.adjoint_pairing_residual(s.full, s.sources)


@_check("propagators.ad_route", "G_+ vs -pi_0 T G^ad_+ T^-1 pi_1^*, relative", 1e-5)
def _ad_route(s: Scenario):
    return prop.retarded_route_residual(s.full, s.ad, s.sources[:2])


@_check("propagators.feynman.remainder",
        "max ||P G_F f - f|| / (||V^ad G^ad_F f^ad|| + 1e-4 ||f||)", 1.1)
def _feynman_remainder(s: Scenario):
    ratios = []
    for f, rem in zip(s.sources, s.feynman_remainders):
        ratios.append(rem.residual_norm / (rem.ad_remainder_norm + 1e-4 * s.source_norm(f)))
    return Measurement(max(ratios), "ratios " + ", ".join(f"{r:.3f}" for r in ratios))


@_check("propagators.feynman.compactness", "sigma_20 / sigma_1 of W_F^dagger W_F - 1", 1e-2)
def _sigma20(s: Scenario):
    return s.wave_ops.ratio(20)


@_check("propagators.feynman.positivity", "-(min eigenvalue) / max |eigenvalue| of i(G_F - G_F^*)", 1e-8)
def _positivity(s: Scenario):
    res = s.positivity("feyn")
    return Measurement(-res.relative_min, f"min {res.min_eigenvalue:.3e}, max {res.max_eigenvalue:.3e}")


@_check("propagators.retarded.indefinite", "min eigenvalue / max |eigenvalue| of i(G_+ - G_+^*)", -1e-3)
def _negative_control(s: Scenario):
    return s.positivity("ret").relative_min


@_check("propagators.remainder_structure", "max ||(P G_F f - f) - (e_1 - i d_t e_0 - i r e_0)|| / ||f||", 1e-4)
def _structure(s: Scenario):
    return max(rem.mismatch_norm / s.source_norm(f) for f, rem in zip(s.sources, s.feynman_remainders))


@_check("propagators.mode_oracle", "free Feynman mode kernels vs e^{i w |tau|}/(2 i w), 8 modes, relative", 1e-6)
def _mode_oracle(s: Scenario):
    red = s.free_reduced
    tg = s.tg
    diag = ev.Evolution(red, tg, "diag", ev.DiagonalizationBundle(red, tg))
    grid = s.grid
    modes = list(range(1, 9))
    f = np.zeros((tg.n_times, grid.n_points, len(modes)), dtype=complex)
    for c, mode in enumerate(modes):
        f[tg.zero_index, :, c] = grid.plane_wave(mode) / tg.step
    u = prop.apply_feynman(diag, f)
    worst = 0.0
    for c, mode in enumerate(modes):
        wave = grid.plane_wave(mode)
        g = u[:, :, c] @ wave.conj() / np.vdot(wave, wave)
        omega = math.sqrt(grid.wavenumbers[mode] ** 2 + s.config.mass ** 2)
        worst = max(worst, float(np.max(np.abs(g - prop.feynman_mode_oracle(omega, tg.times))) * 2 * omega))
    return worst


@_check("propagators.kernel_routes", "displayed-kernel vs recursion Feynman inverse, relative", 1e-10)
def _kernel_routes(s: Scenario):
    f = s.sources[0]
    a = prop.apply_feynman(s.diag, f)
    b = prop.apply_feynman(s.diag, f, kernel="kernel")
    return float(np.abs(a - b).max() / np.abs(a).max())


# -- scattering

@_check("scattering.vacuum_projections", "max of ||c+ + c- - 1|| and ||c+^2 - c+||, relative", 1e-12)
def _vacuum(s: Scenario):
    vp = sc.free_vacuum_projections(s.grid, s.config.mass)
    eye = np.eye(vp.c_plus.shape[0])
    scale = np.linalg.norm(vp.c_plus, 2)
    return Measurement(max(np.linalg.norm(vp.c_plus + vp.c_minus - eye, 2),
                           np.linalg.norm(vp.c_plus @ vp.c_plus - vp.c_plus, 2) / scale),
                       f"displayed-matrix mismatch {vp.displayed_mismatch:.3f}")


@_check("scattering.moller.tail_slope", "max |slope + delta| of the Moller increments", 0.3)
def _tail_slope(s: Scenario):
    fits = s.moller_set.fits
    if all(_vanishes(f.increments) for f in fits.values()):
        return Measurement(0.0, "increments vanish identically")
    return Measurement(max(abs(f.slope + s.config.delta) for f in fits.values()),
                       ", ".join(f"{k} {f.slope:.3f}" for k, f in fits.items()))


def _tail_floor(s: Scenario) -> float:
    return max(s.moller_set.tail, 1e-12)


@_check("scattering.moller.unitarity", "q-unitarity residual / tail estimate", 3.0)
def _unitarity(s: Scenario):
    ms = s.moller_set
    res = max(ms.unitarity_residual(k) for k in ("out", "in"))
    return Measurement(res / _tail_floor(s), f"residual {res:.2e}, tail {ms.tail:.2e}")


@_check("scattering.moller.inverse", "||W^dagger W - 1|| / tail estimate", 3.0)
def _inverse(s: Scenario):
    ms = s.moller_set
    res = max(ms.inverse_consistency(k) for k in ("out", "in"))
    return Measurement(res / _tail_floor(s), f"residual {res:.2e}")


@_check("scattering.moller.ad_consistency", "||W - Z0 W^ad Z^-1|| relative", 1e-6)
def _ad_consistency(s: Scenario):
    return max(s.moller_set.ad_consistency(k) for k in ("out", "in"))


@_check("scattering.data.two_routes", "direct vs wave-operator asymptotic data, relative", 1e-4)
def _two_routes(s: Scenario):
    ms = s.moller_set
    worst = 0.0
    for v, data in zip(s.homogeneous_data, s.scattering_data):
        alt = sc.data_via_wave_operators(ms, s.scattering_bundle, v, "out")
        worst = max(worst, sc._data_norm(ms.out_dyn, data.rho_out - alt) / sc._data_norm(ms.out_dyn, data.rho_out))
    return worst


@_check("scattering.data.stability", "relative change of the data between T/2 and T", 1e-3)
def _data_stability(s: Scenario):
    return max(d.doubling_change for d in s.scattering_data)


@_check("scattering.data.vacuum_constraint", "||rho_Fbar(G_F f)|| / ||f||", 1e-3)
def _vacuum_constraint(s: Scenario):
    ms = s.moller_set
    diag = ev.Evolution(s.reduced, s.scattering_tg, "diag", s.scattering_bundle)
    worst = 0.0
    for f in prop.random_sources(s.scattering_tg, s.grid, 2, s.config.seed + 3):
        data = sc.field_scattering_data(ms, prop.apply_feynman(diag, f))
        fn = ev.slab_norm(s.scattering_tg, f, diag.densities(), s.grid.dx)
        worst = max(worst, sc._data_norm(ms.out_dyn, data.rho_Fbar) / fn)
    return worst


@_check("scattering.compactness.sigma10", "sigma_10 / sigma_1 of W_F^dagger W_F - 1", 0.1)
def _sigma10(s: Scenario):
    return s.wave_ops.ratio(10)


@_check("scattering.compactness.smoothing_stability", "max relative change of smoothing norms from T/2 to T", 0.15)
def _smoothing(s: Scenario):
    full, half = s.wave_ops.smoothing_norms, s.wave_ops_half.smoothing_norms
    worst = 0.0
    for key, value in full.items():
        if max(value, half[key]) <= 1e-12:
            continue
        worst = max(worst, abs(value / half[key] - 1))
    return worst


@_check("scattering.index", "|index| of c^- W_out^-1 + c^+ W_in^-1", 0)
def _index(s: Scenario):
    est = s.index(s.config.order)
    return Measurement(abs(est.index), f"kernel {est.kernel_dimension}, cokernel {est.cokernel_dimension}")


@_check("scattering.index.gap", "singular-value gap at the rank threshold", 1e2, bound="lower")
def _index_gap(s: Scenario):
    return s.index(s.config.order).gap


@_check("scattering.index.order_invariance", "|index(m=0) - index(m=1)|", 0)
def _index_orders(s: Scenario):
    return abs(s.index(0).index - s.index(1).index)


@_check("scattering.index.brute_force", "|SVD index - pivoted-QR index|", 0)
def _index_qr(s: Scenario):
    return abs(s.index(0).index - sc.brute_force_index(sc.index_operator(s.moller_set)))


@_check("scattering.propagation", "max sup growth of weighted ladders from T/2 to T, (m, k) in {0,1}^2", 0.1)
def _propagation(s: Scenario):
    worst = 0.0
    sups = []
    half = s.scattering_tg.half_width / 2
    for m in (0, 1):
        for k in (0, 1):
            lad = s.propagation(m, k)
            early = lad.values[lad.times <= half + 1e-9].max()
            worst = max(worst, lad.sup / early - 1)
            sups.append(f"({m},{k}) {lad.sup:.3f}")
    return Measurement(worst, ", ".join(sups))


ANCHORS: Dict[str, Check] = {c.anchor: c for c in REGISTRY}


# ----------------------------------------------------------------------------
# Ledger


@dataclass
class LedgerEntry:
    anchor: str
    quantity: str
    value: float
    tolerance: float
    passed: bool
    note: str = ""

    def to_json(self) -> dict:
        value = self.value if math.isfinite(self.value) else str(self.value)
        return {"anchor": self.anchor, "quantity": self.quantity, "value": value,
                "tolerance": self.tolerance, "pass": self.passed, "note": self.note}


@dataclass
class VerificationLedger:
    entries: List[LedgerEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def verdicts(self) -> List[tuple[str, bool]]:
        return [(e.anchor, e.passed) for e in self.entries]

    def failures(self) -> List[LedgerEntry]:
        return [e for e in self.entries if not e.passed]

    def to_json(self) -> list:
        return [e.to_json() for e in self.entries]


def select_checks(filters: Optional[Sequence[str]] = None) -> List[Check]:
    """Checks whose anchor equals a filter or lies below it (``"scattering.index"`` selects four)."""
    if not filters:
        return list(REGISTRY)
    chosen = []
    for token in filters:
        hits = [c for c in REGISTRY if c.anchor == token or c.anchor.startswith(token + ".")]
        if not hits:
            raise ConfigError(f"unknown anchor {token!r}")
        chosen.extend(c for c in hits if c not in chosen)
    return [c for c in REGISTRY if c in chosen]


def run_checks(scenario: Scenario, checks: Iterable[Check]) -> VerificationLedger:
    """Measure each check; a check that raises is recorded as failed, never aborts the run."""
    ledger = VerificationLedger()
    for check in checks:
        tol = scenario.config.tolerances.get(check.anchor, check.tolerance)
        try:
            m = check.measure(scenario)
            value, note = float(m.value), m.note
        except Exception as exc:  # diagnostics must not abort the suite
            value, note = math.nan, f"{type(exc).__name__}: {exc}"
        ledger.entries.append(LedgerEntry(check.anchor, check.quantity, value, tol,
                                          check.passes(value, tol), note))
    return ledger


def verify(config: ScenarioConfig, anchors: Optional[Sequence[str]] = None,
           scenario: Optional[Scenario] = None) -> VerificationLedger:
    return run_checks(scenario or Scenario(config), select_checks(anchors))


# ----------------------------------------------------------------------------
# Artifact writers


def _output_dir(config: ScenarioConfig) -> Path:
    path = Path(config.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else str(float(obj))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def write_json(path: Path, payload) -> Path:
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=False) + "\n")
    return path


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_jsonable(v) for v in row])
    return path


def reduce_summary(s: Scenario) -> dict:
    times = np.linspace(-s.tg.half_width, s.tg.half_width, 11)
    free_a = ev.free_operator(s.grid, s.config.mass)
    rows = []
    for t in times:
        A = s.reduced.spatial_operator(float(t))
        rows.append({"t": float(t), "a_deviation": float(np.linalg.norm(A - free_a, 2)),
                     "max_damping": float(np.max(np.abs(s.reduced.damping(float(t))))),
                     "positivity_margin": float(s.reduced.positivity_margin(float(t)))})
    return {"model": s.model.name, "grid": s.grid.to_json(), "validation": s.validation.to_json(),
            "samples": rows}


def evolve_summary(s: Scenario, flavor: str) -> tuple[dict, list]:
    evo = {"full": s.full, "diag": s.diag, "ad": s.ad}[flavor]
    indices = _ladder_indices(s.tg, 17)
    cols = evo.columns(indices)
    rows = []
    for j in indices:
        U = cols[j]
        norms = np.linalg.norm(U, axis=0)
        rows.append((s.tg.time(j), float(norms.min()), float(norms.max()),
                     ev.symplectic_residual(evo, [j])))
    summary = {"model": s.model.name, "flavor": flavor, "slab": s.tg.to_json(), "grid": s.grid.to_json(),
               "max_symplectic_residual": max(r[3] for r in rows)}
    if flavor != "full":
        # closed-form H^ad blocks against the computed ones; a diagnostic without a threshold
        summary["closed_form_residual"] = {
            str(t): s.bundle.displayed_formula_residual(t)
            for t in (-s.tg.half_width / 2, 0.0, s.tg.half_width / 2)}
    return summary, rows


def propagator_summary(s: Scenario, flavor: str, frame: str) -> dict:
    evo = s.diag if flavor == "feyn" else s.full
    report = s.inversion(flavor).to_json()
    if frame == "original":
        apply = {"ret": lambda f: prop.apply_retarded(evo, f), "adv": lambda f: prop.apply_advanced(evo, f),
                 "feyn": lambda f: prop.apply_feynman(evo, f)}[flavor]
        residuals = []
        for f in s.sources:
            src = prop.SpacetimeField(f, s.tg.times, "original", is_source=True)
            u = prop.apply_in_frame(apply, s.reduced, src)
            u_model = u.to_frame(s.reduced, "model").values
            residuals.append(prop.relative_residual(s.reduced, s.tg, u_model, src.to_frame(s.reduced, "model").values))
        report["original_frame_residuals"] = residuals
    report["frame"] = frame
    return report


def write_kernel(s: Scenario, flavor: str, out: Path) -> Path:
    kernel = s.kernel(flavor)
    dense = kernel.materialize()
    tg, n = kernel.tg, kernel.n
    rows = []
    for j in range(tg.n_times):
        for k in range(tg.n_times):
            block = dense[j * n:(j + 1) * n, k * n:(k + 1) * n] / tg.step
            for a in range(n):
                for b in range(n):
                    rows.append((tg.time(j), tg.time(k), a, b, block[a, b].real, block[a, b].imag))
    return write_csv(out / f"kernel_{flavor}.csv", ("t", "s", "row", "col", "re", "im"), rows)


def moller_summary(s: Scenario) -> dict:
    ms = s.moller_set
    vp = sc.free_vacuum_projections(s.grid, s.config.mass)
    return {"model": s.model.name, "slab": s.scattering_tg.to_json(), **ms.to_json(),
            "unitarity": {k: ms.unitarity_residual(k) for k in ("out", "in")},
            "inverse_consistency": {k: ms.inverse_consistency(k) for k in ("out", "in")},
            "ad_consistency": {k: ms.ad_consistency(k) for k in ("out", "in")},
            "vacuum_projections": {"displayed_mismatch": vp.displayed_mismatch,
                                   "displayed_idempotence_defect": vp.displayed_idempotence_defect}}


def moller_rows(s: Scenario) -> list:
    rows = []
    for side, fit in s.moller_set.fits.items():
        for t, inc in zip(fit.times, fit.increments):
            rows.append((side, float(t), float(inc)))
    return rows


def index_summary(s: Scenario) -> dict:
    return {"model": s.model.name, "estimates": [s.index(m).to_json() for m in (0, 1)],
            "brute_force": sc.brute_force_index(sc.index_operator(s.moller_set))}


def run_scenario(config: ScenarioConfig) -> Dict[str, Path]:
    """Full pipeline: ledger, JSON report and CSV curves in the output directory."""
    s = Scenario(config)
    out = _output_dir(config)
    ledger = run_checks(s, REGISTRY)
    written: Dict[str, Path] = {}
    extras: Dict[str, object] = {}

    def attempt(name, fn):
        try:
            extras[name] = fn()
        except Exception as exc:  # diagnostics never abort the run
            extras[name] = {"error": f"{type(exc).__name__}: {exc}"}

    attempt("moller", lambda: moller_summary(s))
    attempt("index", lambda: index_summary(s))
    attempt("decay", lambda: {k: v.to_json() for k, v in s.decay.items()})
    report = {"config": config.to_json(), "passed": ledger.passed, "ledger": ledger.to_json(), **extras}
    written["report"] = write_json(out / "report.json", report)
    try:
        written["moller_convergence"] = write_csv(out / "moller_convergence.csv",
                                                  ("side", "t", "increment"), moller_rows(s))
        written["singular_values"] = write_csv(
            out / "singular_values.csv", ("operator", "k", "sigma"),
            [("K2", k, v) for k, v in enumerate(s.wave_ops.K2_singular_values, 1)]
            + [(f"index_m{m}", k, v) for m in (0, 1) for k, v in enumerate(s.index(m).singular_values, 1)])
        written["decay_fits"] = write_csv(
            out / "decay_fits.csv", ("quantity", "t", "value"),
            [(key, t, v) for key, fit in s.decay.items() for t, v in zip(fit.times, fit.values)])
        written["positivity_spectra"] = write_csv(
            out / "positivity_spectra.csv", ("flavor", "k", "eigenvalue"),
            [(fl, k, v) for fl in ("feyn", "ret") for k, v in enumerate(s.positivity(fl).eigenvalues)])
        if config.emit_kernel:
            for fl in ("ret", "feyn"):
                written[f"kernel_{fl}"] = write_kernel(s, fl, out)
    except Exception as exc:
        click.echo(f"warning: curve output incomplete: {exc}", err=True)
    written["ledger"] = write_json(out / "ledger.json", ledger.to_json())
    return written


# ----------------------------------------------------------------------------
# Command line


def _load(ctx: click.Context, overrides: dict) -> ScenarioConfig:
    try:
        return load_config(ctx.obj["config"], overrides)
    except ConfigError as exc:
        click.echo(f"configuration error: {exc}", err=True)
        ctx.exit(EXIT_CONFIG_ERROR)


def _scenario_overrides(preset=None, T=None, dt=None, n=None, seed=None, output=None) -> dict:
    out: dict = {}
    if preset is not None:
        out["model"] = {"preset": preset}
    if T is not None or dt is not None:
        out["slab"] = {k: v for k, v in (("T", T), ("dt", dt)) if v is not None}
    if n is not None:
        out["grid"] = {"n": n}
    if seed is not None:
        out["seed"] = seed
    if output is not None:
        out["output_dir"] = output
    return out


def _common(fn):
    fn = click.option("--output", type=click.Path(file_okay=False), help="Output directory.")(fn)
    fn = click.option("--seed", type=int, help="RNG seed.")(fn)
    fn = click.option("--preset", type=str, help="Model preset name.")(fn)
    return fn


def _print_ledger(ledger: VerificationLedger) -> None:
    for e in ledger.entries:
        mark = "PASS" if e.passed else "FAIL"
        click.echo(f"{mark}  {e.anchor:<44} {e.value:<12.4g} tol {e.tolerance:<8.3g} {e.note}")


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="Scenario JSON file (see config_schema.json).")
@click.pass_context
def main(ctx: click.Context, config_path: Optional[str]) -> None:
    """Klein-Gordon scattering checks on asymptotically flat 1+1 backgrounds."""
    ctx.ensure_object(dict)
    ctx.obj["config"] = config_path


@main.command()
@_common
@click.pass_context
def reduce(ctx, preset, seed, output):
    """Reduce the model and report coefficient diagnostics."""
    cfg = _load(ctx, _scenario_overrides(preset, seed=seed, output=output))
    s = Scenario(cfg)
    summary = reduce_summary(s)
    out = _output_dir(cfg)
    write_json(out / "reduce.json", summary)
    write_csv(out / "coefficients.csv", ("t", "a_deviation", "max_damping", "positivity_margin"),
              [(r["t"], r["a_deviation"], r["max_damping"], r["positivity_margin"]) for r in summary["samples"]])
    click.echo(json.dumps(_jsonable({"validation": summary["validation"]["passed"], "output": str(out)})))


@main.command()
@_common
@click.option("--T", "T", type=float, help="Slab half-width.")
@click.option("--dt", type=float, help="Time step.")
@click.option("--n", type=int, help="Spatial grid points.")
@click.option("--flavor", type=click.Choice(["full", "diag", "ad"]), default="full")
@click.pass_context
def evolve(ctx, preset, seed, output, T, dt, n, flavor):
    """Evolve on the slab; emit column norms and conservation residuals."""
    cfg = _load(ctx, _scenario_overrides(preset, T, dt, n, seed, output))
    s = Scenario(cfg)
    summary, rows = evolve_summary(s, flavor)
    out = _output_dir(cfg)
    write_csv(out / f"evolve_{flavor}.csv", ("t", "min_column_norm", "max_column_norm", "symplectic_residual"), rows)
    write_json(out / f"evolve_{flavor}.json", summary)
    click.echo(json.dumps(_jsonable(summary)))


@main.command()
@_common
@click.option("--flavor", type=click.Choice(["ret", "adv", "feyn"]), default="ret")
@click.option("--frame", type=click.Choice(list(prop.FRAMES)), default="model")
@click.option("--emit-kernel", is_flag=True, help="Write the dense kernel of the small positivity instance.")
@click.option("--positivity", is_flag=True, help="Run the Hermitian-form eigenvalue check.")
@click.pass_context
def propagator(ctx, preset, seed, output, flavor, frame, emit_kernel, positivity):
    """Inversion residuals of a propagator flavor."""
    cfg = _load(ctx, _scenario_overrides(preset, seed=seed, output=output))
    s = Scenario(cfg)
    out = _output_dir(cfg)
    report = propagator_summary(s, flavor, frame)
    if positivity:
        res = s.positivity(flavor)
        report["positivity"] = {"min": res.min_eigenvalue, "max": res.max_eigenvalue,
                                "relative_min": res.relative_min}
        write_csv(out / f"positivity_{flavor}.csv", ("k", "eigenvalue"), enumerate(res.eigenvalues))
    if emit_kernel:
        report["kernel_csv"] = str(write_kernel(s, flavor, out))
    write_json(out / f"propagator_{flavor}.json", report)
    click.echo(json.dumps(_jsonable(report)))


@main.command()
@_common
@click.pass_context
def moller(ctx, preset, seed, output):
    """Moller operators, their tails and consistency residuals."""
    cfg = _load(ctx, _scenario_overrides(preset, seed=seed, output=output))
    s = Scenario(cfg)
    out = _output_dir(cfg)
    summary = moller_summary(s)
    write_json(out / "moller.json", summary)
    write_csv(out / "moller_convergence.csv", ("side", "t", "increment"), moller_rows(s))
    click.echo(json.dumps(_jsonable({k: summary[k] for k in ("converged", "tail", "unitarity")})))


@main.command()
@_common
@click.pass_context
def index(ctx, preset, seed, output):
    """Fredholm index estimate with its singular-value gap."""
    cfg = _load(ctx, _scenario_overrides(preset, seed=seed, output=output))
    s = Scenario(cfg)
    out = _output_dir(cfg)
    summary = index_summary(s)
    write_json(out / "index.json", summary)
    write_csv(out / "index_singular_values.csv", ("order", "k", "sigma"),
              [(m, k, v) for m in (0, 1) for k, v in enumerate(s.index(m).singular_values, 1)])
    click.echo(json.dumps(_jsonable(summary)))
    est = s.index(cfg.order)
    ctx.exit(EXIT_PASS if est.confident else EXIT_LEDGER_FAILURE)


@main.command(name="verify")
@_common
@click.option("--anchors", type=str, default="", help="Comma-separated anchor filter; empty runs all.")
@click.option("--list", "list_only", is_flag=True, help="List registered anchors and exit.")
@click.pass_context
def verify_cmd(ctx, preset, seed, output, anchors, list_only):
    """Run the verification registry; exit 1 if any selected entry fails."""
    if list_only:
        for c in REGISTRY:
            click.echo(f"{c.anchor:<44} {c.quantity}")
        return
    cfg = _load(ctx, _scenario_overrides(preset, seed=seed, output=output))
    tokens = [t.strip() for t in anchors.split(",") if t.strip()]
    try:
        checks = select_checks(tokens)
    except ConfigError as exc:
        click.echo(f"configuration error: {exc}", err=True)
        ctx.exit(EXIT_CONFIG_ERROR)
    ledger = run_checks(Scenario(cfg), checks)
    _print_ledger(ledger)
    write_json(_output_dir(cfg) / "ledger.json", ledger.to_json())
    ctx.exit(EXIT_PASS if ledger.passed else EXIT_LEDGER_FAILURE)


@main.command()
@_common
@click.pass_context
def report(ctx, preset, seed, output):
    """Run the whole scenario and write the report, ledger and CSV curves."""
    cfg = _load(ctx, _scenario_overrides(preset, seed=seed, output=output))
    written = run_scenario(cfg)
    ledger = json.loads(written["ledger"].read_text())
    for name, path in written.items():
        click.echo(f"{name}: {path}")
    ctx.exit(EXIT_PASS if all(e["pass"] for e in ledger) else EXIT_LEDGER_FAILURE)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
