"""Analytical hot-rod-rolling stage models.

Processing -> microstructure -> property chain for a plain C-Mn rod:

    DRX during the pass -> MDRX in the interpass -> grain growth
    -> austenite decomposition on cooling -> yield strength

Public interfaces take temperature in degrees Fahrenheit and cooling rate in
degrees Fahrenheit per second; both are converted to kelvin internally.
Grain sizes are micrometres, strengths MPa.  Every numeric constant lives in
:data:`CONSTANTS` together with its unit and source; ``write_provenance``
emits that table as CSV.

All functions are pure and accept scalars or NumPy arrays.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .gp import Dataset

R_GAS = 8.314  # J/(mol K)


class Constant(NamedTuple):
    name: str
    value: float
    units: str
    source: str


_HG = "Hodgson & Gibbs (1992), ISIJ Int. 32:1329, C-Mn steel equations"
_KZ = "Kuziak, Cheng, Glowacki & Pietrzyk (1997), NIST TN 1393"
_GL = "Gladman, McIvor & Pickering (1972); Gladman (1976)"
_PKG = "package value (documented default, not taken from a cited source)"

CONSTANTS: dict[str, Constant] = {
    c.name: c
    for c in [
        # dynamic recrystallization
        Constant("q_def", 300000.0, "J/mol", _HG + " (Zener-Hollomon activation energy)"),
        Constant("drx_size_coeff", 1.6e4, "um", _HG),
        Constant("drx_size_exp", -0.23, "-", _HG),
        Constant("peak_strain_coeff", 4.9e-4, "um^-0.5", _HG),
        Constant("peak_strain_d0_exp", 0.5, "-", _HG),
        Constant("peak_strain_z_exp", 0.15, "-", _HG),
        Constant("critical_strain_ratio", 0.8, "-", _HG),
        Constant("drx_half_strain_coeff", 1.144e-3, "um^-0.28", _KZ),
        Constant("drx_half_strain_d0_exp", 0.28, "-", _KZ),
        Constant("drx_half_strain_rate_exp", 0.05, "-", _KZ),
        Constant("drx_half_strain_temp", 6420.0, "K", _KZ),
        Constant("drx_avrami_exp", 2.0, "-", _KZ),
        # metadynamic recrystallization
        Constant("mdrx_half_time_coeff", 1.1, "s", _HG),
        Constant("mdrx_half_time_z_exp", -0.8, "-", _HG),
        Constant("q_mdrx", 230000.0, "J/mol", _HG),
        Constant("mdrx_avrami_exp", 1.5, "-", _HG),
        Constant("mdrx_size_coeff", 2.6e4, "um", _HG),
        Constant("mdrx_size_exp", -0.23, "-", _HG),
        # grain growth
        Constant("growth_exp", 7.0, "-", _HG),
        Constant("growth_rate", 1.5e27, "um^7/s", _HG),
        Constant("q_growth", 400000.0, "J/mol", _HG),
        # austenite decomposition
        Constant("ferrite_size_b0", -0.4, "um", _HG),
        Constant("ferrite_size_b1", 6.37, "um/wt%", _HG),
        Constant("ferrite_size_b2", 24.2, "um (K/s)^0.5", _HG),
        Constant("ferrite_size_b3", -59.0, "um (K/s)^0.5/wt%", _HG),
        Constant("ferrite_size_b4", 22.0, "um", _HG),
        Constant("ferrite_size_b5", -0.015, "1/um", _HG),
        Constant("spacing_a0", 0.1307, "um", _KZ),
        Constant("spacing_a_c", 1.027, "um/wt%", _KZ),
        Constant("spacing_a_c2", -1.993, "um/wt%^2", _KZ),
        Constant("spacing_a_mn", -0.1108, "um/wt%", _KZ),
        Constant("spacing_a_cr", 0.0305, "um (K/s)^0.52", _KZ),
        Constant("spacing_cr_exp", -0.52, "-", _KZ),
        Constant("eutectoid_carbon", 0.77, "wt%", "Fe-C phase diagram"),
        Constant("eutectoid_mn_slope", -0.04, "wt% C / wt% Mn", _PKG),
        Constant("ferrite_solubility", 0.02, "wt%", "Fe-C phase diagram"),
        Constant("ferrite_kinetic_coeff", 80.0, "um^0.5 (K/s)^0.5", _PKG),
        # yield strength, middle model (Gladman)
        Constant("gl_ferrite_base", 35.0, "MPa", _GL),
        Constant("gl_ferrite_mn", 58.0, "MPa/wt%", _GL),
        Constant("gl_ferrite_hp", 17.4, "MPa mm^0.5", _GL),
        Constant("gl_pearlite_base", 178.0, "MPa", _GL),
        Constant("gl_pearlite_sp", 3.8, "MPa mm^0.5", _GL),
        Constant("gl_si", 63.0, "MPa/wt%", _GL),
        Constant("gl_n", 425.0, "MPa/wt%^0.5", _GL),
        # yield strength, upper model (Hodgson & Gibbs)
        Constant("hg_base", 62.6, "MPa", _HG),
        Constant("hg_mn", 26.1, "MPa/wt%", _HG),
        Constant("hg_si", 60.2, "MPa/wt%", _HG),
        Constant("hg_p", 759.0, "MPa/wt%", _HG),
        Constant("hg_cu", 212.9, "MPa/wt%", _HG),
        Constant("hg_n", 3286.0, "MPa/wt%", _HG),
        Constant("hg_hp", 19.7, "MPa mm^0.5", _HG),
        # yield strength, lower model (Hall-Petch form)
        Constant("kz_friction", 45.0, "MPa", _KZ + "; Hall-Petch form, friction stress set by package"),
        Constant("kz_hp", 17.4, "MPa mm^0.5", _KZ + "; Hall-Petch form"),
        # residual chemistry held fixed
        Constant("silicon", 0.20, "wt%", _PKG),
        Constant("free_nitrogen", 0.005, "wt%", _PKG),
        Constant("phosphorus", 0.030, "wt%", _PKG),
        Constant("copper", 0.0, "wt%", _PKG),
    ]
}


def _k(name: str) -> float:
    return CONSTANTS[name].value


def write_provenance(path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "value", "units", "source"])
        for c in CONSTANTS.values():
            writer.writerow([c.name, repr(c.value), c.units, c.source])


class DomainError(ValueError):
    """An input lies outside a stage's validity window."""

    def __init__(self, field: str, value, window: tuple[float, float], stage: str = "") -> None:
        self.field = field
        self.stage = stage
        where = f"{stage}: " if stage else ""
        super().__init__(f"{where}{field}={value!r} outside validity window {window}")


def fahrenheit_to_kelvin(temp_f):
    return (np.asarray(temp_f, dtype=float) - 32.0) * 5.0 / 9.0 + 273.15


def rate_f_to_k(rate_f_per_s):
    return np.asarray(rate_f_per_s, dtype=float) * 5.0 / 9.0


# Validity windows.  Temperature extends past the [1000, 2000] F design range
# so that parametric scatter around the range ends stays valid.
WINDOWS: dict[str, tuple[float, float]] = {
    "strain": (0.5, 0.7),
    "strain_rate": (8.0, 12.0),
    "temperature": (900.0, 2100.0),
    "interpass_time": (0.08, 0.12),
    "initial_grain_size": (80.0, 120.0),
    "growth_time": (0.0, 3.0),
    "austenite_grain_size": (0.1, 120.0),
    "carbon": (0.11, 0.13),
    "manganese": (0.75, 0.85),
    "cooling_rate": (16.0, 20.0),
    # yield-model inputs: the box on which upper >= middle >= lower holds
    "ferrite_grain_size": (3.9, 20.5),
    "ferrite_fraction": (0.78, 0.88),
    "pearlite_spacing": (0.13, 0.16),
}


def _check(field: str, value, stage: str = "") -> None:
    lo, hi = WINDOWS[field]
    arr = np.asarray(value, dtype=float)
    bad = ~np.isfinite(arr) | (arr < lo) | (arr > hi)
    if np.any(bad):
        first = arr[bad].flat[0] if arr.ndim else float(arr)
        raise DomainError(field, float(first), (lo, hi), stage)


@dataclass(frozen=True)
class RollingState:
    temperature: float = 1450.0  # F
    strain: float = 0.6
    strain_rate: float = 10.0  # 1/s
    interpass_time: float = 0.1  # s
    initial_grain_size: float = 100.0  # um

    def __post_init__(self) -> None:
        for name in ("temperature", "strain", "strain_rate", "interpass_time", "initial_grain_size"):
            _check(name, getattr(self, name), "RollingState")


@dataclass(frozen=True)
class Composition:
    carbon: float = 0.12  # wt%
    manganese: float = 0.80  # wt%

    def __post_init__(self) -> None:
        _check("carbon", self.carbon, "Composition")
        _check("manganese", self.manganese, "Composition")

    @property
    def carbon_equivalent(self) -> float:
        return self.carbon + self.manganese / 6.0


@dataclass(frozen=True)
class Microstructure:
    ferrite_grain_size: float  # um
    ferrite_fraction: float
    pearlite_spacing: float  # um


class ModelSelector(enum.Enum):
    MIDDLE = "middle"  # f0, Gladman
    UPPER = "upper"  # f1, Hodgson & Gibbs
    LOWER = "lower"  # f2, Hall-Petch lower bound
    ALL = "all"

    @classmethod
    def parse(cls, value: "str | ModelSelector") -> "ModelSelector":
        if isinstance(value, cls):
            return value
        return cls(str(value).lower())


SINGLE_MODELS = (ModelSelector.MIDDLE, ModelSelector.UPPER, ModelSelector.LOWER)

DEFAULT_COMPOSITION = Composition()
DEFAULT_COOLING_RATE = 18.0  # F/s, i.e. 10 K/s
DEFAULT_GROWTH_TIME = 2.0  # s


# -- vectorized kernels -------------------------------------------------------


def zener_hollomon(strain_rate, temp_k):
    return strain_rate * np.exp(_k("q_def") / (R_GAS * temp_k))


def _drx(strain, strain_rate, temp_k, d0):
    z = zener_hollomon(strain_rate, temp_k)
    size = _k("drx_size_coeff") * z ** _k("drx_size_exp")
    peak = _k("peak_strain_coeff") * d0 ** _k("peak_strain_d0_exp") * z ** _k("peak_strain_z_exp")
    critical = _k("critical_strain_ratio") * peak
    half = (
        _k("drx_half_strain_coeff")
        * d0 ** _k("drx_half_strain_d0_exp")
        * strain_rate ** _k("drx_half_strain_rate_exp")
        * np.exp(_k("drx_half_strain_temp") / temp_k)
    )
    excess = np.maximum(strain - critical, 0.0)
    frac = 1.0 - np.exp(-0.693 * (excess / half) ** _k("drx_avrami_exp"))
    return size, np.clip(frac, 0.0, 1.0)


def _mdrx(strain_rate, temp_k, interpass_time):
    z = zener_hollomon(strain_rate, temp_k)
    half_time = (
        _k("mdrx_half_time_coeff")
        * z ** _k("mdrx_half_time_z_exp")
        * np.exp(_k("q_mdrx") / (R_GAS * temp_k))
    )
    frac = 1.0 - np.exp(-0.693 * (interpass_time / half_time) ** _k("mdrx_avrami_exp"))
    size = _k("mdrx_size_coeff") * z ** _k("mdrx_size_exp")
    return size, np.clip(frac, 0.0, 1.0)


def _growth(size, time, temp_k):
    n = _k("growth_exp")
    rate = _k("growth_rate") * np.exp(-_k("q_growth") / (R_GAS * temp_k))
    return (size**n + rate * time) ** (1.0 / n)


def _ferrite_size(d_gamma, carbon_eq, cr_k):
    return (
        _k("ferrite_size_b0")
        + _k("ferrite_size_b1") * carbon_eq
        + (_k("ferrite_size_b2") + _k("ferrite_size_b3") * carbon_eq) * cr_k**-0.5
        + _k("ferrite_size_b4") * (1.0 - np.exp(_k("ferrite_size_b5") * d_gamma))
    )


def _pearlite_spacing(carbon, manganese, cr_k):
    return (
        _k("spacing_a0")
        + _k("spacing_a_c") * carbon
        + _k("spacing_a_c2") * carbon**2
        + _k("spacing_a_mn") * manganese
        + _k("spacing_a_cr") * cr_k ** _k("spacing_cr_exp")
    )


def _ferrite_fraction(d_gamma, carbon, manganese, cr_k):
    # lever-rule equilibrium fraction, reduced for coarse austenite / fast cooling
    eutectoid = _k("eutectoid_carbon") + _k("eutectoid_mn_slope") * manganese
    sol = _k("ferrite_solubility")
    equilibrium = (eutectoid - carbon) / (eutectoid - sol)
    kinetic = 1.0 - np.exp(-_k("ferrite_kinetic_coeff") / np.sqrt(cr_k * d_gamma))
    return np.clip(equilibrium * kinetic, 0.0, 1.0)


def _yield_middle(ferrite_size, ferrite_fraction, spacing, manganese):
    cube = np.cbrt(ferrite_fraction)
    ferrite = _k("gl_ferrite_base") + _k("gl_ferrite_mn") * manganese + _k("gl_ferrite_hp") * (
        ferrite_size * 1e-3
    ) ** -0.5
    pearlite = _k("gl_pearlite_base") + _k("gl_pearlite_sp") * (spacing * 1e-3) ** -0.5
    return (
        cube * ferrite
        + (1.0 - cube) * pearlite
        + _k("gl_si") * _k("silicon")
        + _k("gl_n") * _k("free_nitrogen") ** 0.5
    )


def _yield_upper(ferrite_size, manganese):
    return (
        _k("hg_base")
        + _k("hg_mn") * manganese
        + _k("hg_si") * _k("silicon")
        + _k("hg_p") * _k("phosphorus")
        + _k("hg_cu") * _k("copper")
        + _k("hg_n") * _k("free_nitrogen")
        + _k("hg_hp") * (ferrite_size * 1e-3) ** -0.5
    )


def _yield_lower(ferrite_size):
    return _k("kz_friction") + _k("kz_hp") * (ferrite_size * 1e-3) ** -0.5


def yield_kernel(model: ModelSelector, ferrite_size, ferrite_fraction, spacing, manganese):
    """Vectorized yield strength for a single model (no window checks)."""
    if model is ModelSelector.MIDDLE:
        return _yield_middle(ferrite_size, ferrite_fraction, spacing, manganese)
    if model is ModelSelector.UPPER:
        return _yield_upper(ferrite_size, manganese) + 0.0 * ferrite_fraction
    if model is ModelSelector.LOWER:
        return _yield_lower(ferrite_size) + 0.0 * ferrite_fraction
    raise ValueError("yield strength needs a single model, not ModelSelector.ALL")


# -- stage interface ----------------------------------------------------------


def drx_grain(state: RollingState) -> tuple[float, float]:
    """Dynamically recrystallized grain size (um) and DRX fraction."""
    size, frac = _drx(
        state.strain,
        state.strain_rate,
        fahrenheit_to_kelvin(state.temperature),
        state.initial_grain_size,
    )
    return float(size), float(frac)


def mdrx_grain(state: RollingState) -> tuple[float, float]:
    """Metadynamically recrystallized grain size (um) and MDRX fraction.

    Depends on strain rate, temperature and interpass time only.
    """
    size, frac = _mdrx(state.strain_rate, fahrenheit_to_kelvin(state.temperature), state.interpass_time)
    return float(size), float(frac)


def mixed_grain_size(state: RollingState, drx: tuple[float, float], mdrx: tuple[float, float]) -> float:
    """Mean austenite size entering grain growth (rule of mixtures).

    Deformed grains are ``X_drx * d_drx + (1 - X_drx) * d0``; MDRX then
    replaces the fraction ``X_mdrx`` of that structure with grains of size
    ``d_mdrx``.
    """
    d_drx, x_drx = drx
    d_md, x_md = mdrx
    deformed = x_drx * d_drx + (1.0 - x_drx) * state.initial_grain_size
    return float(x_md * d_md + (1.0 - x_md) * deformed)


def grain_growth(post_mdrx_size: float, time: float, temperature: float) -> float:
    """Final austenite grain size after ``time`` seconds of static growth."""
    _check("austenite_grain_size", post_mdrx_size, "grain_growth")
    _check("growth_time", time, "grain_growth")
    _check("temperature", temperature, "grain_growth")
    return float(_growth(post_mdrx_size, time, fahrenheit_to_kelvin(temperature)))


def cooling_microstructure(
    final_austenite: float, comp: Composition, cooling_rate: float
) -> Microstructure:
    _check("austenite_grain_size", final_austenite, "cooling_microstructure")
    _check("cooling_rate", cooling_rate, "cooling_microstructure")
    cr_k = float(rate_f_to_k(cooling_rate))
    return Microstructure(
        ferrite_grain_size=float(_ferrite_size(final_austenite, comp.carbon_equivalent, cr_k)),
        ferrite_fraction=float(_ferrite_fraction(final_austenite, comp.carbon, comp.manganese, cr_k)),
        pearlite_spacing=float(_pearlite_spacing(comp.carbon, comp.manganese, cr_k)),
    )


def check_microstructure(micro: Microstructure, stage: str = "yield_strength") -> None:
    _check("ferrite_grain_size", micro.ferrite_grain_size, stage)
    _check("ferrite_fraction", micro.ferrite_fraction, stage)
    _check("pearlite_spacing", micro.pearlite_spacing, stage)


def yield_strength(model: ModelSelector, micro: Microstructure, comp: Composition) -> float:
    """Yield strength (MPa) from one candidate model."""
    model = ModelSelector.parse(model)
    if model is ModelSelector.ALL:
        raise ValueError("yield_strength needs a single model, not ALL")
    check_microstructure(micro)
    return float(
        yield_kernel(
            model, micro.ferrite_grain_size, micro.ferrite_fraction, micro.pearlite_spacing, comp.manganese
        )
    )


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception) -> None:
        self.stage = stage
        super().__init__(f"stage {stage!r} failed: {cause}")


def full_chain(
    state: RollingState,
    comp: Composition = DEFAULT_COMPOSITION,
    cooling_rate: float = DEFAULT_COOLING_RATE,
    model: ModelSelector = ModelSelector.MIDDLE,
    growth_time: float = DEFAULT_GROWTH_TIME,
) -> float:
    """Rolling state to yield strength through every stage in order."""
    try:
        drx = drx_grain(state)
    except Exception as exc:
        raise StageError("drx_grain", exc) from exc
    try:
        mdrx = mdrx_grain(state)
    except Exception as exc:
        raise StageError("mdrx_grain", exc) from exc
    d_rex = mixed_grain_size(state, drx, mdrx)
    try:
        d_gamma = grain_growth(d_rex, growth_time, state.temperature)
    except Exception as exc:
        raise StageError("grain_growth", exc) from exc
    try:
        micro = cooling_microstructure(d_gamma, comp, cooling_rate)
    except Exception as exc:
        raise StageError("cooling_microstructure", exc) from exc
    try:
        return yield_strength(model, micro, comp)
    except Exception as exc:
        raise StageError("yield_strength", exc) from exc


# -- training data ------------------------------------------------------------


def latin_hypercube(bounds: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Stratified uniform sample: one point per equal-probability stratum per
    dimension, strata randomly paired across dimensions."""
    bounds = np.asarray(bounds, dtype=float)
    d = bounds.shape[0]
    u = np.empty((n, d))
    for j in range(d):
        u[:, j] = (rng.permutation(n) + rng.random(n)) / n
    return bounds[:, 0] + u * (bounds[:, 1] - bounds[:, 0])


@dataclass(frozen=True)
class DesignWindow:
    """Ranges for the rolling-state fields that vary; the rest stay at ``base``."""

    ranges: dict[str, tuple[float, float]]
    base: RollingState = RollingState()

    def states(self, rows: np.ndarray) -> list[RollingState]:
        names = list(self.ranges)
        fields = {f: getattr(self.base, f) for f in self.base.__dataclass_fields__}
        out = []
        for row in rows:
            fields.update(zip(names, map(float, row)))
            out.append(RollingState(**fields))
        return out


def choose_models(selector: ModelSelector, n: int, rng: np.random.Generator) -> list[ModelSelector]:
    """Per-row model assignment; ALL draws uniformly from the three models."""
    if selector is ModelSelector.ALL:
        picks = rng.integers(0, 3, size=n)
        return [SINGLE_MODELS[i] for i in picks]
    return [selector] * n


def generate_training_data(
    window: DesignWindow,
    selector: ModelSelector,
    n: int,
    rng: np.random.Generator,
    comp: Composition = DEFAULT_COMPOSITION,
    cooling_rate: float = DEFAULT_COOLING_RATE,
) -> Dataset:
    """End-to-end yield-strength data over the design window.

    ``labels`` records which yield model produced each row.
    """
    if n < 2:
        raise ValueError("need at least two training rows")
    selector = ModelSelector.parse(selector)
    bounds = np.array([window.ranges[k] for k in window.ranges])
    rows = latin_hypercube(bounds, n, rng)
    models = choose_models(selector, n, rng)
    outputs = [
        full_chain(state, comp, cooling_rate, model)
        for state, model in zip(window.states(rows), models)
    ]
    units = tuple("F" if k == "temperature" else "" for k in window.ranges)
    return Dataset(
        rows,
        np.array(outputs),
        column_names=tuple(window.ranges),
        units=units,
        output_name="yield_strength",
        labels=np.array([m.value for m in models]),
    )


def default_window() -> DesignWindow:
    return DesignWindow({"temperature": (1000.0, 2000.0)})


def constants_rows() -> Iterable[Constant]:
    return CONSTANTS.values()
