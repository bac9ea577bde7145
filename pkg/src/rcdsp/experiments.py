"""Case studies on the hot-rod-rolling chain and the 36-row experiment matrix.

Each case trains one GP per stage of the chain

    T -> drx -> rex(T, drx) -> austenite(T, rex) -> {ferrite_size, ferrite_fraction}
      -> yield(ferrite_size, ferrite_fraction[, model level])

from noise-free stage data, wires them into a :class:`SubsystemNetwork` with
temperature as the only uncertain input, and sweeps temperature for both
decision formulations.  In cases that train on all three yield models the
yield node gets a categorical "model level" input (lower 0, middle 1, upper 2);
propagation draws the level uniformly, so the candidate-model disagreement
shows up as performance uncertainty.

Seeds
-----
Everything derives from one master seed through ``derive_seed``:
``(master, 0, case_index)`` for training data and GP restarts and
``(master, 1, case_index)`` for the temperature sweep of that case.  All rows
of one case share the case's sweep (common random numbers), so every row is a
pure reduction over cached distributions.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import gp as gpmod
from . import process as pm
from .cdsp import (
    CdspSolution,
    DesignVariable,
    Formulation,
    Spread,
    alpha_from_emi_target,
    emi_target_from_alpha,
    evaluate_sweep,
    solve_sweep,
    sweep_distributions,
)
from .io import atomic_write_text, fmt
from .network import (
    External,
    ModelChoice,
    OutputDistribution,
    SubsystemNetwork,
    SubsystemNode,
    Upstream,
    UncertaintySpec,
    VariableUncertainty,
    derive_seed,
    histogram,
    propagate,
    write_histogram_csv,
)

logger = logging.getLogger(__name__)

CASE_FORMAT = "rcdsp.case/1"
DESIGN_VARIABLE = "temperature"
# training box for temperature: design range plus room for parametric scatter
T_BOX = (950.0, 2050.0)
BOX_PAD = 0.05

MATRIX_COLUMNS = (
    "exp_id", "case", "lrl_mpa", "alpha_target", "emi_target",
    "rc_d_minus", "rc_d_plus", "rc_alpha_achieved", "rc_t_opt_f",
    "rel_d_minus", "rel_d_plus", "rel_t_opt_f", "rc_feasible", "rel_feasible",
)

LEVELS = {pm.ModelSelector.LOWER: 0.0, pm.ModelSelector.MIDDLE: 1.0, pm.ModelSelector.UPPER: 2.0}


@dataclass(frozen=True)
class CaseConfig:
    case_id: str
    selector: pm.ModelSelector
    samples_per_dim: int
    literal_n: bool = False  # n = samples_per_dim per node instead of samples_per_dim * D

    def __post_init__(self):
        if self.samples_per_dim < 2 and self.literal_n:
            raise ValueError("a GP needs at least two training rows")
        if self.samples_per_dim < 1:
            raise ValueError("samples_per_dim must be positive")

    @property
    def index(self) -> int:
        return "ABCD".index(self.case_id) if self.case_id in "ABCD" else 4 + sum(map(ord, self.case_id))

    def n_for(self, dim: int) -> int:
        return max(2, self.samples_per_dim if self.literal_n else self.samples_per_dim * dim)


CASES = {
    "A": CaseConfig("A", pm.ModelSelector.MIDDLE, 50),
    "B": CaseConfig("B", pm.ModelSelector.MIDDLE, 5),
    "C": CaseConfig("C", pm.ModelSelector.ALL, 50),
    "D": CaseConfig("D", pm.ModelSelector.ALL, 5),
}


@dataclass(frozen=True)
class HarnessSettings:
    mc_samples: int = 10_000
    grid_points: int = 101
    t_lo: float = 1000.0
    t_hi: float = 2000.0
    sigma_pa: float = 5.0
    family: str = "normal"
    spread: Spread = Spread.ADDITIVE
    restarts: int = 10
    case_d_literal_n: bool = False

    def design_variable(self) -> DesignVariable:
        return DesignVariable(DESIGN_VARIABLE, self.t_lo, self.t_hi, self.grid_points, "F")

    def uncertainty(self) -> UncertaintySpec:
        return UncertaintySpec({DESIGN_VARIABLE: VariableUncertainty(self.sigma_pa, self.family)})

    def case(self, case_id: str) -> CaseConfig:
        cfg = CASES[case_id]
        if case_id == "D" and self.case_d_literal_n:
            cfg = replace(cfg, literal_n=True)
        return cfg


@dataclass(frozen=True)
class ExperimentSpec:
    case: CaseConfig
    lrl: float
    alpha_target: float
    emi_target: float | None = None
    seed: int = 0

    def __post_init__(self):
        e = emi_target_from_alpha(self.alpha_target)
        if self.emi_target is None:
            object.__setattr__(self, "emi_target", e)
        elif abs(alpha_from_emi_target(self.emi_target) - self.alpha_target) > 1e-3:
            raise ValueError(f"Phi({self.emi_target}) is not within 1e-3 of alpha_target {self.alpha_target}")


@dataclass
class ExperimentRecord:
    exp_id: int
    spec: ExperimentSpec
    rc: CdspSolution | None = None
    rel: CdspSolution | None = None
    error: str | None = None

    def row(self) -> list[str]:
        s = self.spec
        rc = self.rc if self.rc is not None and self.rc.feasible else None
        rel = self.rel if self.rel is not None and self.rel.feasible else None
        feas = lambda sol: fmt(sol.feasible) if sol is not None else "NA"  # noqa: E731
        return [
            str(self.exp_id), s.case.case_id, fmt(float(s.lrl)), fmt(s.alpha_target), fmt(s.emi_target),
            fmt(rc and rc.d_minus), fmt(rc and rc.d_plus), fmt(rc and rc.alpha_achieved),
            fmt(rc and rc.optimal_design),
            fmt(rel and rel.d_minus), fmt(rel and rel.d_plus), fmt(rel and rel.optimal_design),
            feas(self.rc), feas(self.rel),
        ]


MATRIX_LEVELS = {
    "A": ((0.99, 0.95, 0.90), (200.0, 270.0, 280.0)),
    "B": ((0.99, 0.95, 0.90), (200.0, 270.0, 280.0)),
    "C": ((0.99, 0.90, 0.85), (150.0, 180.0, 200.0)),
    "D": ((0.99, 0.90, 0.85), (150.0, 180.0, 200.0)),
}


def default_matrix(master_seed: int = 0, settings: HarnessSettings | None = None) -> list[ExperimentSpec]:
    settings = settings or HarnessSettings()
    specs = []
    for cid, (alphas, lrls) in MATRIX_LEVELS.items():
        for a in alphas:
            for lrl in lrls:
                specs.append(ExperimentSpec(settings.case(cid), lrl, a, seed=master_seed))
    return specs


# --- ground-truth stages with every nuisance input at its default -----------

_STATE = pm.RollingState()
_COMP = pm.DEFAULT_COMPOSITION
_CR_K = float(pm.rate_f_to_k(pm.DEFAULT_COOLING_RATE))
SPACING = float(pm._pearlite_spacing(_COMP.carbon, _COMP.manganese, _CR_K))


def _tk(t_f):
    return pm.fahrenheit_to_kelvin(t_f)


def stage_drx(x):
    size, _ = pm._drx(_STATE.strain, _STATE.strain_rate, _tk(x[:, 0]), _STATE.initial_grain_size)
    return size


def stage_rex(x):
    tk = _tk(x[:, 0])
    _, x_drx = pm._drx(_STATE.strain, _STATE.strain_rate, tk, _STATE.initial_grain_size)
    d_md, x_md = pm._mdrx(_STATE.strain_rate, tk, _STATE.interpass_time)
    deformed = x_drx * x[:, 1] + (1.0 - x_drx) * _STATE.initial_grain_size
    return x_md * d_md + (1.0 - x_md) * deformed


def stage_austenite(x):
    return pm._growth(x[:, 1], pm.DEFAULT_GROWTH_TIME, _tk(x[:, 0]))


def stage_ferrite_size(x):
    return pm._ferrite_size(x[:, 0], _COMP.carbon_equivalent, _CR_K)


def stage_ferrite_fraction(x):
    return pm._ferrite_fraction(x[:, 0], _COMP.carbon, _COMP.manganese, _CR_K)


def stage_yield(model: pm.ModelSelector) -> Callable[[np.ndarray], np.ndarray]:
    def f(x):
        return pm.yield_kernel(model, x[:, 0], x[:, 1], SPACING, _COMP.manganese)
    return f


@dataclass(frozen=True)
class NodeSpec:
    id: str
    inputs: tuple[str, ...]  # "temperature" or an upstream node id
    truth: Callable[[np.ndarray], np.ndarray] | None
    units: tuple[str, ...]
    output_units: str


CHAIN = (
    NodeSpec("drx", ("temperature",), stage_drx, ("F",), "um"),
    NodeSpec("rex", ("temperature", "drx"), stage_rex, ("F", "um"), "um"),
    NodeSpec("austenite", ("temperature", "rex"), stage_austenite, ("F", "um"), "um"),
    NodeSpec("ferrite_size", ("austenite",), stage_ferrite_size, ("um",), "um"),
    NodeSpec("ferrite_fraction", ("austenite",), stage_ferrite_fraction, ("um",), ""),
    NodeSpec("yield", ("ferrite_size", "ferrite_fraction"), None, ("um", ""), "MPa"),
)


def node_boxes() -> dict[str, tuple[float, float]]:
    """Training range of every chain quantity.

    Each node output range is taken over the temperature box along the true
    chain and padded by a few percent; yield inputs are clipped to the window
    on which the model ordering holds.
    """
    t = np.linspace(*T_BOX, 2001)
    vals = {"temperature": t}
    for spec in CHAIN[:-1]:
        x = np.column_stack([vals[i] for i in spec.inputs])
        vals[spec.id] = spec.truth(x)
    boxes = {"temperature": T_BOX}
    for k, v in vals.items():
        if k == "temperature":
            continue
        lo, hi = float(v.min()), float(v.max())
        pad = BOX_PAD * (hi - lo)
        boxes[k] = (max(lo - pad, 0.5 * lo), hi + pad)  # every quantity here is positive
    for k, w in (("ferrite_size", "ferrite_grain_size"), ("ferrite_fraction", "ferrite_fraction")):
        lo, hi = boxes[k]
        wlo, whi = pm.WINDOWS[w]
        boxes[k] = (max(lo, wlo), min(hi, whi))
    return boxes


def node_training_data(spec: NodeSpec, case: CaseConfig, boxes, rng: np.random.Generator) -> gpmod.Dataset:
    all_models = spec.id == "yield" and case.selector is pm.ModelSelector.ALL
    dim = len(spec.inputs) + (1 if all_models else 0)
    n = case.n_for(dim)
    bounds = np.array([boxes[i] for i in spec.inputs])
    x = pm.latin_hypercube(bounds, n, rng)
    labels = None
    if spec.id == "yield":
        models = pm.choose_models(case.selector, n, rng)
        y = np.empty(n)
        for m in set(models):
            rows = np.array([mm is m for mm in models])
            y[rows] = stage_yield(m)(x[rows])
        labels = np.array([m.value for m in models])
        if all_models:
            x = np.column_stack([x, [LEVELS[m] for m in models]])
    else:
        y = spec.truth(x)
    names = spec.inputs + (("model_level",) if all_models else ())
    units = spec.units + (("",) if all_models else ())
    return gpmod.Dataset(x, y, column_names=names, units=units, output_name=spec.id, labels=labels)


def assemble(models: dict[str, object], selector: pm.ModelSelector) -> SubsystemNetwork:
    nodes = []
    for spec in CHAIN:
        b = [External(i) if i == DESIGN_VARIABLE else Upstream(i) for i in spec.inputs]
        if spec.id == "yield" and selector is pm.ModelSelector.ALL:
            b.append(ModelChoice(tuple(sorted(LEVELS.values()))))
        nodes.append(SubsystemNode(spec.id, models[spec.id], tuple(b)))
    return SubsystemNetwork(nodes, "yield", [(DESIGN_VARIABLE, "F")])


class BuildError(RuntimeError):
    def __init__(self, node: str, cause: BaseException):
        super().__init__(f"fitting node {node!r} failed: {cause}")
        self.node = node


def build_case(case: CaseConfig, rng: np.random.Generator | int, restarts: int = 10) -> SubsystemNetwork:
    """Train one GP per chain stage and wire them together."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    boxes = node_boxes()
    models = {}
    for spec in CHAIN:
        data = node_training_data(spec, case, boxes, rng)
        cfg = gpmod.FitConfig(restarts=restarts, seed=int(rng.integers(2**63)))
        try:
            models[spec.id] = gpmod.fit(data, cfg)
        except Exception as exc:
            raise BuildError(spec.id, exc) from exc
        logger.info("case %s node %s: n=%d %s", case.case_id, spec.id, data.n, models[spec.id].fit_report)
    return assemble(models, case.selector)


def case_json(net: SubsystemNetwork, case: CaseConfig) -> str:
    doc = {
        "format": CASE_FORMAT,
        "case": {"case_id": case.case_id, "selector": case.selector.value,
                 "samples_per_dim": case.samples_per_dim, "literal_n": case.literal_n},
        "nodes": {n.id: n.model.to_dict() for n in net.nodes},
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def save_case(net: SubsystemNetwork, case: CaseConfig, path: str | Path) -> None:
    atomic_write_text(path, case_json(net, case))


def load_case(path: str | Path) -> tuple[CaseConfig, SubsystemNetwork]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CASE_FORMAT:
        raise ValueError(f"{path}: unsupported case format {doc.get('format')!r}")
    c = doc["case"]
    case = CaseConfig(c["case_id"], pm.ModelSelector(c["selector"]), c["samples_per_dim"], c["literal_n"])
    models = {k: gpmod.TrainedGP.from_dict(v) for k, v in doc["nodes"].items()}
    return case, assemble(models, case.selector)


class Harness:
    """Caches trained networks and temperature sweeps per case."""

    def __init__(self, master_seed: int = 0, settings: HarnessSettings | None = None):
        self.master_seed = int(master_seed)
        self.settings = settings or HarnessSettings()
        self.builds: Counter[str] = Counter()
        self._networks: dict[CaseConfig, SubsystemNetwork] = {}
        self._sweeps: dict[tuple, list[OutputDistribution]] = {}

    def build_seed(self, case: CaseConfig) -> int:
        return derive_seed(self.master_seed, 0, case.index)

    def sweep_seed(self, case: CaseConfig) -> int:
        return derive_seed(self.master_seed, 1, case.index)

    def network(self, case: CaseConfig) -> SubsystemNetwork:
        if case not in self._networks:
            self.builds[case.case_id] += 1
            rng = np.random.default_rng(self.build_seed(case))
            self._networks[case] = build_case(case, rng, self.settings.restarts)
        return self._networks[case]

    def add_network(self, case: CaseConfig, net: SubsystemNetwork) -> None:
        self._networks[case] = net

    def distributions(self, case: CaseConfig, network: SubsystemNetwork | None = None
                      ) -> list[OutputDistribution]:
        key = (case, id(network))
        if key not in self._sweeps:
            net = network if network is not None else self.network(case)
            s = self.settings
            self._sweeps[key] = sweep_distributions(
                net, s.uncertainty(), s.design_variable(), s.mc_samples, self.sweep_seed(case))
        return self._sweeps[key]

    def run_experiment(self, spec: ExperimentSpec, exp_id: int = 0,
                       network: SubsystemNetwork | None = None) -> ExperimentRecord:
        dists = self.distributions(spec.case, network)
        evals = evaluate_sweep(dists, self.settings.design_variable().grid(), spec.lrl,
                               spec.emi_target, spec.alpha_target, self.settings.spread)
        return ExperimentRecord(exp_id, spec, solve_sweep(evals, Formulation.ROBUST),
                                solve_sweep(evals, Formulation.RELIABILITY))

    def run_matrix(self, specs: Sequence[ExperimentSpec], ids: Sequence[int] | None = None
                   ) -> list[ExperimentRecord]:
        if not specs:
            raise ValueError("no experiments to run")
        ids = list(ids) if ids is not None else list(range(1, len(specs) + 1))
        out = []
        for i, spec in zip(ids, specs):
            try:
                out.append(self.run_experiment(spec, i))
            except Exception as exc:  # one bad row must not sink the table
                logger.error("experiment %d failed: %s", i, exc)
                out.append(ExperimentRecord(i, spec, error=f"{type(exc).__name__}: {exc}"))
        return out

    def histogram_at(self, case: CaseConfig, temperature: float = 1450.0, n: int = 100_000,
                     bins: int = 50) -> tuple[OutputDistribution, list[tuple[float, float]]]:
        net = self.network(case)
        rng = np.random.default_rng(derive_seed(self.master_seed, 2, case.index))
        dist = propagate(net, {DESIGN_VARIABLE: temperature}, self.settings.uncertainty(), "full", n, rng)
        return dist, histogram(dist, bins)

    def emit_histograms(self, cases: Sequence[CaseConfig], outdir: str | Path, temperature: float = 1450.0,
                        n: int = 100_000, bins: int = 50) -> dict[str, tuple[Path, OutputDistribution]]:
        out = {}
        for case in cases:
            dist, hist = self.histogram_at(case, temperature, n, bins)
            path = Path(outdir) / f"histogram_case_{case.case_id}_{int(round(temperature))}F.csv"
            write_histogram_csv(hist, path)
            out[case.case_id] = (path, dist)
        return out


def run_experiment(spec: ExperimentSpec, harness: Harness | None = None,
                   network: SubsystemNetwork | None = None) -> ExperimentRecord:
    harness = harness or Harness(spec.seed)
    return harness.run_experiment(spec, network=network)


def run_matrix(specs: Sequence[ExperimentSpec], harness: Harness | None = None) -> list[ExperimentRecord]:
    harness = harness or Harness(specs[0].seed if specs else 0)
    return harness.run_matrix(specs)


def matrix_csv(records: Sequence[ExperimentRecord]) -> str:
    lines = [",".join(MATRIX_COLUMNS)] + [",".join(r.row()) for r in records]
    return "\n".join(lines) + "\n"


def normality_screen(dist: OutputDistribution, skew_limit: float = 0.5, kurt_limit: float = 1.0) -> bool:
    """True when the output looks normal: small skewness and excess kurtosis."""
    g, k = dist.skewness, dist.excess_kurtosis
    return bool(math.isfinite(g) and math.isfinite(k) and abs(g) < skew_limit and abs(k) < kurt_limit)


def parse_rows(text: str, total: int = 36) -> list[int]:
    """``"1-9,12"`` to sorted 1-based row ids."""
    rows: set[int] = set()
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            a, b = (int(p) for p in part.split("-", 1))
        else:
            a = b = int(part)
        if not (1 <= a <= b <= total):
            raise ValueError(f"row range {part!r} outside 1-{total}")
        rows.update(range(a, b + 1))
    if not rows:
        raise ValueError("empty row selection")
    return sorted(rows)
