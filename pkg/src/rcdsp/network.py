"""Acyclic subsystem networks and Monte Carlo uncertainty propagation.

A network is a set of nodes, each wrapping a model with ``predict(X)`` returning
posterior mean and variance (a :class:`~rcdsp.gp.TrainedGP` or an
:class:`AnalyticModel`).  Node inputs are bound to external variables, to
upstream node outputs, to constants, or to a categorical model-choice input.

``propagate`` in ``Full`` mode runs three passes on shared draws:

* Full: external inputs drawn, every node sampled from its posterior;
* MeanOnly: the same input draws, every node replaced by its mean;
* FixedInput: inputs held at their means, nodes sampled with the same noise.

The spread of MeanOnly is the parametric component ``std_pa`` and the spread of
FixedInput is the model component ``std_pr``.
"""

from __future__ import annotations

import enum
import graphlib
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol, Sequence, Union

import numpy as np

from .io import atomic_write_text, fmt

MIN_SAMPLES = 100
FAMILIES = ("normal", "uniform", "exponential")


class NetworkError(ValueError):
    """Structural problem with a network or its inputs."""


class PropagationError(RuntimeError):
    def __init__(self, node: str, cause: BaseException):
        super().__init__(f"node {node!r} failed: {cause}")
        self.node = node
        self.cause = cause


class Mode(enum.Enum):
    FULL = "full"
    MEAN_ONLY = "mean_only"
    FIXED_INPUT = "fixed_input"

    @classmethod
    def parse(cls, value: "Mode | str") -> "Mode":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"meanonly": "mean_only", "fixedinput": "fixed_input"}
        return cls(aliases.get(key, key))


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``.

    Streams for distinct key tuples never overlap, so work split across
    workers by key gives the same numbers as a serial loop.
    """
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys)))


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic 63-bit integer seed for ``(seed, *keys)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def standard_draws(family: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean, unit-variance draws from ``family``."""
    if family == "normal":
        return rng.standard_normal(n)
    if family == "uniform":
        return rng.uniform(-math.sqrt(3.0), math.sqrt(3.0), n)
    if family == "exponential":
        return rng.standard_exponential(n) - 1.0
    raise NetworkError(f"unknown distribution family {family!r}; choose from {FAMILIES}")


# --- models -----------------------------------------------------------------


class NodeModel(Protocol):
    input_dim: int

    def predict(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...

    def predict_mean(self, x: np.ndarray) -> np.ndarray: ...


class AnalyticModel:
    """Closed-form stage with optional additive noise of a given family.

    ``fn`` maps an ``(m, D)`` array to ``m`` outputs.  ``std`` is the noise
    standard deviation; the noise is drawn from ``family`` standardized to
    mean zero, so ``predict_mean`` is exactly ``fn``.
    """

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], input_dim: int,
                 std: float = 0.0, family: str = "normal", name: str = ""):
        if input_dim < 1:
            raise ValueError("input_dim must be positive")
        if not (math.isfinite(std) and std >= 0):
            raise ValueError("noise std must be finite and non-negative")
        if family not in FAMILIES:
            raise ValueError(f"unknown noise family {family!r}")
        self.fn = fn
        self.input_dim = int(input_dim)
        self.std = float(std)
        self.noise_family = family
        self.name = name or getattr(fn, "__name__", "analytic")

    def predict_mean(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.asarray(self.fn(x), dtype=float).reshape(-1)
        if out.shape != (x.shape[0],):
            raise ValueError(f"{self.name}: expected {x.shape[0]} outputs, got {out.shape}")
        return out

    def predict(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mean = self.predict_mean(x)
        return mean, np.full_like(mean, self.std**2)

    def __repr__(self) -> str:
        return f"AnalyticModel({self.name!r}, D={self.input_dim}, std={self.std}, {self.noise_family})"


def linear_model(coefs: Sequence[float], intercept: float = 0.0, std: float = 0.0,
                 family: str = "normal") -> AnalyticModel:
    """``intercept + coefs @ x`` as an analytic stage."""
    c = np.asarray(coefs, dtype=float)
    return AnalyticModel(lambda x: intercept + x @ c, len(c), std=std, family=family, name="linear")


# --- bindings ---------------------------------------------------------------


@dataclass(frozen=True)
class External:
    name: str


@dataclass(frozen=True)
class Upstream:
    node: str


@dataclass(frozen=True)
class Fixed:
    value: float


@dataclass(frozen=True)
class ModelChoice:
    """Categorical input picking one candidate physics model per sample.

    Full and FixedInput passes draw a level uniformly; the MeanOnly pass
    averages the node mean over all levels.
    """

    levels: tuple[float, ...] = (0.0, 1.0, 2.0)

    def __post_init__(self):
        if len(self.levels) < 1:
            raise ValueError("ModelChoice needs at least one level")


Binding = Union[External, Upstream, Fixed, ModelChoice]


@dataclass(frozen=True)
class SubsystemNode:
    id: str
    model: Any
    bindings: tuple[Binding, ...]

    def __post_init__(self):
        object.__setattr__(self, "bindings", tuple(self.bindings))
        dim = getattr(self.model, "input_dim", None)
        if dim != len(self.bindings):
            raise NetworkError(f"node {self.id!r}: {len(self.bindings)} bindings for a model with input_dim {dim}")
        for b in self.bindings:
            if not isinstance(b, (External, Upstream, Fixed, ModelChoice)):
                raise NetworkError(f"node {self.id!r}: unsupported binding {b!r}")

    @property
    def noise_family(self) -> str:
        return getattr(self.model, "noise_family", "normal")


class SubsystemNetwork:
    """Validated DAG of subsystem nodes with one designated output."""

    def __init__(self, nodes: Sequence[SubsystemNode], output_node: str,
                 external_variables: Sequence[str | tuple[str, str]]):
        ids = [n.id for n in nodes]
        if len(set(ids)) != len(ids):
            raise NetworkError("duplicate node ids")
        by_id = {n.id: n for n in nodes}
        if output_node not in by_id:
            raise NetworkError(f"output node {output_node!r} is not in the network")
        ext = [(e, "") if isinstance(e, str) else (e[0], e[1]) for e in external_variables]
        names = [e[0] for e in ext]
        if len(set(names)) != len(names):
            raise NetworkError("duplicate external variable names")
        used = set()
        graph: dict[str, set[str]] = {}
        for n in nodes:
            deps = set()
            for b in n.bindings:
                if isinstance(b, Upstream):
                    if b.node not in by_id:
                        raise NetworkError(f"node {n.id!r} binds unknown upstream {b.node!r}")
                    deps.add(b.node)
                elif isinstance(b, External):
                    if b.name not in names:
                        raise NetworkError(f"node {n.id!r} binds undeclared external {b.name!r}")
                    used.add(b.name)
            graph[n.id] = deps
        unused = [e for e in names if e not in used]
        if unused:
            raise NetworkError(f"external variables never consumed: {unused}")
        try:
            order = _stable_topo(graph, {nid: i for i, nid in enumerate(ids)})
        except graphlib.CycleError as exc:
            raise NetworkError(f"network has a cycle: {exc.args[1]}") from exc
        self.nodes: tuple[SubsystemNode, ...] = tuple(by_id[i] for i in order)
        self.output_node = output_node
        self.external_variables: tuple[tuple[str, str], ...] = tuple(ext)

    @property
    def external_names(self) -> tuple[str, ...]:
        return tuple(e[0] for e in self.external_variables)

    @property
    def m(self) -> int:
        return len(self.nodes)

    def node(self, node_id: str) -> SubsystemNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)


def _stable_topo(graph: dict[str, set[str]], rank: dict[str, int]) -> list[str]:
    # topological order that keeps declaration order where the graph allows
    ts = graphlib.TopologicalSorter(graph)
    ts.prepare()
    out = []
    while ts.is_active():
        ready = sorted(ts.get_ready(), key=rank.__getitem__)
        out.extend(ready)
        ts.done(*ready)
    return out


# --- uncertainty ------------------------------------------------------------


@dataclass(frozen=True)
class VariableUncertainty:
    std: float
    family: str = "normal"

    def __post_init__(self):
        if not (math.isfinite(self.std) and self.std >= 0):
            raise ValueError(f"std must be finite and >= 0, got {self.std}")
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; choose from {FAMILIES}")


@dataclass(frozen=True)
class UncertaintySpec:
    """Per external variable spread around the design value (the mean).

    Variables not listed are deterministic.
    """

    variables: Mapping[str, VariableUncertainty] = field(default_factory=dict)

    @classmethod
    def normal(cls, **stds: float) -> "UncertaintySpec":
        return cls({k: VariableUncertainty(v) for k, v in stds.items()})

    def get(self, name: str) -> VariableUncertainty:
        return self.variables.get(name, VariableUncertainty(0.0))


# --- output distribution ----------------------------------------------------


def summarize(samples) -> tuple[float, float, float, float]:
    """Mean, unbiased std, skewness and excess kurtosis.

    Skewness and kurtosis are the moment ratios ``m3/m2**1.5`` and
    ``m4/m2**2 - 3``; both are NaN for a zero-variance sample set or N < 4.
    """
    x = np.asarray(samples, dtype=float).reshape(-1)
    n = x.size
    if n < 2:
        raise ValueError("need at least two samples")
    mean = float(x.mean())
    dev = x - mean
    m2 = float(np.mean(dev**2))
    std = math.sqrt(m2 * n / (n - 1))
    if n < 4 or m2 <= (1e-14 * max(abs(mean), 1.0)) ** 2:
        return mean, std if m2 > 0 else 0.0, math.nan, math.nan
    skew = float(np.mean(dev**3)) / m2**1.5
    kurt = float(np.mean(dev**4)) / m2**2 - 3.0
    return mean, std, skew, kurt


@dataclass(frozen=True)
class OutputDistribution:
    samples: np.ndarray
    mean: float
    std_total: float
    std_pr: float
    std_pa: float
    skewness: float
    excess_kurtosis: float
    mode: Mode = Mode.FULL

    @property
    def n(self) -> int:
        return int(self.samples.size)

    @classmethod
    def from_samples(cls, samples, std_pr: float, std_pa: float, mode: Mode = Mode.FULL) -> "OutputDistribution":
        s = np.array(samples, dtype=float).reshape(-1)
        s.flags.writeable = False
        mean, std, skew, kurt = summarize(s)
        return cls(s, mean, std, float(std_pr), float(std_pa), skew, kurt, mode)


def empirical_reliability(dist: OutputDistribution | np.ndarray, y_target: float) -> float:
    """Fraction of samples at or above ``y_target``."""
    s = dist.samples if isinstance(dist, OutputDistribution) else np.asarray(dist, dtype=float)
    return float(np.count_nonzero(s >= y_target)) / s.size


def histogram(dist: OutputDistribution | np.ndarray, bins: int = 50) -> list[tuple[float, float]]:
    """``(bin_center, density)`` pairs over ``[min, max]`` of the samples."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    s = dist.samples if isinstance(dist, OutputDistribution) else np.asarray(dist, dtype=float)
    lo, hi = float(s.min()), float(s.max())
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    dens, edges = np.histogram(s, bins=bins, range=(lo, hi), density=True)
    centers = 0.5 * (edges[:-1] + edges[1:])
    return list(zip(centers.tolist(), dens.tolist()))


def write_samples_csv(dist: OutputDistribution, path: str | Path) -> None:
    lines = ["index,value"] + [f"{i},{fmt(v)}" for i, v in enumerate(dist.samples)]
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_histogram_csv(hist: Sequence[tuple[float, float]], path: str | Path) -> None:
    lines = ["bin_center,density"] + [f"{fmt(c)},{fmt(d)}" for c, d in hist]
    atomic_write_text(path, "\n".join(lines) + "\n")


# --- propagation ------------------------------------------------------------


@dataclass
class _Draws:
    inputs: dict[str, np.ndarray]
    noise: dict[str, np.ndarray]
    choices: dict[tuple[str, int], np.ndarray]


def _draw(net: SubsystemNetwork, unc: UncertaintySpec, n: int, rng: np.random.Generator) -> _Draws:
    # fixed draw order keeps every mode on the same random numbers
    inputs = {}
    for name in net.external_names:
        inputs[name] = standard_draws(unc.get(name).family, n, rng)
    noise, choices = {}, {}
    for node in net.nodes:
        noise[node.id] = standard_draws(node.noise_family, n, rng)
        for j, b in enumerate(node.bindings):
            if isinstance(b, ModelChoice):
                choices[(node.id, j)] = rng.integers(0, len(b.levels), n)
    return _Draws(inputs, noise, choices)


def _run_pass(net, design, unc, draws: _Draws, n: int, draw_inputs: bool, sample_nodes: bool) -> np.ndarray:
    ext = {}
    for name in net.external_names:
        mu = float(design[name])
        sd = unc.get(name).std
        ext[name] = mu + sd * draws.inputs[name] if draw_inputs and sd > 0 else np.full(n, mu)
    outputs: dict[str, np.ndarray] = {}
    for node in net.nodes:
        try:
            outputs[node.id] = _eval_node(node, ext, outputs, draws, n, sample_nodes)
        except PropagationError:
            raise
        except Exception as exc:
            raise PropagationError(node.id, exc) from exc
        if not np.all(np.isfinite(outputs[node.id])):
            raise PropagationError(node.id, ArithmeticError("non-finite output"))
    return outputs[net.output_node]


def _eval_node(node, ext, outputs, draws, n, sample_nodes) -> np.ndarray:
    cols: list[Any] = []
    choice_cols = []
    for j, b in enumerate(node.bindings):
        if isinstance(b, External):
            cols.append(ext[b.name])
        elif isinstance(b, Upstream):
            cols.append(outputs[b.node])
        elif isinstance(b, Fixed):
            cols.append(np.full(n, float(b.value)))
        else:
            choice_cols.append(j)
            levels = np.asarray(b.levels, dtype=float)
            cols.append(levels[draws.choices[(node.id, j)]])
    x = np.column_stack(cols)
    if sample_nodes:
        mean, var = node.model.predict(x)
        var = np.maximum(np.asarray(var, dtype=float), 0.0)
        return np.asarray(mean, dtype=float) + np.sqrt(var) * draws.noise[node.id]
    if not choice_cols:
        return np.asarray(node.model.predict_mean(x), dtype=float)
    # mean over every combination of candidate-model levels
    combos = list(itertools.product(*(node.bindings[j].levels for j in choice_cols)))
    acc = np.zeros(n)
    for combo in combos:
        for j, level in zip(choice_cols, combo):
            x[:, j] = level
        acc += node.model.predict_mean(x)
    return acc / len(combos)


def propagate(net: SubsystemNetwork, design: Mapping[str, float], unc: UncertaintySpec,
              mode: Mode | str = Mode.FULL, n: int = 10_000,
              rng: np.random.Generator | int | None = None) -> OutputDistribution:
    """Monte Carlo output distribution at one design point."""
    mode = Mode.parse(mode)
    if n < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} samples, got {n}")
    missing = [k for k in net.external_names if k not in design]
    if missing:
        raise NetworkError(f"unbound external variables: {missing}")
    for k in net.external_names:
        if not math.isfinite(float(design[k])):
            raise NetworkError(f"design value for {k!r} is not finite")
    unknown = [k for k in unc.variables if k not in net.external_names]
    if unknown:
        raise NetworkError(f"uncertainty given for unknown variables: {unknown}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    draws = _draw(net, unc, n, rng)

    if mode is Mode.MEAN_ONLY:
        s = _run_pass(net, design, unc, draws, n, True, False)
        std = float(np.std(s, ddof=1))
        return OutputDistribution.from_samples(s, 0.0, std, mode)
    if mode is Mode.FIXED_INPUT:
        s = _run_pass(net, design, unc, draws, n, False, True)
        std = float(np.std(s, ddof=1))
        return OutputDistribution.from_samples(s, std, 0.0, mode)
    full = _run_pass(net, design, unc, draws, n, True, True)
    pa = _run_pass(net, design, unc, draws, n, True, False)
    pr = _run_pass(net, design, unc, draws, n, False, True)
    return OutputDistribution.from_samples(full, np.std(pr, ddof=1), np.std(pa, ddof=1), mode)
