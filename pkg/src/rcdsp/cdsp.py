"""Compromise decision support: robust (EMI) and reliability formulations.

Both formulations share one goal: bring ``EMI / EMI_target`` to 1 with
deviation variables ``d_minus`` (underachievement) and ``d_plus``
(overachievement).  They differ only in the constraint that marks a grid point
admissible:

* Robust:       ``EMI >= EMI_target`` (and ``EMI > 1`` whenever EMI_target >= 1)
* Reliability:  ``alpha_hat >= alpha_T`` where alpha_hat is the Monte Carlo
  fraction of outputs at or above the target.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from .io import atomic_write_text, fmt
from .network import (
    Mode,
    OutputDistribution,
    SubsystemNetwork,
    UncertaintySpec,
    empirical_reliability,
    propagate,
    substream,
)

DEGENERATE_SPREAD = 1e-12
CONSISTENCY_TOL = 1e-6

SWEEP_COLUMNS = (
    "design_value", "f_hat", "sigma_pr", "sigma_pa", "emi", "phi_emi", "alpha_hat",
    "d_minus", "d_plus", "admissible_robust", "admissible_reliable", "skewness", "ex_kurtosis",
)


class DegenerateSpreadError(ArithmeticError):
    pass


class Formulation(enum.Enum):
    ROBUST = "robust"
    RELIABILITY = "reliability"

    @classmethod
    def parse(cls, value: "Formulation | str") -> "Formulation":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        aliases = {"rcdsp": "robust", "emi": "robust", "reliable": "reliability"}
        return cls(aliases.get(key, key))


class Spread(enum.Enum):
    ADDITIVE = "additive"
    RSS = "rss"


def total_spread(sigma_pr: float, sigma_pa: float, spread: Spread | str = Spread.ADDITIVE) -> float:
    if Spread(spread) is Spread.RSS:
        return math.hypot(sigma_pr, sigma_pa)
    return sigma_pr + sigma_pa


def emi(f_hat: float, y_target: float, sigma_pr: float, sigma_pa: float,
        spread: Spread | str = Spread.ADDITIVE) -> float:
    """Error margin index ``(f_hat - y_target) / spread``."""
    s = total_spread(sigma_pr, sigma_pa, spread)
    if not s > 0:
        raise DegenerateSpreadError("total output spread is zero")
    return (f_hat - y_target) / s


def deviation(emi_value: float, emi_target: float) -> tuple[float, float]:
    if not emi_target > 0:
        raise ValueError("EMI target must be positive")
    r = emi_value / emi_target
    return max(0.0, 1.0 - r), max(0.0, r - 1.0)


def alpha_from_emi_target(emi_target: float) -> float:
    if not math.isfinite(emi_target):
        raise ValueError("EMI target must be finite")
    return float(ndtr(emi_target))


def emi_target_from_alpha(alpha: float) -> float:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha_target must lie in (0, 1), got {alpha}")
    return float(ndtri(alpha))


@dataclass(frozen=True)
class DesignVariable:
    name: str
    lo: float
    hi: float
    grid_points: int = 101
    units: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi) and self.lo < self.hi):
            raise ValueError(f"design bounds must satisfy lo < hi, got [{self.lo}, {self.hi}]")
        if self.grid_points < 2:
            raise ValueError("grid_points must be >= 2")

    def grid(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.grid_points)


@dataclass(frozen=True)
class CdspProblem:
    """One swept design variable, one target, one formulation.

    Give either ``emi_target`` or ``alpha_target``; the other is derived
    through the standard normal CDF.  Giving both requires them to agree.
    """

    network: SubsystemNetwork
    unc: UncertaintySpec
    design_variable: DesignVariable
    y_target: float
    emi_target: float | None = None
    alpha_target: float | None = None
    mode: Formulation = Formulation.ROBUST
    mc_samples: int = 10_000
    seed: int = 0
    fixed_design: Mapping[str, float] = field(default_factory=dict)
    spread: Spread = Spread.ADDITIVE

    def __post_init__(self):
        object.__setattr__(self, "mode", Formulation.parse(self.mode))
        object.__setattr__(self, "spread", Spread(self.spread))
        e, a = self.emi_target, self.alpha_target
        if e is None and a is None:
            raise ValueError("give emi_target or alpha_target")
        if e is None:
            e = emi_target_from_alpha(a)
        elif a is None:
            a = alpha_from_emi_target(e)
        else:
            if not 0.0 < a < 1.0:
                raise ValueError(f"alpha_target must lie in (0, 1), got {a}")
            if abs(alpha_from_emi_target(e) - a) > CONSISTENCY_TOL:
                raise ValueError(f"emi_target {e} and alpha_target {a} disagree (Phi({e}) = {ndtr(e):.8f})")
        if not e > 0:
            raise ValueError("emi_target must be positive")
        object.__setattr__(self, "emi_target", float(e))
        object.__setattr__(self, "alpha_target", float(a))
        if self.mc_samples < 100:
            raise ValueError("mc_samples must be >= 100")
        if not math.isfinite(self.y_target):
            raise ValueError("y_target must be finite")
        names = set(self.network.external_names)
        if self.design_variable.name not in names:
            raise ValueError(f"design variable {self.design_variable.name!r} is not a network input")
        missing = names - {self.design_variable.name} - set(self.fixed_design)
        if missing:
            raise ValueError(f"no value for network inputs {sorted(missing)}")

    def design(self, value: float) -> dict[str, float]:
        d = dict(self.fixed_design)
        d[self.design_variable.name] = float(value)
        return d


@dataclass(frozen=True)
class DesignEvaluation:
    design_value: float
    f_hat: float
    sigma_pr: float
    sigma_pa: float
    emi: float
    phi_emi: float
    alpha_hat: float
    d_minus: float
    d_plus: float
    admissible_robust: bool
    admissible_reliable: bool
    skewness: float
    ex_kurtosis: float
    emi_target: float = math.nan
    emi_floor: bool = False
    degenerate: bool = False

    def row(self) -> list[str]:
        return [fmt(getattr(self, c)) for c in SWEEP_COLUMNS]

    def flag(self, mode: Formulation) -> bool:
        return self.admissible_robust if mode is Formulation.ROBUST else self.admissible_reliable


def robust_flag(emi_value: float, emi_target: float, degenerate: bool = False) -> bool:
    if degenerate:
        return False
    ok = emi_value >= emi_target
    if emi_target >= 1.0:
        ok = ok and emi_value > 1.0
    return bool(ok)


def evaluate_distribution(dist: OutputDistribution, design_value: float, y_target: float,
                          emi_target: float, alpha_target: float,
                          spread: Spread | str = Spread.ADDITIVE) -> DesignEvaluation:
    """Decision quantities for an already propagated design point."""
    s = total_spread(dist.std_pr, dist.std_pa, spread)
    degenerate = s < DEGENERATE_SPREAD
    if degenerate:
        e = math.inf if dist.mean > y_target else -math.inf
    else:
        e = (dist.mean - y_target) / s
    d_minus, d_plus = deviation(e, emi_target)
    alpha_hat = empirical_reliability(dist, y_target)
    return DesignEvaluation(
        design_value=float(design_value),
        f_hat=dist.mean,
        sigma_pr=dist.std_pr,
        sigma_pa=dist.std_pa,
        emi=e,
        phi_emi=float(ndtr(e)),
        alpha_hat=alpha_hat,
        d_minus=d_minus,
        d_plus=d_plus,
        admissible_robust=robust_flag(e, emi_target, degenerate),
        admissible_reliable=bool(alpha_hat >= alpha_target),
        skewness=dist.skewness,
        ex_kurtosis=dist.excess_kurtosis,
        emi_target=float(emi_target),
        emi_floor=bool(e > 1.0),
        degenerate=degenerate,
    )


def evaluate_design(problem: CdspProblem, design_value: float,
                    rng: np.random.Generator | int | None = None) -> DesignEvaluation:
    dv = problem.design_variable
    if not dv.lo <= design_value <= dv.hi:
        raise ValueError(f"{dv.name} = {design_value} outside [{dv.lo}, {dv.hi}]")
    if rng is None:
        rng = problem.seed
    dist = propagate(problem.network, problem.design(design_value), problem.unc, Mode.FULL,
                     problem.mc_samples, rng)
    return evaluate_distribution(dist, design_value, problem.y_target, problem.emi_target,
                                 problem.alpha_target, problem.spread)


class SweepError(RuntimeError):
    def __init__(self, index: int, value: float, cause: BaseException):
        super().__init__(f"grid point {index} ({value}) failed: {cause}")
        self.index = index
        self.cause = cause


def sweep_distributions(network: SubsystemNetwork, unc: UncertaintySpec, dv: DesignVariable,
                        n: int, seed: int, fixed_design: Mapping[str, float] | None = None
                        ) -> list[OutputDistribution]:
    """Full-mode propagation at every grid point; point ``i`` uses substream ``(seed, i)``."""
    out = []
    for i, v in enumerate(dv.grid()):
        design = dict(fixed_design or {})
        design[dv.name] = float(v)
        try:
            out.append(propagate(network, design, unc, Mode.FULL, n, substream(seed, i)))
        except Exception as exc:
            raise SweepError(i, float(v), exc) from exc
    return out


def _seed_of(problem: CdspProblem, rng) -> int:
    if rng is None:
        return problem.seed
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(2**63))
    return int(rng)


def sweep(problem: CdspProblem, rng: np.random.Generator | int | None = None) -> list[DesignEvaluation]:
    """Evaluate every grid point, in grid order."""
    dists = sweep_distributions(problem.network, problem.unc, problem.design_variable,
                                problem.mc_samples, _seed_of(problem, rng), problem.fixed_design)
    return evaluate_sweep(dists, problem.design_variable.grid(), problem.y_target,
                          problem.emi_target, problem.alpha_target, problem.spread)


def evaluate_sweep(dists: Sequence[OutputDistribution], grid: Sequence[float], y_target: float,
                   emi_target: float, alpha_target: float,
                   spread: Spread | str = Spread.ADDITIVE) -> list[DesignEvaluation]:
    return [evaluate_distribution(d, v, y_target, emi_target, alpha_target, spread)
            for d, v in zip(dists, grid)]


def admissible_set(evals: Sequence[DesignEvaluation | bool], mode: Formulation | str | None = None
                   ) -> list[tuple[int, int]]:
    """Maximal runs ``(first, last)`` of consecutive admissible grid indices."""
    if mode is None:
        flags = [bool(e) for e in evals]
    else:
        m = Formulation.parse(mode)
        flags = [e.flag(m) for e in evals]
    runs, start = [], None
    for i, f in enumerate(flags):
        if f and start is None:
            start = i
        elif not f and start is not None:
            runs.append((start, i - 1))
            start = None
    if start is not None:
        runs.append((start, len(flags) - 1))
    return runs


@dataclass(frozen=True)
class CdspSolution:
    mode: Formulation
    feasible: bool
    optimal_index: int | None
    optimal_design: float | None
    d_minus: float | None
    d_plus: float | None
    alpha_achieved: float | None
    admissible_set: list[tuple[int, int]]
    sweep: list[DesignEvaluation]

    def summary(self) -> dict[str, str]:
        return {
            "mode": self.mode.value,
            "feasible": fmt(self.feasible),
            "t_opt": fmt(self.optimal_design),
            "grid_index": fmt(self.optimal_index),
            "d_minus": fmt(self.d_minus),
            "d_plus": fmt(self.d_plus),
            "alpha_achieved": fmt(self.alpha_achieved),
            "admissible_set": ";".join(f"{a}-{b}" for a, b in self.admissible_set) or "NA",
        }


def solve_sweep(evals: Sequence[DesignEvaluation], mode: Formulation | str) -> CdspSolution:
    """Pick the optimum from an evaluated sweep.

    Smallest ``d_minus`` over the admissible points, then smallest ``d_plus``,
    then the lower design value.
    """
    mode = Formulation.parse(mode)
    evals = list(evals)
    runs = admissible_set(evals, mode)
    idx = [i for a, b in runs for i in range(a, b + 1)]
    if not idx:
        return CdspSolution(mode, False, None, None, None, None, None, runs, evals)
    best = min(idx, key=lambda i: (evals[i].d_minus, evals[i].d_plus, evals[i].design_value))
    e = evals[best]
    return CdspSolution(mode, True, best, e.design_value, e.d_minus, e.d_plus, e.alpha_hat, runs, evals)


def solve(problem: CdspProblem, rng: np.random.Generator | int | None = None) -> CdspSolution:
    return solve_sweep(sweep(problem, rng), problem.mode)


def sweep_csv(evals: Sequence[DesignEvaluation]) -> str:
    lines = [",".join(SWEEP_COLUMNS)] + [",".join(e.row()) for e in evals]
    return "\n".join(lines) + "\n"


def write_sweep_csv(evals: Sequence[DesignEvaluation], path: str | Path) -> None:
    atomic_write_text(path, sweep_csv(evals))
