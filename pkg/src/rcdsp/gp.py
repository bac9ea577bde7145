"""Gaussian-process regression with a squared-exponential kernel.

The kernel follows the kriging convention

    cov(x, x') = sigma2 * R(x, x'),   R = exp(-sum_i 10**omega_i * (x_i - x'_i)**2)

with homoscedastic noise placed inside the correlation matrix,
``R_delta = R + delta2 * I``.  The physical noise variance is therefore
``sigma2 * delta2``.  The prior mean is zero.

Inputs are affinely mapped to ``[0, 1]`` per column before fitting so the
roughness bounds mean the same thing for every column; the map is stored on
the trained model and callers always work in physical units.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize
from scipy.spatial.distance import cdist

logger = logging.getLogger(__name__)

FORMAT_TAG = "rcdsp.gp/1"

JITTER_START = 1e-10
JITTER_MAX = 1e-6


class GPError(Exception):
    """Base class for surrogate errors."""


class FactorizationError(GPError, ArithmeticError):
    """The covariance matrix stayed indefinite after the jitter ladder."""


class FitError(GPError):
    """Every optimizer restart failed."""


@dataclass(frozen=True)
class Dataset:
    """Training data for a single-output surrogate.

    ``labels`` is optional per-row metadata (e.g. which candidate physics model
    produced the row) and never enters the regression.
    """

    inputs: np.ndarray
    outputs: np.ndarray
    column_names: tuple[str, ...] = ()
    units: tuple[str, ...] = ()
    output_name: str = "y"
    labels: np.ndarray | None = None

    def __post_init__(self) -> None:
        x = np.array(self.inputs, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        y = np.array(self.outputs, dtype=float).reshape(-1)
        if x.ndim != 2:
            raise ValueError("inputs must be a 2-D array")
        if x.shape[0] != y.shape[0]:
            raise ValueError(f"{x.shape[0]} input rows but {y.shape[0]} outputs")
        if x.shape[0] < 1:
            raise ValueError("dataset is empty")
        if not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
            raise ValueError("dataset contains non-finite entries")
        names = tuple(self.column_names) or tuple(f"x{i}" for i in range(x.shape[1]))
        units = tuple(self.units) or ("",) * x.shape[1]
        if len(names) != x.shape[1] or len(units) != x.shape[1]:
            raise ValueError("column_names/units must have one entry per input column")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "outputs", y)
        object.__setattr__(self, "column_names", names)
        object.__setattr__(self, "units", units)
        if self.labels is not None:
            labels = np.array(self.labels).reshape(-1)
            if labels.shape[0] != y.shape[0]:
                raise ValueError("labels must have one entry per row")
            object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]


@dataclass(frozen=True)
class Hyperparameters:
    omega: np.ndarray
    sigma2: float
    delta2: float = 0.0

    def __post_init__(self) -> None:
        omega = np.array(self.omega, dtype=float).reshape(-1)
        if not np.all(np.isfinite(omega)):
            raise ValueError("omega must be finite")
        if not (math.isfinite(self.sigma2) and self.sigma2 > 0):
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if not (math.isfinite(self.delta2) and self.delta2 >= 0):
            raise ValueError(f"delta2 must be non-negative, got {self.delta2}")
        omega.flags.writeable = False
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "sigma2", float(self.sigma2))
        object.__setattr__(self, "delta2", float(self.delta2))


@dataclass(frozen=True)
class FitConfig:
    """Bounds and multistart settings for maximum-likelihood training.

    ``log_sigma2_bounds`` and ``log_delta2_bounds`` are base-10, matching the
    base of the roughness exponents.
    """

    omega_bounds: tuple[float, float] = (-6.0, 6.0)
    log_sigma2_bounds: tuple[float, float] = (-6.0, 6.0)
    log_delta2_bounds: tuple[float, float] = (-12.0, 0.0)
    restarts: int = 10
    seed: int = 0
    max_iter: int = 400
    standardize: bool = True

    def __post_init__(self) -> None:
        for name in ("omega_bounds", "log_sigma2_bounds", "log_delta2_bounds"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name}: lower bound must be below upper bound")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


def correlation(x: Sequence[float], x_prime: Sequence[float], omega: Sequence[float]) -> float:
    """Squared-exponential correlation between two points."""
    x = np.asarray(x, dtype=float).reshape(-1)
    x_prime = np.asarray(x_prime, dtype=float).reshape(-1)
    omega = np.asarray(omega, dtype=float).reshape(-1)
    if not (x.shape == x_prime.shape == omega.shape):
        raise ValueError(
            f"dimension mismatch: x={x.shape[0]}, x'={x_prime.shape[0]}, omega={omega.shape[0]}"
        )
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(x_prime))):
        raise ValueError("non-finite coordinates")
    return float(np.exp(-np.sum(10.0**omega * (x - x_prime) ** 2)))


def correlation_matrix(a: np.ndarray, b: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """Pairwise correlations between the rows of ``a`` and ``b``."""
    scale = np.sqrt(10.0 ** np.asarray(omega, dtype=float))
    return np.exp(-cdist(a * scale, b * scale, "sqeuclidean"))


def build_covariance(dataset: Dataset, hyper: Hyperparameters) -> np.ndarray:
    """``sigma2 * (R + delta2 * I)`` over the dataset's inputs as given."""
    _check_dims(dataset, hyper)
    r = correlation_matrix(dataset.inputs, dataset.inputs, hyper.omega)
    r[np.diag_indices_from(r)] = 1.0
    cov = hyper.sigma2 * (r + hyper.delta2 * np.eye(dataset.n))
    if not np.all(np.isfinite(cov)):
        raise FactorizationError("covariance has non-finite entries")
    return cov


def _check_dims(dataset: Dataset, hyper: Hyperparameters) -> None:
    if hyper.omega.shape[0] != dataset.input_dim:
        raise ValueError(
            f"omega has {hyper.omega.shape[0]} entries for {dataset.input_dim} input columns"
        )


def _cholesky_with_jitter(matrix: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor, escalating diagonal jitter on failure.

    Returns the factor and the absolute jitter that was added (0.0 if none).
    """
    try:
        return cholesky(matrix, lower=True, check_finite=False), 0.0
    except LinAlgError:
        pass
    mean_diag = float(np.mean(np.diag(matrix)))
    eye = np.eye(matrix.shape[0])
    rel = JITTER_START
    while rel <= JITTER_MAX * (1 + 1e-12):
        jitter = rel * mean_diag
        try:
            return cholesky(matrix + jitter * eye, lower=True, check_finite=False), jitter
        except LinAlgError:
            rel *= 2.0
    raise FactorizationError(
        f"matrix not positive definite after jitter up to {JITTER_MAX:g} x mean diagonal"
    )


def _noisy_correlation(x: np.ndarray, omega: np.ndarray, delta2: float) -> np.ndarray:
    r = correlation_matrix(x, x, omega)
    r[np.diag_indices_from(r)] = 1.0 + delta2
    return r


def log_likelihood(dataset: Dataset, hyper: Hyperparameters) -> float:
    """Gaussian log marginal likelihood of the outputs under the zero-mean prior."""
    _check_dims(dataset, hyper)
    r_delta = _noisy_correlation(dataset.inputs, hyper.omega, hyper.delta2)
    try:
        chol, _ = _cholesky_with_jitter(r_delta)
    except FactorizationError as exc:
        raise FactorizationError(
            f"{exc} (omega={hyper.omega.tolist()}, sigma2={hyper.sigma2:g}, "
            f"delta2={hyper.delta2:g})"
        ) from None
    return _loglik_from_chol(chol, dataset.outputs, hyper.sigma2)


def _loglik_from_chol(chol: np.ndarray, y: np.ndarray, sigma2: float) -> float:
    n = y.shape[0]
    alpha = solve_triangular(chol, y, lower=True, check_finite=False)
    quad = float(alpha @ alpha) / sigma2
    logdet = n * math.log(sigma2) + 2.0 * float(np.sum(np.log(np.diag(chol))))
    return -0.5 * (quad + logdet + n * math.log(2.0 * math.pi))


class TrainedGP:
    """A fitted surrogate; immutable after construction.

    Parameters
    ----------
    dataset : Dataset
        Training data in physical units.
    hyper : Hyperparameters
        Roughness exponents apply to the *standardized* inputs.
    input_offset, input_scale : array, optional
        Affine map ``(x - offset) / scale``.  Defaults to the identity.
    fit_report : dict, optional
        Diagnostics from :func:`fit`.
    """

    def __init__(
        self,
        dataset: Dataset,
        hyper: Hyperparameters,
        input_offset: np.ndarray | None = None,
        input_scale: np.ndarray | None = None,
        fit_report: dict[str, Any] | None = None,
    ) -> None:
        _check_dims(dataset, hyper)
        d = dataset.input_dim
        offset = np.zeros(d) if input_offset is None else np.array(input_offset, dtype=float)
        scale = np.ones(d) if input_scale is None else np.array(input_scale, dtype=float)
        if offset.shape != (d,) or scale.shape != (d,) or np.any(scale <= 0):
            raise ValueError("input map must have one positive scale per column")
        self._dataset = dataset
        self._hyper = hyper
        self._offset = offset
        self._scale = scale
        self._x = (dataset.inputs - offset) / scale
        r_delta = _noisy_correlation(self._x, hyper.omega, hyper.delta2)
        self._chol, self._jitter = _cholesky_with_jitter(r_delta)
        self._weights = cho_solve((self._chol, True), dataset.outputs, check_finite=False)
        self._fit_report = dict(fit_report or {})
        for arr in (self._offset, self._scale, self._x, self._chol, self._weights):
            arr.flags.writeable = False

    dataset = property(lambda self: self._dataset)
    hyper = property(lambda self: self._hyper)
    chol = property(lambda self: self._chol)
    weights = property(lambda self: self._weights)
    jitter = property(lambda self: self._jitter)
    input_offset = property(lambda self: self._offset)
    input_scale = property(lambda self: self._scale)

    @property
    def fit_report(self) -> dict[str, Any]:
        return dict(self._fit_report)

    @property
    def input_dim(self) -> int:
        return self._dataset.input_dim

    def _as_rows(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        rows = x.reshape(1, -1) if x.ndim == 1 else x
        if rows.ndim != 2 or rows.shape[1] != self.input_dim:
            raise ValueError(f"expected {self.input_dim} input columns, got shape {x.shape}")
        if not np.all(np.isfinite(rows)):
            raise ValueError("prediction inputs must be finite")
        return rows

    def predict(self, x: np.ndarray) -> tuple[Any, Any]:
        """Posterior mean and latent variance (noise excluded).

        A single point returns two floats; an ``(m, D)`` array returns two
        length-``m`` arrays.
        """
        rows = self._as_rows(x)
        r = correlation_matrix((rows - self._offset) / self._scale, self._x, self._hyper.omega)
        mean = r @ self._weights
        v = solve_triangular(self._chol, r.T, lower=True, check_finite=False)
        var = self._hyper.sigma2 * (1.0 - np.einsum("ij,ij->j", v, v))
        np.maximum(var, 0.0, out=var)
        if np.asarray(x).ndim == 1:
            return float(mean[0]), float(var[0])
        return mean, var

    def predict_mean(self, x: np.ndarray) -> Any:
        rows = self._as_rows(x)
        r = correlation_matrix((rows - self._offset) / self._scale, self._x, self._hyper.omega)
        mean = r @ self._weights
        return float(mean[0]) if np.asarray(x).ndim == 1 else mean

    def sample(self, x: np.ndarray, rng: np.random.Generator) -> Any:
        """One independent posterior draw per row of ``x``."""
        mean, var = self.predict(x)
        z = rng.standard_normal(np.shape(mean))
        out = mean + np.sqrt(var) * z
        return float(out) if np.ndim(out) == 0 else out

    def to_dict(self) -> dict[str, Any]:
        ds = self._dataset
        return {
            "format": FORMAT_TAG,
            "dataset": {
                "inputs": ds.inputs.tolist(),
                "outputs": ds.outputs.tolist(),
                "column_names": list(ds.column_names),
                "units": list(ds.units),
                "output_name": ds.output_name,
                "labels": None if ds.labels is None else ds.labels.tolist(),
            },
            "input_offset": self._offset.tolist(),
            "input_scale": self._scale.tolist(),
            "hyper": {
                "omega": self._hyper.omega.tolist(),
                "sigma2": self._hyper.sigma2,
                "delta2": self._hyper.delta2,
            },
            "fit_report": self._fit_report,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainedGP":
        if data.get("format") != FORMAT_TAG:
            raise ValueError(f"unsupported model format {data.get('format')!r}")
        ds = data["dataset"]
        dataset = Dataset(
            inputs=np.array(ds["inputs"], dtype=float),
            outputs=np.array(ds["outputs"], dtype=float),
            column_names=tuple(ds["column_names"]),
            units=tuple(ds["units"]),
            output_name=ds["output_name"],
            labels=None if ds["labels"] is None else np.array(ds["labels"]),
        )
        h = data["hyper"]
        return cls(
            dataset,
            Hyperparameters(np.array(h["omega"]), h["sigma2"], h["delta2"]),
            input_offset=np.array(data["input_offset"]),
            input_scale=np.array(data["input_scale"]),
            fit_report=data.get("fit_report"),
        )


def predict(gp: TrainedGP, x: np.ndarray) -> tuple[Any, Any]:
    return gp.predict(x)


def sample_posterior(gp: TrainedGP, x: np.ndarray, rng: np.random.Generator) -> float:
    """``mean + sqrt(var) * z`` with ``z`` drawn from ``rng``."""
    mean, var = gp.predict(np.asarray(x, dtype=float).reshape(-1))
    if var == 0.0:
        return mean
    return mean + math.sqrt(var) * float(rng.standard_normal())


def save(gp: TrainedGP, path: str | Path) -> None:
    Path(path).write_text(json.dumps(gp.to_dict(), indent=1))


def load(path: str | Path) -> TrainedGP:
    return TrainedGP.from_dict(json.loads(Path(path).read_text()))


def unit_map(inputs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Offset/scale sending each column's observed range onto [0, 1]."""
    lo = inputs.min(axis=0)
    span = inputs.max(axis=0) - lo
    span = np.where(span > 0, span, 1.0)
    return lo, span


@dataclass
class _Objective:
    x: np.ndarray
    y: np.ndarray
    config: FitConfig
    evaluations: int = field(default=0)

    def profile(self, theta: np.ndarray) -> tuple[float, float]:
        """Negative log-likelihood with sigma2 profiled out; returns (nll, sigma2)."""
        self.evaluations += 1
        omega, log_delta2 = theta[:-1], theta[-1]
        r_delta = _noisy_correlation(self.x, omega, 10.0**log_delta2)
        try:
            chol, _ = _cholesky_with_jitter(r_delta)
        except FactorizationError:
            return math.inf, math.nan
        alpha = solve_triangular(chol, self.y, lower=True, check_finite=False)
        lo, hi = self.config.log_sigma2_bounds
        sigma2_hat = max(float(alpha @ alpha) / self.y.shape[0], 10.0**lo)
        sigma2 = min(sigma2_hat, 10.0**hi)
        return -_loglik_from_chol(chol, self.y, sigma2), sigma2

    def __call__(self, theta: np.ndarray) -> float:
        return self.profile(theta)[0]


def fit(dataset: Dataset, config: FitConfig | None = None) -> TrainedGP:
    """Maximum-likelihood hyperparameters by seeded multistart Nelder-Mead.

    ``sigma2`` is profiled out in closed form (clipped to its bounds), so the
    search runs over the roughness exponents and ``log10(delta2)`` only.
    Restart ``k`` starts from a point drawn with the ``k``-th child of
    ``SeedSequence(config.seed)``; the best run wins, ties going to the lower
    restart index, so the result does not depend on evaluation order.
    """
    config = config or FitConfig()
    if dataset.n < 2:
        raise ValueError("fit needs at least two training rows")
    if config.standardize:
        offset, scale = unit_map(dataset.inputs)
    else:
        offset, scale = np.zeros(dataset.input_dim), np.ones(dataset.input_dim)
    objective = _Objective((dataset.inputs - offset) / scale, dataset.outputs, config)
    bounds = [config.omega_bounds] * dataset.input_dim + [config.log_delta2_bounds]
    lower = np.array([b[0] for b in bounds])
    upper = np.array([b[1] for b in bounds])

    best: tuple[float, int, np.ndarray] | None = None
    failures = 0
    iterations = 0
    children = np.random.SeedSequence(config.seed).spawn(config.restarts)
    for k, child in enumerate(children):
        start = np.random.default_rng(child).uniform(lower, upper)
        if not math.isfinite(objective(start)):
            # walk the start toward high noise, which always factorizes
            start[-1] = upper[-1]
        result = minimize(
            objective,
            start,
            method="Nelder-Mead",
            bounds=bounds,
            options={"maxiter": config.max_iter, "xatol": 1e-5, "fatol": 1e-9},
        )
        iterations += int(result.nit)
        value = float(result.fun)
        if not math.isfinite(value):
            failures += 1
            continue
        if best is None or value < best[0]:
            best = (value, k, np.array(result.x))
    if best is None:
        raise FitError(
            f"all {config.restarts} restarts failed to factorize "
            f"(n={dataset.n}, D={dataset.input_dim})"
        )
    nll, k_best, theta = best
    _, sigma2 = objective.profile(theta)
    hyper = Hyperparameters(theta[:-1], sigma2, 10.0 ** theta[-1])
    report = {
        "log_likelihood": -nll,
        "iterations": iterations,
        "evaluations": objective.evaluations,
        "restarts": config.restarts,
        "failed_restarts": failures,
        "best_restart": k_best,
        "seed": config.seed,
    }
    logger.debug("fit n=%d D=%d ll=%.6g", dataset.n, dataset.input_dim, -nll)
    return TrainedGP(dataset, hyper, offset, scale, report)
