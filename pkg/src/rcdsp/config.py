"""Run configuration: a sectioned INI file with a fixed schema.

Every key is optional and has a default; unknown sections or keys, bad types
and out-of-range values raise :class:`ConfigError` naming the key and line.

    [gp]            restarts
    [uncertainty]   sigma_pa, family
    [cdsp]          case, lrl, alpha_target, emi_target, mode, t_lo, t_hi,
                    grid_points, mc_samples, spread
    [experiment]    master_seed, rows, case_d_literal_n,
                    histogram_temperature, histogram_samples, histogram_bins
    [output]        directory
"""

from __future__ import annotations

import configparser
import math
import re
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Callable

from .cdsp import Spread, alpha_from_emi_target, emi_target_from_alpha
from .experiments import CASES, HarnessSettings, parse_rows
from .network import FAMILIES


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _opt_float(text: str) -> float | None:
    t = text.strip()
    return None if t.lower() in ("", "none", "na") else float(t)


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        t = text.strip().lower()
        if t not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return t
    return parse


def _case(text: str) -> str:
    t = text.strip().upper()
    if t not in CASES:
        raise ValueError(f"expected one of {', '.join(CASES)}, got {text!r}")
    return t


def _rows(text: str) -> str:
    parse_rows(text)
    return text.strip()


# section -> key -> (parser, check or None, check description)
_POS = (lambda v: v > 0, "must be > 0")
_NONNEG = (lambda v: v >= 0, "must be >= 0")
SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], Any]]] = {
    "gp": {"restarts": (int, (lambda v: v >= 1, "must be >= 1"))},
    "uncertainty": {
        "sigma_pa": (float, (lambda v: math.isfinite(v) and v >= 0, "must be finite and >= 0")),
        "family": (_choice(*FAMILIES), None),
    },
    "cdsp": {
        "case": (_case, None),
        "lrl": (float, (math.isfinite, "must be finite")),
        "alpha_target": (_opt_float, (lambda v: v is None or 0 < v < 1, "must lie in (0, 1)")),
        "emi_target": (_opt_float, (lambda v: v is None or (math.isfinite(v) and v > 0), "must be > 0")),
        "mode": (_choice("robust", "reliability", "both"), None),
        "t_lo": (float, (math.isfinite, "must be finite")),
        "t_hi": (float, (math.isfinite, "must be finite")),
        "grid_points": (int, (lambda v: v >= 2, "must be >= 2")),
        "mc_samples": (int, (lambda v: v >= 100, "must be >= 100")),
        "spread": (_choice("additive", "rss"), None),
    },
    "experiment": {
        "master_seed": (int, _NONNEG),
        "rows": (_rows, None),
        "case_d_literal_n": (_bool, None),
        "histogram_temperature": (float, (math.isfinite, "must be finite")),
        "histogram_samples": (int, (lambda v: v >= 100, "must be >= 100")),
        "histogram_bins": (int, (lambda v: v >= 2, "must be >= 2")),
    },
    "output": {"directory": (str, (lambda v: bool(v.strip()), "must not be empty"))},
}


@dataclass(frozen=True)
class RunConfig:
    # gp
    restarts: int = 10
    # uncertainty
    sigma_pa: float = 5.0
    family: str = "normal"
    # cdsp
    case: str = "A"
    lrl: float = 270.0
    alpha_target: float | None = 0.95
    emi_target: float | None = None
    mode: str = "both"
    t_lo: float = 1000.0
    t_hi: float = 2000.0
    grid_points: int = 101
    mc_samples: int = 10_000
    spread: str = "additive"
    # experiment
    master_seed: int = 0
    rows: str = "1-36"
    case_d_literal_n: bool = False
    histogram_temperature: float = 1450.0
    histogram_samples: int = 100_000
    histogram_bins: int = 50
    # output
    directory: str = "results"

    def harness_settings(self) -> HarnessSettings:
        return HarnessSettings(
            mc_samples=self.mc_samples, grid_points=self.grid_points, t_lo=self.t_lo, t_hi=self.t_hi,
            sigma_pa=self.sigma_pa, family=self.family, spread=Spread(self.spread),
            restarts=self.restarts, case_d_literal_n=self.case_d_literal_n,
        )

    def targets(self) -> tuple[float, float]:
        """``(alpha_target, emi_target)``, one derived from the other when needed."""
        a, e = self.alpha_target, self.emi_target
        if a is None:
            return alpha_from_emi_target(e), e
        return a, emi_target_from_alpha(a) if e is None else e


SECTION_OF = {k: s for s, keys in SCHEMA.items() for k in keys}


def _line_numbers(text: str) -> dict[tuple[str, str], int]:
    out, section = {}, None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
            out[(section, "")] = i
            continue
        m = re.match(r"([^=:#;\s][^=:]*?)\s*[=:]", s)
        if m and section is not None:
            out.setdefault((section, m.group(1).strip().lower()), i)
    return out


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    lines = _line_numbers(text)
    where = lambda sec, key="": f"{source}:{lines.get((sec, key), '?')}"  # noqa: E731
    values: dict[str, Any] = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"{where(sec)}: unknown section [{sec}]; expected one of {', '.join(SCHEMA)}")
        for key, raw in cp.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigError(f"{where(sec, key)}: unknown key {sec}.{key}")
            parser, check = SCHEMA[sec][key]
            try:
                v = parser(raw)
            except ValueError as exc:
                raise ConfigError(f"{where(sec, key)}: {sec}.{key}: {exc}") from exc
            if check is not None and not check[0](v):
                raise ConfigError(f"{where(sec, key)}: {sec}.{key} = {raw!r} {check[1]}")
            values[key] = v
    if "alpha_target" in values and "emi_target" not in values:
        values.setdefault("emi_target", None)
    if "emi_target" in values and values["emi_target"] is not None and "alpha_target" not in values:
        values["alpha_target"] = None
    cfg = RunConfig(**values)
    _cross_checks(cfg, where)
    return cfg


def _cross_checks(cfg: RunConfig, where) -> None:
    if not cfg.t_lo < cfg.t_hi:
        raise ConfigError(f"{where('cdsp', 't_hi')}: cdsp.t_hi must exceed cdsp.t_lo")
    if cfg.alpha_target is None and cfg.emi_target is None:
        raise ConfigError(f"{where('cdsp')}: give cdsp.alpha_target or cdsp.emi_target")
    if cfg.alpha_target is not None and cfg.emi_target is not None:
        if abs(alpha_from_emi_target(cfg.emi_target) - cfg.alpha_target) > 1e-6:
            raise ConfigError(f"{where('cdsp', 'emi_target')}: cdsp.emi_target and cdsp.alpha_target disagree")


def parse_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, str(path))


def _text(v: Any) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_config(cfg: RunConfig | None = None) -> str:
    cfg = cfg or RunConfig()
    values = asdict(cfg)
    out = []
    for sec, keys in SCHEMA.items():
        out.append(f"[{sec}]")
        out.extend(f"{k} = {_text(values[k])}" for k in keys)
        out.append("")
    return "\n".join(out)


assert {f.name for f in fields(RunConfig)} == set(SECTION_OF), "schema and RunConfig out of sync"
