"""Command-line entry point.

Exit status: 0 success, 1 usage or configuration error, 2 runtime failure.
Every file written is recorded in ``<output>/manifest.csv`` with its SHA-256,
the producing command and the master seed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import process
from .cdsp import Formulation, evaluate_sweep, solve_sweep, sweep_csv
from .config import ConfigError, RunConfig, emit_config, parse_config
from .experiments import (
    CASES,
    ExperimentRecord,
    Harness,
    default_matrix,
    load_case,
    matrix_csv,
    parse_rows,
    case_json,
)
from .io import atomic_write_text, fmt

logger = logging.getLogger("rcdsp")

MANIFEST = "manifest.csv"
MANIFEST_COLUMNS = ("path", "sha256", "command", "master_seed")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


class Run:
    """Writes artifacts under one output directory and keeps the manifest."""

    def __init__(self, cfg: RunConfig, outdir: Path, command: str):
        self.cfg = cfg
        self.outdir = outdir
        self.command = command
        self.written: list[Path] = []

    def write(self, rel: str, text: str) -> Path:
        path = atomic_write_text(self.outdir / rel, text)
        self.written.append(path)
        return path

    def finish(self) -> None:
        mpath = self.outdir / MANIFEST
        rows: dict[str, list[str]] = {}
        if mpath.exists():
            with open(mpath, newline="") as fh:
                for r in csv.DictReader(fh):
                    rows[r["path"]] = [r[c] for c in MANIFEST_COLUMNS]
        for p in self.written:
            rel = p.relative_to(self.outdir).as_posix()
            digest = hashlib.sha256(p.read_bytes()).hexdigest()
            rows[rel] = [rel, digest, self.command, str(self.cfg.master_seed)]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for key in sorted(rows):
            w.writerow(rows[key])
        atomic_write_text(mpath, buf.getvalue())


def _harness(cfg: RunConfig, outdir: Path) -> Harness:
    """Harness seeded from the config; reuses persisted case models when present."""
    h = Harness(cfg.master_seed, cfg.harness_settings())
    for cid in CASES:
        path = outdir / "models" / f"case_{cid}.json"
        if path.exists():
            case, net = load_case(path)
            if case == h.settings.case(cid):
                h.add_network(case, net)
    return h


def cmd_fit(args, cfg: RunConfig, run: Run) -> None:
    h = Harness(cfg.master_seed, cfg.harness_settings())
    for cid in args.case or list(CASES):
        case = h.settings.case(cid)
        net = h.network(case)
        path = run.write(f"models/case_{cid}.json", case_json(net, case))
        print(f"case {cid}: {len(net.nodes)} nodes -> {path}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "value", "units", "source"])
    for c in process.constants_rows():
        w.writerow([c.name, fmt(c.value), c.units, c.source])
    run.write("models/constants.csv", buf.getvalue())


def cmd_propagate(args, cfg: RunConfig, run: Run) -> None:
    h = _harness(cfg, run.outdir)
    case = h.settings.case(args.case or cfg.case)
    t = cfg.histogram_temperature if args.temperature is None else args.temperature
    n = args.samples or cfg.histogram_samples
    dist, hist = h.histogram_at(case, t, n, cfg.histogram_bins)
    tag = f"case_{case.case_id}_{fmt(t)}F"
    run.write(f"propagate/samples_{tag}.csv",
              "index,value\n" + "".join(f"{i},{fmt(v)}\n" for i, v in enumerate(dist.samples)))
    run.write(f"propagate/histogram_{tag}.csv",
              "bin_center,density\n" + "".join(f"{fmt(c)},{fmt(d)}\n" for c, d in hist))
    summary = {"case": case.case_id, "temperature_f": t, "n": dist.n, "mean": dist.mean,
               "std_total": dist.std_total, "std_pr": dist.std_pr, "std_pa": dist.std_pa,
               "skewness": dist.skewness, "excess_kurtosis": dist.excess_kurtosis}
    run.write(f"propagate/summary_{tag}.json", json.dumps(summary, indent=1) + "\n")
    print(json.dumps(summary, indent=1))


def cmd_solve(args, cfg: RunConfig, run: Run) -> None:
    h = _harness(cfg, run.outdir)
    case = h.settings.case(args.case or cfg.case)
    alpha, emi_t = cfg.targets()
    lrl = cfg.lrl if args.lrl is None else args.lrl
    mode = args.mode or cfg.mode
    evals = evaluate_sweep(h.distributions(case), h.settings.design_variable().grid(), lrl, emi_t, alpha,
                           h.settings.spread)
    tag = f"case_{case.case_id}_lrl{fmt(lrl)}_a{fmt(alpha)}"
    run.write(f"solve/sweep_{tag}.csv", sweep_csv(evals))
    modes = [Formulation.ROBUST, Formulation.RELIABILITY] if mode == "both" else [Formulation.parse(mode)]
    for m in modes:
        sol = solve_sweep(evals, m)
        summary = {"case": case.case_id, "lrl": lrl, "alpha_target": alpha, "emi_target": emi_t,
                   **sol.summary()}
        run.write(f"solve/solution_{m.value}_{tag}.json", json.dumps(summary, indent=1) + "\n")
        print(" ".join(f"{k}={v}" for k, v in summary.items()))


def _records(cfg: RunConfig, outdir: Path, rows: Sequence[int]) -> tuple[list[ExperimentRecord], Harness]:
    h = _harness(cfg, outdir)
    specs = default_matrix(cfg.master_seed, h.settings)
    return h.run_matrix([specs[i - 1] for i in rows], rows), h


def cmd_experiment(args, cfg: RunConfig, run: Run) -> None:
    rows = parse_rows(args.rows or cfg.rows)
    records, _ = _records(cfg, run.outdir, rows)
    path = run.write("experiment/matrix.csv", matrix_csv(records))
    failed = [r.exp_id for r in records if r.error]
    print(f"{len(records)} rows -> {path}" + (f"; failed rows: {failed}" if failed else ""))
    if failed:
        raise RuntimeError(f"{len(failed)} experiment rows failed: {failed}")


def render_table(records: Sequence[ExperimentRecord]) -> str:
    head = (f"{'id':>3} {'case':>4} {'LRL':>5} {'alpha_T':>7} {'EMI_T':>6} | "
            f"{'rc d-':>7} {'rc d+':>7} {'alpha_A':>7} {'rc T_O':>7} | "
            f"{'rel d-':>7} {'rel d+':>7} {'rel T_O':>7}")
    lines = [head, "-" * len(head)]

    def num(v, spec):
        return "NA" if v is None else format(v, spec)

    for r in records:
        s = r.spec
        rc = r.rc if r.rc is not None and r.rc.feasible else None
        rel = r.rel if r.rel is not None and r.rel.feasible else None
        line = (f"{r.exp_id:>3} {s.case.case_id:>4} {s.lrl:>5.0f} {s.alpha_target:>7.2f} {s.emi_target:>6.3f} | "
                f"{num(rc and rc.d_minus, '.3f'):>7} {num(rc and rc.d_plus, '.3f'):>7} "
                f"{num(rc and rc.alpha_achieved, '.4f'):>7} {num(rc and rc.optimal_design, '.0f'):>7} | "
                f"{num(rel and rel.d_minus, '.3f'):>7} {num(rel and rel.d_plus, '.3f'):>7} "
                f"{num(rel and rel.optimal_design, '.0f'):>7}")
        if r.error:
            line += f"  error: {r.error}"
        lines.append(line)
    return "\n".join(lines) + "\n"


def cmd_report(args, cfg: RunConfig, run: Run) -> None:
    rows = parse_rows(args.rows or cfg.rows)
    records, h = _records(cfg, run.outdir, rows)
    table = render_table(records)
    run.write("report/table.txt", table)
    run.write("report/matrix.csv", matrix_csv(records))
    for r in records:
        if r.error:
            continue
        s = r.spec
        tag = f"row{r.exp_id:02d}_case_{s.case.case_id}_lrl{fmt(s.lrl)}_a{fmt(s.alpha_target)}"
        run.write(f"report/sweeps/{tag}.csv", sweep_csv(r.rc.sweep))
    for cid in sorted({r.spec.case.case_id for r in records}):
        case = h.settings.case(cid)
        dist, hist = h.histogram_at(case, cfg.histogram_temperature, cfg.histogram_samples, cfg.histogram_bins)
        run.write(f"report/histogram_case_{cid}_{fmt(cfg.histogram_temperature)}F.csv",
                  "bin_center,density\n" + "".join(f"{fmt(c)},{fmt(d)}\n" for c, d in hist))
        table += (f"case {cid} at {fmt(cfg.histogram_temperature)} F: mean {dist.mean:.2f} "
                  f"std {dist.std_total:.3f} skewness {dist.skewness:.3f} "
                  f"excess kurtosis {dist.excess_kurtosis:.3f}\n")
    run.write("report/table.txt", table)
    print(table, end="")


def cmd_emit_config(args, cfg: RunConfig | None) -> int:
    text = emit_config(cfg)
    if args.output:
        atomic_write_text(args.output, text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rcdsp", description="GP surrogates, uncertainty propagation and robust/reliability "
                                          "decision support for the hot-rod-rolling chain.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, needs_config=True):
        sp.add_argument("--config", required=needs_config, help="INI run configuration")
        sp.add_argument("--output-dir", help="override [output] directory")

    sp = sub.add_parser("fit", help="train and save the case networks")
    common(sp)
    sp.add_argument("--case", action="append", choices=list(CASES))

    sp = sub.add_parser("propagate", help="output samples and histogram at one temperature")
    common(sp)
    sp.add_argument("--case", choices=list(CASES))
    sp.add_argument("--temperature", type=float)
    sp.add_argument("--samples", type=int)

    sp = sub.add_parser("solve", help="temperature sweep and optimum for one target")
    common(sp)
    sp.add_argument("--case", choices=list(CASES))
    sp.add_argument("--lrl", type=float)
    sp.add_argument("--mode", choices=["robust", "reliability", "both"])

    sp = sub.add_parser("experiment", help="run the experiment matrix")
    common(sp)
    sp.add_argument("--rows", help="1-based row selection, e.g. 1-9 or 1,4,10-12")

    sp = sub.add_parser("report", help="comparison table and per-figure CSVs")
    common(sp)
    sp.add_argument("--rows")

    sp = sub.add_parser("emit-config", help="print a complete configuration")
    sp.add_argument("--config", help="start from this configuration instead of the defaults")
    sp.add_argument("--output", help="write here instead of stdout")
    return p


COMMANDS = {"fit": cmd_fit, "propagate": cmd_propagate, "solve": cmd_solve,
            "experiment": cmd_experiment, "report": cmd_report}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config) if args.config else None
        if args.command == "emit-config":
            return cmd_emit_config(args, cfg)
        if getattr(args, "samples", None) is not None and args.samples < 100:
            raise UsageError("--samples must be >= 100")
        if getattr(args, "rows", None):
            parse_rows(args.rows)
    except (ConfigError, UsageError, ValueError) as exc:
        parser.print_usage(sys.stderr)
        print(f"rcdsp: error: {exc}", file=sys.stderr)
        return 1
    outdir = Path(args.output_dir or cfg.directory)
    run = Run(cfg, outdir, " ".join(["rcdsp", *argv]))
    try:
        COMMANDS[args.command](args, cfg, run)
    except Exception as exc:
        logger.debug("failure", exc_info=True)
        print(f"rcdsp: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        run.finish() if run.written else None
        return 2
    run.finish()
    return 0


if __name__ == "__main__":
    sys.exit(main())
