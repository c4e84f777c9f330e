"""Command-line interface.

Data goes to standard output or ``--out``; logs and diagnostics go to standard error.
Exit codes: 0 success, 2 unreadable input, 3 invalid input, 4 infeasible problem or a
violated validity condition, 5 solver non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import inputs as io_inputs
from .arch import HardwareSpec, WorkloadSpec
from .closed_form import CASE_CONSTRAINTS, CASES, TheoryInputs, attach_snapped, numerical_oracle, solve_auto, solve_case
from .errors import ConvergenceError, InfeasibleError, ParseError, ValidationError, ValidityError
from .loss import FitOptions, fit_scaling_law, loss_terms, predict_loss, records_from_csv, records_to_csv, synthetic_records
from .pareto import OBJECTIVES, SearchOptions, enumerate_frontier, search_pareto
from .regimes import METHODS, classify_regime, normalize_budgets, relative_slacks
from .roofline import (
    breakdown_to_csv,
    breakdown_to_json,
    decode_latency,
    decode_total_breakdown,
    memory_footprint,
    objective_latency,
    prefill_breakdown,
    prefill_latency,
)
from .space import SearchSpace
from .units import parse_quantity

log = logging.getLogger("hwcodesign")

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_VALIDATION = 3
EXIT_INFEASIBLE = 4
EXIT_CONVERGENCE = 5

SUBCOMMANDS = ("predict-loss", "predict-latency", "solve", "pareto", "fit", "synth")


@dataclass(frozen=True)
class CliConfig:
    """One parsed invocation: the subcommand plus its flags."""

    subcommand: str
    options: dict = field(default_factory=dict)
    seed: int = 0
    out: str | None = None
    fmt: str = "json"

    def __post_init__(self) -> None:
        if self.subcommand not in SUBCOMMANDS:
            raise ValidationError(f"unknown subcommand {self.subcommand!r}")


# Argument types. Raising ArgumentTypeError makes argparse exit with status 2.

def _quantity(kind: str):
    def convert(text: str) -> float:
        try:
            return parse_quantity(text, kind)
        except ParseError as exc:
            raise argparse.ArgumentTypeError(str(exc).removeprefix("<argument>: ")) from None
    convert.__name__ = kind
    return convert


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _non_negative_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _width(text: str):
    if text in ("grid", "continuous"):
        return text
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"width must be a number, 'grid' or 'continuous', got {text!r}") from None
    if not math.isfinite(value) or value <= 0:
        raise argparse.ArgumentTypeError(f"width must be > 0, got {text!r}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hwcodesign",
        description="Loss and roofline-latency co-design of transformer architectures and hardware budgets.",
        epilog="Quantities take decimal SI units: 10TOPS, 50GB/s, 4GB, 100ms (1 GB = 1e9 B).",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more log output on stderr")
    sub = parser.add_subparsers(dest="subcommand", required=True, metavar="SUBCOMMAND")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--format", choices=("json", "csv"), default="json", help="output format")
    common.add_argument("--out", help="write data here instead of standard output")
    common.add_argument("--threads", type=_positive_int, default=1, help="worker cap for parallel steps")
    common.add_argument("--seed", type=_non_negative_int, default=0, help="random seed")

    hardware = argparse.ArgumentParser(add_help=False)
    hardware.add_argument("--hardware", help="hardware JSON file or preset name")
    hardware.add_argument("--peak-flops", type=_quantity("flops"), help="peak compute, e.g. 10TOPS")
    hardware.add_argument("--bandwidth", type=_quantity("bandwidth"), help="memory bandwidth, e.g. 50GB/s")
    hardware.add_argument("--memory", type=_quantity("bytes"), help="memory budget, e.g. 4GB")
    hardware.add_argument("--precision", choices=("fp32", "fp16", "int8"),
                          help="byte widths for weights, activations and KV cache")

    workload = argparse.ArgumentParser(add_help=False)
    workload.add_argument("--workload", default="vla-workload", help="workload JSON file or preset name")
    workload.add_argument("--batch", type=_positive_int, help="override batch size")
    workload.add_argument("--seq-in", type=_non_negative_int, help="override input tokens")
    workload.add_argument("--seq-out", type=_non_negative_int, help="override output tokens")

    coeffs = argparse.ArgumentParser(add_help=False)
    coeffs.add_argument("--coeffs", default="paper-appendix-c", help="coefficient JSON file or preset name")

    p = sub.add_parser("predict-loss", parents=[common, coeffs], help="loss and per-term breakdown")
    p.add_argument("arch", help="architecture JSON file")

    p = sub.add_parser("predict-latency", parents=[common, hardware, workload],
                       help="roofline latency with a per-operator breakdown")
    p.add_argument("arch", help="architecture JSON file")
    p.add_argument("--objective", choices=OBJECTIVES, default="total")
    p.add_argument("--mode", choices=("closed-form", "full"), default="closed-form",
                   help="closed-form keeps the dominant terms; full sums every operator")

    p = sub.add_parser("solve", parents=[common, hardware, workload, coeffs],
                       help="optimal architecture under latency and memory budgets")
    p.add_argument("--case", default="auto", type=str.lower,
                   choices=["auto"] + [c.lower() for c in CASES])
    p.add_argument("--t-pre", type=_quantity("time"), help="prefill latency target, e.g. 50ms")
    p.add_argument("--t-dec", type=_quantity("time"), help="decode latency target, e.g. 100ms")
    p.add_argument("--t-total", type=_quantity("time"), help="end-to-end target, split between phases")
    p.add_argument("--split", type=float, help="prefill share of --t-total (default: reference-model ratio)")
    p.add_argument("--regime-method", choices=METHODS, default="active_set")
    p.add_argument("--low", type=float, default=0.5, help="ratio below which memory is binding")
    p.add_argument("--high", type=float, default=2.0, help="ratio above which latency is binding")
    p.add_argument("--width", type=_width, default=1024.0,
                   help="fixed model width, or 'grid' / 'continuous' to optimise it")
    p.add_argument("--rho-min", type=float, default=1.0 / 16, help="smallest expert activation rate")
    p.add_argument("--no-snap", action="store_true", help="skip snapping to the discrete search space")
    p.add_argument("--verify", action="store_true", help="compare with a numerical grid-search optimum")

    p = sub.add_parser("pareto", parents=[common, hardware, workload, coeffs],
                       help="loss-latency Pareto frontier over a discrete space")
    p.add_argument("--space", help="search-space JSON file (default: built-in grid)")
    p.add_argument("--objective", choices=OBJECTIVES, default="decode")
    p.add_argument("--precisions", choices=("fp16", "int8", "both"), default="both")
    p.add_argument("--enumerate", action="store_true", help="evaluate every configuration")
    p.add_argument("--initial", type=_positive_int, default=SearchOptions.initial,
                   help="Latin-hypercube seed points")
    p.add_argument("--max-rounds", type=_non_negative_int, default=SearchOptions.max_rounds)
    p.add_argument("--out-dir", help="write one file per precision into this directory")
    p.add_argument("--two-column", action="store_true", help="CSV with latency_s,loss only")

    p = sub.add_parser("fit", parents=[common], help="fit scaling-law coefficients to training runs")
    p.add_argument("runs", help="training-run CSV")
    p.add_argument("--holdout", type=float, default=0.2, help="validation fraction in [0, 1)")
    p.add_argument("--starts", type=_positive_int, default=16, help="optimizer initialisations")
    p.add_argument("--coeffs-out", help="write fitted coefficients JSON here")

    p = sub.add_parser("synth", parents=[common, coeffs],
                       help="synthetic training runs drawn from a coefficient set")
    p.add_argument("--n", type=_positive_int, default=170, help="number of runs")
    p.add_argument("--noise", type=float, default=0.01, help="Gaussian noise standard deviation")
    return parser


def parse_args(argv: list[str] | None = None) -> CliConfig:
    ns = build_parser().parse_args(argv)
    opts = {k: v for k, v in vars(ns).items() if k not in ("subcommand", "seed", "out", "format")}
    return CliConfig(ns.subcommand, opts, ns.seed, ns.out, ns.format)


# Input assembly

def _hardware(opts: dict, required: bool = True) -> HardwareSpec | None:
    flags = {"peak_flops": opts.get("peak_flops"), "bandwidth": opts.get("bandwidth"),
             "memory_budget": opts.get("memory")}
    if opts.get("hardware"):
        hw = io_inputs.load("hardware", opts["hardware"])
        changes = {k: v for k, v in flags.items() if v is not None}
        if changes:
            hw = HardwareSpec(**{**_hw_fields(hw), **changes})
    elif flags["peak_flops"] is not None and flags["bandwidth"] is not None:
        hw = HardwareSpec(**{k: v for k, v in flags.items() if v is not None})
    elif required:
        raise ValidationError("give --hardware, or both --peak-flops and --bandwidth")
    else:
        return None
    if opts.get("precision"):
        hw = hw.with_precision(opts["precision"])
    return hw


def _hw_fields(hw: HardwareSpec) -> dict:
    return {"peak_flops": hw.peak_flops, "bandwidth": hw.bandwidth, "memory_budget": hw.memory_budget,
            "b_w": hw.b_w, "b_a": hw.b_a, "b_kv": hw.b_kv}


def _workload(opts: dict) -> WorkloadSpec:
    wl = io_inputs.load("workload", opts["workload"])
    changes = {k: opts[f] for k, f in (("batch", "batch"), ("seq_in", "seq_in"), ("seq_out", "seq_out"))
               if opts.get(f) is not None}
    if changes:
        wl = WorkloadSpec(**{**wl.to_dict(), **changes})
    return wl


def _arch(path: str):
    return io_inputs.load("arch", path)


# Output

def _clean(value):
    """JSON-safe copy: non-finite floats become null."""
    if isinstance(value, float):
        return value if math.isfinite(value) else None
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return value


def to_json(data) -> str:
    return json.dumps(_clean(data), indent=2, allow_nan=False) + "\n"


def _flatten(data, prefix: str = "") -> list[tuple[str, object]]:
    rows = []
    if isinstance(data, dict):
        for k, v in data.items():
            rows.extend(_flatten(v, f"{prefix}.{k}" if prefix else str(k)))
    elif isinstance(data, (list, tuple)):
        for i, v in enumerate(data):
            rows.extend(_flatten(v, f"{prefix}.{i}"))
    else:
        rows.append((prefix, data))
    return rows


def to_key_value_csv(data) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("field", "value"))
    for key, value in _flatten(_clean(data)):
        writer.writerow((key, "" if value is None else (repr(value) if isinstance(value, float) else value)))
    return buf.getvalue()


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
        log.info("wrote %s", out)
    else:
        sys.stdout.write(text)


# Subcommands

def cmd_predict_loss(cfg: CliConfig) -> int:
    coeffs = io_inputs.load("coeffs", cfg.options["coeffs"])
    arch = _arch(cfg.options["arch"])
    terms = loss_terms(arch, coeffs)
    total = predict_loss(arch, coeffs)
    report = {"arch": arch.to_dict(), "coefficients": coeffs.source, "loss": total, "terms": terms}
    if cfg.fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("term", "value"))
        for name, value in terms.items():
            writer.writerow((name, repr(value)))
        writer.writerow(("total", repr(total)))
        _emit(buf.getvalue(), cfg.out)
    else:
        _emit(to_json(report), cfg.out)
    return EXIT_OK


def cmd_predict_latency(cfg: CliConfig) -> int:
    opts = cfg.options
    arch = _arch(opts["arch"])
    hw = _hardware(opts)
    wl = _workload(opts)
    objective, full = opts["objective"], opts["mode"] == "full"
    breakdowns, latency = [], {}
    if objective in ("prefill", "total") and wl.seq_in >= 1:
        breakdowns.append(prefill_breakdown(arch, wl, hw))
        latency["prefill"] = prefill_latency(arch, wl, hw, "full" if full else "dominant")
    if objective in ("decode", "total") and wl.seq_out >= 1:
        breakdowns.append(decode_total_breakdown(arch, wl, hw))
        latency["decode"] = decode_latency(arch, wl, hw, "full" if full else "closed_form")
    if cfg.fmt == "csv":
        _emit(breakdown_to_csv(breakdowns), cfg.out)
        return EXIT_OK
    report = breakdown_to_json(breakdowns, {
        "arch": arch.to_dict(),
        "hardware": hw.to_dict(),
        "workload": wl.to_dict(),
        "objective": objective,
        "mode": opts["mode"],
        "latency_s": latency,
        "objective_latency_s": objective_latency(arch, wl, hw, objective, full=full),
        "memory_bytes": memory_footprint(arch, hw),
    })
    _emit(to_json(report), cfg.out)
    return EXIT_OK


def cmd_solve(cfg: CliConfig) -> int:
    opts = cfg.options
    hw = _hardware(opts)
    wl = _workload(opts)
    coeffs = io_inputs.load("coeffs", opts["coeffs"])
    budgets = normalize_budgets(hw, wl, T_pre=opts.get("t_pre"), T_dec=opts.get("t_dec"),
                                T_total=opts.get("t_total"), split=opts.get("split"))
    width = opts["width"]
    theory = TheoryInputs(
        coeffs=coeffs, budgets=budgets, hardware=hw, workload=wl, rho_min=opts["rho_min"],
        width=None if isinstance(width, str) else float(width),
        width_mode=width if isinstance(width, str) else "grid",
    )
    case = opts["case"].upper()
    regime = None
    if case == "AUTO":
        label = classify_regime(budgets, opts["regime_method"], opts["low"], opts["high"], inputs=theory)
        regime = label.to_dict()
        sol = solve_auto(theory, opts["regime_method"], opts["low"], opts["high"])
    else:
        sol = solve_case(case, theory)
    if not opts["no_snap"]:
        sol = attach_snapped(sol, theory)
    report = sol.to_dict()
    report["budgets"] = budgets.to_dict()
    report["slacks"] = relative_slacks(sol.arch, budgets, wl, hw)
    report["regime_report"] = regime
    if opts["verify"]:
        constraints = CASE_CONSTRAINTS.get(sol.case)
        oracle_arch, oracle_loss = numerical_oracle(theory, constraints)
        gap = sol.loss - oracle_loss
        report["verify"] = {"oracle_loss": oracle_loss, "oracle_theta": oracle_arch.to_dict(),
                            "loss_gap": gap, "relative_gap": gap / oracle_loss}
        print(f"oracle loss gap: {gap:.6g} ({gap / oracle_loss:.3%} of the oracle loss)", file=sys.stderr)
    _emit(to_key_value_csv(report) if cfg.fmt == "csv" else to_json(report), cfg.out)
    return EXIT_OK


def cmd_pareto(cfg: CliConfig) -> int:
    opts = cfg.options
    hw = _hardware(opts)
    wl = _workload(opts)
    coeffs = io_inputs.load("coeffs", opts["coeffs"])
    space = io_inputs.load("space", opts["space"]) if opts.get("space") else SearchSpace()
    precisions = ("fp16", "int8") if opts["precisions"] == "both" else (opts["precisions"],)
    objective = opts["objective"]
    frontiers = []
    for precision in precisions:
        if opts["enumerate"]:
            front = enumerate_frontier(space, coeffs, hw, wl, objective, precision)
        else:
            options = SearchOptions(seed=cfg.seed, initial=opts["initial"], max_rounds=opts["max_rounds"],
                                    threads=opts["threads"])
            front = search_pareto(space, coeffs, hw, wl, objective, precision, options)
        log.info("%s/%s frontier: %d points from %d evaluations", objective, precision, len(front), front.evaluated)
        frontiers.append(front)

    def render(fronts) -> str:
        if cfg.fmt == "json":
            return to_json({"objective": objective, "seed": cfg.seed, "enumerate": opts["enumerate"],
                            "hardware": hw.to_dict(), "workload": wl.to_dict(), "space": space.to_dict(),
                            "frontiers": [f.to_dict() for f in fronts]})
        if opts["two_column"]:
            blocks = [f"# objective={f.objective} precision={f.precision}\n" + f.to_csv(two_column=True)
                      for f in fronts]
            return "\n\n".join(blocks)
        text = fronts[0].to_csv()
        for f in fronts[1:]:
            text += f.to_csv().split("\n", 1)[1]
        return text

    if opts.get("out_dir"):
        out_dir = Path(opts["out_dir"])
        out_dir.mkdir(parents=True, exist_ok=True)
        for f in frontiers:
            _emit(render([f]), str(out_dir / f"frontier-{f.objective}-{f.precision}.{cfg.fmt}"))
    else:
        _emit(render(frontiers), cfg.out)
    return EXIT_OK


def cmd_fit(cfg: CliConfig) -> int:
    opts = cfg.options
    path = opts["runs"]
    records = records_from_csv(io_inputs.read_text(path), path)
    options = FitOptions(seed=cfg.seed, holdout=opts["holdout"], n_starts=opts["starts"],
                         threads=opts["threads"])
    coeffs, report = fit_scaling_law(records, options)
    if opts.get("coeffs_out"):
        Path(opts["coeffs_out"]).write_text(to_json(coeffs.to_dict()), encoding="utf-8")
    data = {"coefficients": coeffs.to_dict(), "report": report.to_dict()}
    if report.r2_val is None:
        data["report"].pop("r2_val")
    log.info("fit: train R2 %.6f, validation R2 %s", report.r2_train, report.r2_val)
    _emit(to_key_value_csv(data) if cfg.fmt == "csv" else to_json(data), cfg.out)
    return EXIT_OK


def cmd_synth(cfg: CliConfig) -> int:
    opts = cfg.options
    coeffs = io_inputs.load("coeffs", opts["coeffs"])
    if not math.isfinite(opts["noise"]) or opts["noise"] < 0:
        raise ValidationError(f"noise must be >= 0, got {opts['noise']}")
    records = synthetic_records(coeffs, n=opts["n"], noise=opts["noise"], seed=cfg.seed)
    _emit(records_to_csv(records), cfg.out)
    return EXIT_OK


COMMANDS = {
    "predict-loss": cmd_predict_loss,
    "predict-latency": cmd_predict_latency,
    "solve": cmd_solve,
    "pareto": cmd_pareto,
    "fit": cmd_fit,
    "synth": cmd_synth,
}


def run(cfg: CliConfig) -> int:
    """Execute a parsed invocation, mapping package errors to exit codes."""
    try:
        return COMMANDS[cfg.subcommand](cfg)
    except ParseError as exc:
        log.error("parse error: %s", exc)
        return EXIT_PARSE
    except (ValidityError, InfeasibleError) as exc:
        log.error("%s", exc)
        return EXIT_INFEASIBLE
    except ConvergenceError as exc:
        log.error("did not converge: %s", exc)
        return EXIT_CONVERGENCE
    except ValidationError as exc:
        log.error("invalid input: %s", exc)
        return EXIT_VALIDATION
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION


def main(argv: list[str] | None = None) -> int:
    try:
        cfg = parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with status 2
        return int(exc.code or 0)
    level = logging.WARNING - 10 * cfg.options.get("verbose", 0)
    logging.basicConfig(level=max(level, logging.DEBUG), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
