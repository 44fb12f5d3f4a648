"""Command-line driver: ``solve``, ``compare``, ``constants`` and ``list-benchmarks``.

Run configurations are flat ``key = value`` files, for example::

    benchmark = P-NL
    N = 100
    M = 5000
    iters = 5
    seed = 42

Exit codes: 0 success, 1 configuration or usage error, 2 rate violation
(result files are still written).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .benchmarks import case_noise, catalog, get_case, oracle_solution
from .constants import evaluate_constants
from .core import DerivativeBounds
from .errors import FbsdeError, InvalidArgumentError
from .linear_bsde import FEATURE_MAPS, RegressionConfig
from .newton import DEFAULT_EPS, DEFAULT_ITERS, RATE_SLACK, initial_iterate, run_newton, run_picard
from .record import CSV_COLUMNS, ConvergenceRecord

EXIT_OK, EXIT_CONFIG, EXIT_RATE = 0, 1, 2
COMPARE_COLUMNS = ("iter", "newton_err", "picard_err", "newton_ratio", "picard_ratio")
_SECTION = "run"
_LOG_THRESHOLD = 1e300


class ConfigError(InvalidArgumentError):
    """The run configuration is missing, unreadable or invalid."""


@dataclass(frozen=True)
class RunConfig:
    benchmark: str
    N: int
    M: int
    iters: int
    seed: int
    eps: float
    degree: int
    ridge: float
    workers: int
    features: str

    def as_dict(self) -> dict:
        return dict(self.__dict__)


_INT_KEYS = ("N", "M", "iters", "seed", "degree", "workers")
_FLOAT_KEYS = ("eps", "ridge")
_KEYS = ("benchmark",) + _INT_KEYS + _FLOAT_KEYS + ("features",)


def load_config(path) -> RunConfig:
    """Parse and validate a flat ``key = value`` run configuration."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys N and M are case-sensitive
    try:
        parser.read_string(f"[{_SECTION}]\n{text}")
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    raw = dict(parser[_SECTION])
    unknown = sorted(set(raw) - set(_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}; allowed: {list(_KEYS)}")
    if "benchmark" not in raw:
        raise ConfigError("config must name a benchmark")
    try:
        case = get_case(raw["benchmark"].strip())
    except InvalidArgumentError as exc:
        raise ConfigError(str(exc)) from exc

    values = {
        "benchmark": case.id, "N": case.steps, "M": case.paths, "iters": DEFAULT_ITERS,
        "seed": 0, "eps": DEFAULT_EPS, "degree": case.regression.degree,
        "ridge": case.regression.ridge, "workers": 1, "features": case.regression.features,
    }
    for key in _INT_KEYS:
        if key in raw:
            try:
                values[key] = int(raw[key])
            except ValueError as exc:
                raise ConfigError(f"{key} must be an integer, got {raw[key]!r}") from exc
    for key in _FLOAT_KEYS:
        if key in raw:
            try:
                values[key] = float(raw[key])
            except ValueError as exc:
                raise ConfigError(f"{key} must be a number, got {raw[key]!r}") from exc
    if "features" in raw:
        values["features"] = raw["features"].strip()

    cfg = RunConfig(**values)
    if not 0.0 < cfg.eps < 1.0:
        raise ConfigError(f"eps must lie in (0, 1), got {cfg.eps}")
    if cfg.N < 1 or cfg.M < 1 or cfg.iters < 0 or cfg.workers < 1 or cfg.seed < 0:
        raise ConfigError("N, M and workers must be positive; iters and seed nonnegative")
    if cfg.features not in FEATURE_MAPS:
        raise ConfigError(f"features must be one of {FEATURE_MAPS}")
    if cfg.degree < 0 or not (math.isfinite(cfg.ridge) and cfg.ridge >= 0):
        raise ConfigError("degree and ridge must be nonnegative")
    return cfg


# ---------------------------------------------------------------------------
# serialisation


def _num(v) -> str:
    return format(float(v), ".17g")


def _json_safe(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def _write_csv(path: Path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([str(row[0])] + [_num(v) for v in row[1:]])


def _write_json(path: Path, payload: dict):
    text = json.dumps(_json_safe(payload), indent=2, sort_keys=True, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8", newline="\n")


def write_record(record: ConvergenceRecord, out_dir: Path, cfg: RunConfig, constants) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(out_dir / "record.csv", CSV_COLUMNS, record.rows())
    _write_json(out_dir / "record.json", {
        "config": cfg.as_dict(),
        "floor": record.floor,
        "constants": constants.as_dict(),
        "record": record.to_dict(),
        "long_format": record.long_format(),
    })


# ---------------------------------------------------------------------------
# commands


def _prepare(cfg: RunConfig):
    case = get_case(cfg.benchmark)
    grid = case.problem.grid(cfg.N)
    noise = case_noise(case, cfg.seed, cfg.N, cfg.M, workers=cfg.workers)
    oracle = oracle_solution(case, grid, noise, workers=cfg.workers)
    reg = RegressionConfig(degree=cfg.degree, features=cfg.features, ridge=cfg.ridge)
    u0 = initial_iterate(case.problem, grid, noise, cfg.workers)
    return case, grid, noise, oracle, reg, u0


def cmd_solve(config_path, out_dir) -> int:
    cfg = load_config(config_path)
    case, grid, noise, oracle, reg, u0 = _prepare(cfg)
    record = run_newton(case.problem, u0, cfg.iters, grid, noise, reg, oracle, eps=cfg.eps,
                        strict=False, workers=cfg.workers)
    write_record(record, Path(out_dir), cfg,
                 evaluate_constants(case.problem.bounds, case.problem.horizon, cfg.eps))
    violation = record.first_violation(cfg.eps, RATE_SLACK)
    if violation:
        print(f"rate violation: {violation}", file=sys.stderr)
        return EXIT_RATE
    print(f"wrote {Path(out_dir) / 'record.csv'} ({len(record)} rows, floor {record.floor:.6g})")
    return EXIT_OK


def cmd_compare(config_path, out_dir) -> int:
    cfg = load_config(config_path)
    case, grid, noise, oracle, reg, u0 = _prepare(cfg)
    newton = run_newton(case.problem, u0, cfg.iters, grid, noise, reg, oracle, eps=cfg.eps,
                        strict=False, workers=cfg.workers)
    picard = run_picard(case.problem, u0, cfg.iters, grid, noise, reg, oracle, eps=cfg.eps,
                        workers=cfg.workers)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rn, rp = newton.ratio, picard.ratio
    rows = [(n, newton.combined[n], picard.combined[n], rn[n], rp[n])
            for n in range(min(len(newton), len(picard)))]
    _write_csv(out / "compare.csv", COMPARE_COLUMNS, rows)
    _write_json(out / "compare.json", {
        "config": cfg.as_dict(), "newton": newton.to_dict(), "picard": picard.to_dict(),
    })
    violation = newton.first_violation(cfg.eps, RATE_SLACK)
    if violation:
        print(f"rate violation: {violation}", file=sys.stderr)
        return EXIT_RATE
    print(f"wrote {out / 'compare.csv'} ({len(rows)} rows)")
    return EXIT_OK


def format_constants(report) -> str:
    lines = [f"c_bsigma={_num(report.c_bsigma)}", f"C0={_num(report.C0)}",
             f"alpha={_num(report.alpha)}"]
    for name in ("C1", "C3"):
        value = getattr(report, name)
        if value > _LOG_THRESHOLD or math.isinf(value):
            lines.append(f"log_{name}={_num(getattr(report, 'log_' + name))}")
        else:
            lines.append(f"{name}={_num(value)}")
    lines.append(f"C0_proof={_num(report.C0_proof)}")
    return "\n".join(lines)


def cmd_constants(b: float, sigma: float, f: float, phi: float, T: float, eps: float) -> int:
    report = evaluate_constants(DerivativeBounds(b, sigma, f, phi), T, eps)
    print(format_constants(report))
    return EXIT_OK


def cmd_list_benchmarks() -> int:
    for case in catalog():
        print(f"{case.id}\t{case.oracle}\tN={case.steps}\tM={case.paths}\t{case.description}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fbsde-newton", description="Newton iteration for decoupled FBSDEs")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_text in (("solve", "run Newton on a configured benchmark"),
                            ("compare", "run Newton and Picard on shared noise")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="flat key = value run configuration")
        p.add_argument("--out", default=".", help="output directory (default: current)")
    p = sub.add_parser("constants", help="evaluate the convergence constants")
    for flag in ("b", "sigma", "f", "phi"):
        p.add_argument(f"--{flag}", type=float, default=0.0, help=f"sup-norm of {flag}'")
    p.add_argument("--T", type=float, default=1.0, help="horizon")
    p.add_argument("--eps", type=float, default=DEFAULT_EPS, help="contraction parameter in (0, 1)")
    sub.add_parser("list-benchmarks", help="list the built-in benchmark ids")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "solve":
            return cmd_solve(args.config, args.out)
        if args.command == "compare":
            return cmd_compare(args.config, args.out)
        if args.command == "constants":
            return cmd_constants(args.b, args.sigma, args.f, args.phi, args.T, args.eps)
        return cmd_list_benchmarks()
    except FbsdeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
