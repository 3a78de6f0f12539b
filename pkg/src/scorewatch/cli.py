"""Command-line interface: ``scorewatch test | simulate | benchmark``.

Exit codes: 0 when no change is detected (or a run completes), 2 when the
auto-test rejects, 1 on any error, including usage errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .detect import METHODS, TestConfig, auto_test
from .errors import ConfigError, ScorewatchError
from .harness import (ScenarioConfig, config_hash, power_curve, runtime_benchmark,
                      write_timing_csv)
from .models.io import load_data, load_model_spec

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

EXIT_OK, EXIT_ERROR, EXIT_REJECT = 0, 1, 2


class UsageError(ScorewatchError):
    pass


class _Parser(argparse.ArgumentParser):
    # exit code 2 is reserved for "change detected"
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class RunManifest:
    """Provenance of one CLI run; ``config_hash`` also appears in every output file."""

    command: str
    config_hash: str
    seed: int
    versions: dict
    inputs: list
    outputs: list = field(default_factory=list)
    wall_clock: float = 0.0

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        self.outputs = sorted(set(self.outputs) | {str(path)})
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True), encoding="utf-8")
        return path


def _versions() -> dict:
    return {"scorewatch": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# flag parsing


def parse_split(text: str) -> tuple[float, float]:
    """``"a:b"`` into the fractions ``(a / (a + b), b / (a + b))``."""
    try:
        a, b = (float(x) for x in text.split(":"))
    except ValueError:
        raise UsageError(f"--alpha-split expects two numbers like 1:1, got {text!r}") from None
    if a < 0 or b < 0 or a + b <= 0:
        raise UsageError(f"--alpha-split parts must be nonnegative and not both zero, got {text!r}")
    return a / (a + b), b / (a + b)


def parse_tau_range(text: str) -> tuple:
    """``"0.1:0.9"`` (fractions of n) or ``"50:450"`` (indices)."""
    parts = text.split(":")
    if len(parts) != 2:
        raise UsageError(f"--tau-range expects lo:hi, got {text!r}")
    if all(p.strip().lstrip("-").isdigit() for p in parts):
        return int(parts[0]), int(parts[1])
    try:
        return float(parts[0]), float(parts[1])
    except ValueError:
        raise UsageError(f"--tau-range expects numbers, got {text!r}") from None


def parse_int_list(text: str, flag: str) -> list[int]:
    items = [x for x in text.replace(" ", "").split(",") if x]
    if not items:
        raise UsageError(f"{flag} must list at least one integer")
    try:
        return [int(x) for x in items]
    except ValueError:
        raise UsageError(f"{flag} expects comma-separated integers, got {text!r}") from None


def load_scenario(path_or_name: str) -> tuple[dict, str]:
    """Parse a JSON or TOML scenario file, or a bundled scenario by name."""
    path = Path(path_or_name)
    if not path.exists():
        bundled = resources.files("scorewatch") / "scenarios" / f"{path_or_name}.toml"
        if not bundled.is_file():
            names = sorted(p.name[:-5] for p in (resources.files("scorewatch") / "scenarios").iterdir()
                           if p.name.endswith(".toml"))
            raise ConfigError(f"no scenario file {path_or_name!r}; bundled scenarios: {', '.join(names)}")
        text = bundled.read_text(encoding="utf-8")
        return tomllib.loads(text), f"bundled:{path_or_name}"
    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix.lower() == ".json":
            return json.loads(text), str(path)
        return tomllib.loads(text), str(path)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse scenario {path}: {exc}") from None


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(args, payload: dict, lines: list[str]):
    if args.json:
        print(json.dumps(payload, sort_keys=True, allow_nan=False))
    else:
        for line in lines:
            print(line)


# ---------------------------------------------------------------------------
# commands


def cmd_test(args) -> int:
    start = time.perf_counter()
    program, prefix = load_model_spec(args.model)
    data = load_data(args.data, prefix=prefix)
    frac_l, frac_s = parse_split(args.alpha_split)
    restrict = None if args.restrict is None else tuple(parse_int_list(args.restrict, "--restrict"))
    config = TestConfig(
        alpha=args.alpha, alpha_l=args.alpha * frac_l, alpha_s=args.alpha - args.alpha * frac_l,
        max_card=args.max_card, tau_range=parse_tau_range(args.tau_range), method=args.method,
        restrict=restrict, ridge=args.ridge, cond_max=args.cond_max,
        accept_unconverged=args.accept_unconverged, bootstrap=args.bootstrap, seed=args.seed)
    chash = config_hash({"command": "test", "config": config.to_json(),
                         "model": _file_digest(args.model), "data": _file_digest(args.data)})
    report = auto_test(program, data, config)
    out = _out_dir(args.out)
    report_path, trace_path = out / "report.json", out / "trace.csv"
    payload = report.to_json()
    active = [t for t, a in (("lin", config.levels()[0]), ("scan", config.levels()[1])) if a > 0]
    payload.update(config_hash=chash, active_tests=active)
    report_path.write_text(json.dumps(payload, indent=2, sort_keys=True, allow_nan=False),
                           encoding="utf-8")
    report.write_trace_csv(trace_path, chash)
    manifest = RunManifest("test", chash, args.seed, _versions(), [str(args.data), str(args.model)],
                           [str(report_path), str(trace_path)], time.perf_counter() - start)
    manifest.write(out)
    summary = {"psi_lin": report.psi_lin, "psi_scan": report.psi_scan,
               "psi_auto": report.psi_auto, "r_lin": payload["r_lin"], "r_scan": payload["r_scan"],
               "tau_hat_lin": report.tau_hat_lin, "tau_hat_scan": report.tau_hat_scan,
               "subset_hat": list(report.subset_hat), "active_tests": active,
               "report": str(report_path), "config_hash": chash}
    lines = [f"linear  R_lin={report.r_lin:.4g}  H_lin={report.thresholds.h_lin:.4g}  "
             f"tau={report.tau_hat_lin}  reject={report.psi_lin}",
             f"scan    R_scan={report.r_scan:.4g} (reject if > 1)  tau={report.tau_hat_scan}  "
             f"subset={list(report.subset_hat)}  reject={report.psi_scan}",
             f"auto    reject={report.psi_auto}",
             f"report written to {report_path}"]
    if report.fit_failed:
        lines.insert(0, "warning: the MLE did not converge; statistics use the best iterate")
    _emit(args, summary, lines)
    return EXIT_REJECT if report.psi_auto else EXIT_OK


def cmd_simulate(args) -> int:
    start = time.perf_counter()
    raw, source = load_scenario(args.scenario)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.reps is not None:
        raw["reps"] = args.reps
    scenario = ScenarioConfig.from_dict(raw)
    chash = scenario.config_hash()
    jobs = args.jobs or os.cpu_count() or 1
    curve = power_curve(scenario, jobs=jobs)
    out = _out_dir(args.out)
    csv_path, json_path = out / "power_curve.csv", out / "power_curve.json"
    curve.write_csv(csv_path)
    curve.write_json(json_path, include_records=args.records)
    manifest = RunManifest("simulate", chash, scenario.seed, _versions(), [source],
                           [str(csv_path), str(json_path)], time.perf_counter() - start)
    manifest.write(out)
    payload = curve.to_json()
    payload["outputs"] = [str(csv_path), str(json_path)]
    lines = [f"scenario {scenario.name}  reps={scenario.reps}  config_hash={chash}",
             "delta      lin    scan   auto   n_ok"]
    for j, delta in enumerate(curve.deltas):
        lines.append(f"{delta:<9.4g} {curve.freq['lin'][j]:.3f}  {curve.freq['scan'][j]:.3f}  "
                     f"{curve.freq['auto'][j]:.3f}  {curve.n_ok[j]}")
    if curve.partial:
        lines.append("warning: more than 5% of replicates failed at some delta (curve is partial)")
    lines.append(f"curve written to {csv_path}")
    _emit(args, payload, lines)
    return EXIT_OK


def cmd_benchmark(args) -> int:
    start = time.perf_counter()
    n_grid = parse_int_list(args.n_grid, "--n-grid")
    d_grid = parse_int_list(args.d_grid, "--d-grid")
    chash = config_hash({"command": "benchmark", "model": args.model, "n_grid": n_grid,
                         "d_grid": d_grid, "reps": args.reps, "seed": args.seed})
    rows = runtime_benchmark(args.model, n_grid, d_grid, reps=args.reps, seed=args.seed)
    out = _out_dir(args.out)
    csv_path = out / "timing.csv"
    write_timing_csv(rows, csv_path, chash)
    manifest = RunManifest("benchmark", chash, args.seed, _versions(), [], [str(csv_path)],
                           time.perf_counter() - start)
    manifest.write(out)
    payload = {"rows": [{k: (v if not isinstance(v, float) or np.isfinite(v) else None)
                         for k, v in asdict(r).items()} for r in rows],
               "config_hash": chash, "output": str(csv_path)}
    lines = ["model   n      size  dim    direct (s)           cg (s)               cg iters"]
    for r in rows:
        lines.append(f"{r.model:<7} {r.n:<6} {r.size:<5} {r.dim:<6} "
                     f"{r.direct_mean:.4f} +- {r.direct_stderr:.4f}   "
                     f"{r.cg_mean:.4f} +- {r.cg_stderr:.4f}   {r.cg_iterations:.1f}"
                     + (f"  ({r.cg_failures} CG runs stopped early)" if r.cg_failures else ""))
    lines.append(f"timings written to {csv_path}")
    _emit(args, payload, lines)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scorewatch",
                     description="Score-based changepoint tests for differentiable likelihood models.")
    parser.add_argument("--version", action="version", version=f"scorewatch {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    common = _Parser(add_help=False)
    common.add_argument("--out", default=".", help="output directory (created if missing)")
    common.add_argument("--json", action="store_true", help="print a JSON summary on stdout")

    t = sub.add_parser("test", parents=[common], help="run the auto-test on one data set")
    t.add_argument("data", help="observations (CSV with header, response first; or JSON)")
    t.add_argument("model", help="model spec JSON (kind, dim, params, known_prefix)")
    t.add_argument("--alpha", type=float, default=0.05)
    t.add_argument("--alpha-split", default="1:1", help="linear:scan share of alpha (1:0 = linear only)")
    t.add_argument("--max-card", type=int, default=None, help="largest scanned subset (default floor(sqrt(d)))")
    t.add_argument("--method", choices=METHODS, default="cg")
    t.add_argument("--tau-range", default="0.1:0.9", help="fractions of n, or integer indices lo:hi")
    t.add_argument("--restrict", default=None, help="comma-separated component indices to monitor")
    t.add_argument("--bootstrap", type=int, default=0, metavar="B",
                   help="calibrate by a parametric bootstrap with B replicates")
    t.add_argument("--ridge", type=float, default=0.0, help="explicit ridge added to every information block")
    t.add_argument("--cond-max", type=float, default=1e12, help="skip taus above this condition number")
    t.add_argument("--accept-unconverged", action="store_true",
                   help="use the best iterate when the MLE fit does not converge")
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_test)

    s = sub.add_parser("simulate", parents=[common], help="power curve of a scenario")
    s.add_argument("scenario", help="scenario TOML/JSON file or bundled name (e.g. linear_p1)")
    s.add_argument("--jobs", type=int, default=None, help="worker processes (default: logical cores)")
    s.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    s.add_argument("--reps", type=int, default=None, help="override the replicate count")
    s.add_argument("--records", action="store_true", help="include per-replicate records in the JSON")
    s.set_defaults(func=cmd_simulate)

    b = sub.add_parser("benchmark", parents=[common], help="dense versus CG solve timings")
    b.add_argument("--model", choices=("linear", "mlp"), default="linear")
    b.add_argument("--n-grid", default="500,1000")
    b.add_argument("--d-grid", default="50,100", help="dimensions (linear) or input widths r (mlp)")
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        return args.func(args)
    except ScorewatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
