"""``ecmatch`` command line: analyze, match, diagnose, simulate.

Settings come from flags, then a flat ``key=value`` config file
(``--config``), then built-in defaults. Exit codes: 0 success, 2 validation
error, 3 numerical failure, 4 infeasible matching.
"""

from __future__ import annotations

import argparse
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import DataError, Schema, load_dataset
from .diagnostics import DEFAULT_ETA, balance_report, write_report
from .estimators import EstimationError, new_design_estimates, write_estimates
from .matching import InfeasibleMatchError, MatchingError, content_hash, optimal_match, pairs_to_csv
from .propensity import FitError, fit_propensity
from .simulation import (
    DEFAULT_SUPERPOP_SEED, DEFAULT_SUPERPOP_SIZE, METHODS, Scenario, SelectionModel,
    default_methods, default_superpopulation, default_threads, run_monte_carlo,
)

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_INFEASIBLE = 0, 2, 3, 4

_COMMON = {
    "id_col": "id", "source_col": "source", "arm_col": "arm", "outcome_col": "outcome",
    "covariates": None, "scale": "logit", "caliper": None, "seed": 1, "eta": DEFAULT_ETA,
}
DEFAULTS = {
    "analyze": {**_COMMON, "w": "balanced", "se": "both", "B": 500},
    "match": {**_COMMON},
    "diagnose": {**_COMMON, "no_match": False},
    "simulate": {
        "setting": 1, "n_rct": 90, "reps": 2000, "seed": 1, "B": 500, "J": "1,2,3",
        "methods": None, "epsilon_var": 0.5, "superpop_seed": DEFAULT_SUPERPOP_SEED,
        "superpop_size": DEFAULT_SUPERPOP_SIZE, "threads": None,
    },
}
_TYPES = {
    "caliper": float, "seed": int, "eta": float, "B": int, "setting": int, "n_rct": int,
    "reps": int, "epsilon_var": float, "superpop_seed": int, "superpop_size": int, "threads": int,
}


class UsageError(ValueError):
    pass


def read_config(path: str | Path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _bool(text) -> bool:
    return text if isinstance(text, bool) else str(text).lower() in ("1", "true", "yes", "on")


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge flags over config-file keys over defaults."""
    config = read_config(args.config) if getattr(args, "config", None) else {}
    defaults = DEFAULTS[command]
    unknown = set(config) - set(defaults) - {"input"}
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    out = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        if flag is not None and flag is not False:
            value = flag
        elif key in config:
            value = config[key]
            if key in _TYPES:
                value = _TYPES[key](value)
            elif isinstance(default, bool):
                value = _bool(value)
        else:
            value = default
        out[key] = value
    return out


def _schema(cfg: dict) -> Schema:
    covs = cfg["covariates"]
    if isinstance(covs, str):
        covs = tuple(c.strip() for c in covs.split(",") if c.strip())
    return Schema(cfg["id_col"], cfg["source_col"], cfg["arm_col"], cfg["outcome_col"], covs)


def _header(command: str, cfg: dict, extra: dict | None = None) -> str:
    lines = [f"# ecmatch {__version__} {command}"]
    for key in sorted(cfg):
        lines.append(f"# {key}={'' if cfg[key] is None else cfg[key]}")
    for key, value in (extra or {}).items():
        lines.append(f"# {key}={value}")
    return "\n".join(lines) + "\n"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _report_text(report) -> str:
    buf = io.StringIO()
    write_report(report, buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_analyze(cfg: dict, out: Path) -> int:
    """Fit, optimally match the whole RCT, estimate every active arm."""
    ds = load_dataset(cfg["input"], _schema(cfg))
    if ds.k < 1:
        raise DataError("no active arm in the RCT")
    if cfg["se"] not in ("simple", "bootstrap", "both"):
        raise UsageError("--se must be simple, bootstrap or both")
    if cfg["se"] != "simple" and cfg["B"] < 100:
        raise UsageError("bootstrap needs B >= 100")
    if cfg["w"] == "balanced":
        w = {a: ds.n_a(0) / ds.n_a(a) for a in range(1, ds.k + 1)}
    else:
        value = float(cfg["w"])
        if not 0.0 < value < 1.0:
            raise UsageError("fixed w must lie in (0, 1)")
        w = {a: value for a in range(1, ds.k + 1)}
    model = fit_propensity(ds)
    match = optimal_match(ds, model, cfg["caliper"], cfg["scale"])
    rng = np.random.default_rng(cfg["seed"])
    estimates = new_design_estimates(ds, match, w, cfg["se"], cfg["B"], rng)
    buf = io.StringIO()
    write_estimates(estimates, buf, seed=cfg["seed"])
    header = _header("analyze", cfg, {"matched_set_sha256": content_hash(match)})
    _write(out / "estimates.csv", header + buf.getvalue())
    report = balance_report(ds, model, match, cfg["eta"])
    _write(out / "balance.csv", header + _report_text(report))
    sys.stdout.write(buf.getvalue())
    if not report.overlap_ok:
        print(f"warning: {report.overlap_violations} RCT subject(s) exceed Pr(RCT|X) > 1 - eta",
              file=sys.stderr)
    return EXIT_OK


def cmd_match(cfg: dict, out: Path) -> int:
    """Blinded matching: the arm column is never read."""
    ds = load_dataset(cfg["input"], _schema(cfg), blinded=True)
    model = fit_propensity(ds)
    match = optimal_match(ds, model, cfg["caliper"], cfg["scale"])
    digest = content_hash(match)
    header = _header("match", cfg, {"total_distance": repr(match.total_distance),
                                       "matched_set_sha256": digest})
    _write(out / "matched_pairs.csv", header + pairs_to_csv(match))
    _write(out / "propensity_model.txt", model.to_text())
    print(digest)
    return EXIT_OK


def cmd_diagnose(cfg: dict, out: Path) -> int:
    ds = load_dataset(cfg["input"], _schema(cfg), blinded=True)
    model = fit_propensity(ds)
    match = None if cfg["no_match"] else optimal_match(ds, model, cfg["caliper"], cfg["scale"])
    report = balance_report(ds, model, match, cfg["eta"])
    text = _report_text(report)
    _write(out / "balance.csv", _header("diagnose", cfg) + text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_simulate(cfg: dict, out: Path) -> int:
    scenario = Scenario(cfg["setting"], cfg["n_rct"], epsilon_var=cfg["epsilon_var"])
    methods = cfg["methods"]
    if isinstance(methods, str):
        methods = tuple(m.strip() for m in methods.split(",") if m.strip())
    methods = methods or default_methods(scenario)
    if "nc" in methods and scenario.k != 1:
        raise UsageError("NC matching requires a two-arm setting (1 or 2)")
    if "new_bootstrap" in methods and cfg["B"] < 100:
        raise UsageError("bootstrap needs B >= 100")
    Js = tuple(int(j) for j in str(cfg["J"]).split(","))
    threads = cfg["threads"] or default_threads()
    superpop = default_superpopulation(cfg["superpop_seed"], cfg["superpop_size"])
    selection = SelectionModel.calibrated(superpop)

    def progress(done):
        print(f"\r{done}/{cfg['reps']} replications", end="", file=sys.stderr, flush=True)

    report = run_monte_carlo(
        scenario, methods, cfg["reps"], cfg["seed"], cfg["B"], Js, superpop, selection,
        threads=threads, progress=progress,
    )
    print(file=sys.stderr)
    # thread count does not affect results, so it stays out of the audit header
    public = {k: v for k, v in cfg.items() if k != "threads"}
    public["methods"] = ",".join(methods)
    header = _header("simulate", public)
    _write(out / "simulation.csv", header + report.to_csv())
    _write(out / "simulation.txt", header + report.to_table())
    sys.stdout.write(report.to_table())
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("input", nargs="?", help="comma-separated subject file")
    p.add_argument("--id-col", dest="id_col")
    p.add_argument("--source-col", dest="source_col")
    p.add_argument("--arm-col", dest="arm_col", help="read by analyze; excluded from covariates elsewhere")
    p.add_argument("--outcome-col", dest="outcome_col")
    p.add_argument("--covariates", help="comma-separated covariate columns (default: all remaining)")
    p.add_argument("--scale", choices=("logit", "probability"), help="matching score scale")
    p.add_argument("--caliper", type=float)
    p.add_argument("--eta", type=float, help="overlap bound")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecmatch", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"ecmatch {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="match the whole RCT and estimate every active arm")
    _data_flags(p)
    p.add_argument("--w", help="'balanced' (n_0/n_a) or a fixed value in (0, 1)")
    p.add_argument("--se", choices=("simple", "bootstrap", "both"))
    p.add_argument("--B", type=int, dest="B", help="bootstrap resamples")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("match", help="blinded optimal matching; prints the matched-set hash")
    _data_flags(p)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("diagnose", help="balance and overlap report (blinded)")
    _data_flags(p)
    p.add_argument("--no-match", action="store_true", dest="no_match")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("simulate", help="Monte Carlo operating characteristics")
    p.add_argument("--setting", type=int, choices=(1, 2, 3))
    p.add_argument("--n-rct", type=int, dest="n_rct")
    p.add_argument("--reps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--B", type=int, dest="B")
    p.add_argument("--J", help="comma-separated NC repetition counts")
    p.add_argument("--methods", help=f"comma-separated subset of {','.join(METHODS)}")
    p.add_argument("--epsilon-var", type=float, dest="epsilon_var")
    p.add_argument("--superpop-seed", type=int, dest="superpop_seed")
    p.add_argument("--superpop-size", type=int, dest="superpop_size")
    p.add_argument("--threads", type=int, help="worker processes (env ECMATCH_THREADS)")

    for sp in sub.choices.values():
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--out", default=".", help="output directory")
    return parser


_COMMANDS = {"analyze": cmd_analyze, "match": cmd_match, "diagnose": cmd_diagnose,
             "simulate": cmd_simulate}


def _fail(exc: Exception, code: int) -> int:
    record = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if isinstance(exc, InfeasibleMatchError):
        record["unmatchable"] = exc.unmatchable
    print(json.dumps(record), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args.command, args)
        if args.command != "simulate":
            config = read_config(args.config) if args.config else {}
            cfg["input"] = args.input or config.get("input")
            if not cfg["input"]:
                raise UsageError("an input file is required")
        return _COMMANDS[args.command](cfg, Path(args.out))
    except InfeasibleMatchError as exc:
        return _fail(exc, EXIT_INFEASIBLE)
    except FitError as exc:
        return _fail(exc, EXIT_NUMERICAL)
    except MatchingError as exc:
        return _fail(exc, EXIT_INFEASIBLE)
    except (DataError, UsageError, EstimationError, ValueError, OSError) as exc:
        return _fail(exc, EXIT_VALIDATION)


if __name__ == "__main__":
    sys.exit(main())
