"""Command-line front end.

Every subcommand accepts ``--config FILE`` (flat ``key = value`` lines,
``#`` comments) plus flags that override it, and the shared flags
``--seed``, ``--reps``, ``--out`` and ``--format``.

Exit codes: 0 success, 2 invalid input or configuration, 3 solver
failure, 4 failed duality check.
"""

from __future__ import annotations

import argparse
import io
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np
import pandas as pd

from . import datasets
from .asymptotics import (
    AsymptoticSpec,
    drive_minus_tsls_statistic,
    ks_critical_value,
    ks_distance,
    sample_drive_asymptotic,
    sample_tsls_asymptotic,
)
from .core import project_onto_instruments
from .drive import DriveSpec, fit_drive, drive_shrinkage_path
from .estimators import (
    DEFAULT_ANCHOR_KAPPA,
    DEFAULT_RIDGE_GRID,
    KClassSpec,
    RidgeSpec,
    cv_tsls_ridge_rho,
    fit_kclass,
    fit_ols,
    fit_sqrt_ridge_ols,
    fit_tsls,
    fit_tsls_ridge,
)
from .exceptions import (
    DegenerateGamma,
    DualBracketFailure,
    SolverDidNotConverge,
    ValidationError,
)
from .rho_selection import (
    BootstrapScoreQuantile,
    BootstrapSettings,
    parse_rho_rule,
    resolve_rho,
)
from .simulation import (
    ESTIMATORS,
    TABLE_GRID,
    DgpSpec,
    ExperimentSettings,
    ShiftEvalSpec,
    generate_dgp,
    generate_shift_environments,
    parse_ranks,
    run_mse_experiment,
    run_shift_eval,
)
from .wasserstein import DualityInstance, check_duality_instance, duality_check_suite

EXIT_OK, EXIT_INVALID, EXIT_SOLVER, EXIT_DUALITY = 0, 2, 3, 4
DUALITY_TOL = 1e-6


class ConfigError(ValidationError):
    """Malformed configuration file or option value."""


# --------------------------------------------------------------------------
# option handling


@dataclass(frozen=True)
class Opt:
    name: str
    convert: Callable[[str], Any]
    default: Any
    help: str
    flag: bool = False


def _floats(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(t) for t in text]
    return [float(t) for t in str(text).split(",") if t.strip()]


def _names(text) -> list[str]:
    if isinstance(text, (list, tuple)):
        return list(text)
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _matrix(text) -> np.ndarray:
    rows = [r for r in str(text).split(";") if r.strip()]
    return np.array([_floats(r) for r in rows], dtype=float)


def _grid(text) -> list[tuple[float, float]]:
    if isinstance(text, (list, tuple)):
        return list(text)
    cells = []
    for cell in str(text).split(","):
        eta, buz = cell.split(":")
        cells.append((float(eta), float(buz)))
    return cells


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    val = str(text).strip().lower()
    if val in ("1", "true", "yes", "on"):
        return True
    if val in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


COMMON = [
    Opt("seed", int, 0, "master random seed"),
    Opt("reps", int, None, "replications / draws / resamples (command specific)"),
    Opt("out", str, None, "output file (default: stdout only)"),
    Opt("format", str, "csv", "output format: csv or json"),
]

COMMANDS: dict[str, list[Opt]] = {
    "estimate": [
        Opt("data", str, None, "input CSV (default: bundled demo data)"),
        Opt("outcome", str, "y", "outcome column"),
        Opt("endogenous", _names, ["x"], "comma separated endogenous columns"),
        Opt("instruments", _names, ["z"], "comma separated instrument columns"),
        Opt("estimator", _names, ["tsls"],
            "comma separated: ols,tsls,kclass,tsls_ridge,sqrt_ridge_ols,drive or all"),
        Opt("rho_rule", str, "bootstrap",
            "DRIVE penalty: bootstrap, eigenvalue:<c> or fixed:<rho>"),
        Opt("kappa", float, DEFAULT_ANCHOR_KAPPA, "k-class parameter"),
        Opt("ridge_rho", str, "cv", "ridge-TSLS penalty or 'cv'"),
        Opt("sqrt_rho", float, 0.0, "square-root ridge OLS penalty"),
        Opt("q_order", float, 2.0, "DRIVE transport order in (1, 2]"),
        Opt("intercept", _bool, False, "add a constant regressor and instrument", flag=True),
        Opt("rho_path", _floats, None, "comma separated rho grid for a DRIVE shrinkage path"),
    ],
    "simulate": [
        Opt("grid", _grid, list(TABLE_GRID), "cells as eta:beta_uz,eta:beta_uz,..."),
        Opt("beta0", float, 1.0, "structural coefficient"),
        Opt("gamma", float, 1.0, "first-stage coefficient"),
        Opt("sigma", float, 0.5, "noise scale"),
        Opt("n", int, 2000, "sample size"),
        Opt("estimators", _names, list(ESTIMATORS), "comma separated estimators"),
        Opt("rho_rule", str, "bootstrap", "DRIVE penalty rule"),
        Opt("anchor_kappa", float, DEFAULT_ANCHOR_KAPPA, "k-class parameter of the anchor column"),
        Opt("tidy_out", str, None, "also write the tidy per-cell table here"),
    ],
    "duality-check": [
        Opt("instances", int, None, "number of random instances (default 100)"),
        Opt("perturb", _bool, False, "inflate the dual value (negative control)", flag=True),
        Opt("failure_out", str, "duality_failure.json", "where to write a failing instance"),
        Opt("replay", str, None, "re-run one instance from a JSON file"),
    ],
    "asymptotics": [
        Opt("beta0", _floats, [1.0], "comma separated beta0"),
        Opt("gamma", _matrix, None, "first-stage matrix, rows separated by ';' (default identity)"),
        Opt("sigma_z", _matrix, None, "instrument covariance, rows separated by ';' (default identity)"),
        Opt("sigma2", float, 1.0, "structural error variance"),
        Opt("rho", float, None, "penalty level"),
        Opt("rho_fraction", float, None, "penalty as a fraction of the smallest first-stage eigenvalue"),
        Opt("level", float, 0.01, "KS test level"),
        Opt("samples_out", str, None, "also write the draws (tidy CSV)"),
    ],
    "shift-eval": [
        Opt("data", str, None, "input CSV (required)"),
        Opt("group", str, "group", "group column"),
        Opt("split_variable", str, None, "column whose group means rank the groups"),
        Opt("train_ranks", str, None, "e.g. 1-3, 1,2,3 or bottom:3"),
        Opt("test_ranks", str, None, "e.g. 4-6 or top:3"),
        Opt("outcome", str, "y", "outcome column"),
        Opt("endogenous", _names, ["x"], "comma separated endogenous columns"),
        Opt("instruments", _names, ["z"], "comma separated instrument columns"),
        Opt("estimators", _names, list(ESTIMATORS), "comma separated estimators"),
        Opt("rho_rule", str, "bootstrap", "DRIVE penalty rule"),
        Opt("intercept", _bool, False, "add a constant regressor and instrument", flag=True),
    ],
    "generate": [
        Opt("kind", str, "demo", "demo, dgp or shift"),
        Opt("n", int, 100, "rows (dgp) or rows per group (shift)"),
        Opt("eta", float, 0.0, "dgp: direct effect"),
        Opt("beta_uz", float, 0.0, "dgp: confounder loading of Z"),
        Opt("gamma", float, 1.0, "dgp: first-stage coefficient"),
        Opt("sigma", float, 0.5, "dgp: noise scale"),
        Opt("groups", int, 6, "shift: number of groups"),
    ],
}


def read_config(path) -> dict[str, str]:
    """Parse a flat ``key = value`` file. Keys are normalized to snake case."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, val = line.split("=", 1)
        out[key.strip().replace("-", "_")] = val.strip()
    return out


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="drive-iv", description="Distributionally robust IV estimation tools.")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, opts in COMMANDS.items():
        sp = sub.add_parser(cmd, help=(_HANDLER_DOCS.get(cmd) or ""))
        sp.add_argument("--config", help="flat key = value configuration file")
        for opt in COMMON + opts:
            flag = "--" + opt.name.replace("_", "-")
            if opt.flag:
                sp.add_argument(flag, dest=opt.name, action="store_const", const=True,
                                default=None, help=opt.help)
            else:
                sp.add_argument(flag, dest=opt.name, default=None, help=opt.help)
    return parser


def resolve_options(command: str, args: argparse.Namespace) -> dict[str, Any]:
    """Merge defaults, config file and flags (flags win) and convert types."""
    opts = COMMON + COMMANDS[command]
    config = read_config(args.config) if args.config else {}
    known = {o.name for o in opts}
    unknown = sorted(set(config) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
    out = {}
    for opt in opts:
        raw = getattr(args, opt.name)
        if raw is None:
            raw = config.get(opt.name)
        if raw is None:
            out[opt.name] = opt.default
            continue
        try:
            out[opt.name] = opt.convert(raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid value for {opt.name}: {raw!r} ({exc})") from exc
    if out["format"] not in ("csv", "json"):
        raise ConfigError(f"invalid value for format: {out['format']!r}")
    return out


# --------------------------------------------------------------------------
# output helpers


def _num(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def records_to_csv(records: list[dict]) -> str:
    cols = list(dict.fromkeys(k for r in records for k in r))
    frame = pd.DataFrame([{c: _num(r.get(c)) for c in cols} for r in records], columns=cols)
    buf = io.StringIO()
    frame.to_csv(buf, index=False, lineterminator="\n")
    return buf.getvalue()


def records_to_json(records: list[dict]) -> str:
    def clean(v):
        if isinstance(v, (np.floating,)):
            return float(v)
        if isinstance(v, (np.integer,)):
            return int(v)
        if isinstance(v, np.bool_):
            return bool(v)
        if isinstance(v, float) and not np.isfinite(v):
            return None
        return v
    return json.dumps([{k: clean(v) for k, v in r.items()} for r in records],
                      sort_keys=True, indent=2) + "\n"


def emit(records: list[dict], opts: dict, text: str | None = None) -> None:
    """Write records to ``--out`` in the requested format."""
    if opts["out"] is None:
        return
    if text is None:
        text = records_to_json(records) if opts["format"] == "json" else records_to_csv(records)
    Path(opts["out"]).write_text(text, encoding="utf-8")


def print_table(records: list[dict], cols: list[str] | None = None) -> None:
    if not records:
        return
    cols = cols or list(dict.fromkeys(k for r in records for k in r))
    cells = [[c for c in cols]] + [[_short(r.get(c)) for c in cols] for r in records]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    for row in cells:
        print("  ".join(v.rjust(w) for v, w in zip(row, widths)))


def _short(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return _num(v)


# --------------------------------------------------------------------------
# commands


def _load_frame(path):
    if path is None:
        return datasets.load_demo()
    try:
        return datasets.read_csv(path)
    except (OSError, pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read data file {path}: {exc}") from exc


ALL_ESTIMATES = ("ols", "tsls", "kclass", "tsls_ridge", "sqrt_ridge_ols", "drive")


def cmd_estimate(opts: dict) -> int:
    """Fit estimators on a CSV file and report coefficients and diagnostics."""
    frame = _load_frame(opts["data"])
    data = datasets.frame_to_dataset(frame, opts["outcome"], opts["endogenous"],
                                     opts["instruments"], opts["intercept"])
    names = list(ALL_ESTIMATES) if opts["estimator"] == ["all"] else opts["estimator"]
    bad = [e for e in names if e not in ALL_ESTIMATES]
    if bad:
        raise ConfigError(f"unknown estimator(s): {', '.join(bad)}")
    design = project_onto_instruments(data)
    coef_names = (["const"] if opts["intercept"] else []) + list(opts["endogenous"])
    records = []
    for name in names:
        est = _estimate_one(name, data, design, opts)
        rec = {"estimator": name}
        rec.update({f"beta_{c}": float(b) for c, b in zip(coef_names, est.beta)})
        rec["rho"] = est.rho
        rec["kappa"] = est.kappa
        d = est.diagnostics
        rec.update({"iterations": d.iterations, "final_gradient_norm": d.final_gradient_norm,
                    "objective": d.objective, "at_kink": d.at_kink})
        records.append(rec)
    if opts["rho_path"] is not None:
        for rho, beta in drive_shrinkage_path(design, opts["rho_path"], opts["q_order"]):
            rec = {"estimator": "drive_path"}
            rec.update({f"beta_{c}": float(b) for c, b in zip(coef_names, beta)})
            rec["rho"] = rho
            records.append(rec)
    print_table(records)
    emit(records, opts)
    return EXIT_OK


def _estimate_one(name, data, design, opts):
    if name == "ols":
        return fit_ols(data)
    if name == "tsls":
        return fit_tsls(design, data)
    if name == "kclass":
        return fit_kclass(data, KClassSpec(opts["kappa"]))
    if name == "tsls_ridge":
        r = opts["ridge_rho"]
        if r == "cv":
            rho = cv_tsls_ridge_rho(data, DEFAULT_RIDGE_GRID, 5, opts["seed"])
        else:
            try:
                rho = float(r)
            except ValueError as exc:
                raise ConfigError(f"invalid value for ridge_rho: {r!r}") from exc
        return fit_tsls_ridge(design, data, RidgeSpec(rho))
    if name == "sqrt_ridge_ols":
        return fit_sqrt_ridge_ols(data, RidgeSpec(opts["sqrt_rho"]))
    rule = _rho_rule(opts)
    rho, _ = resolve_rho(rule, design, data)
    return fit_drive(design, DriveSpec(rho, opts["q_order"]))


def _rho_rule(opts):
    rule = parse_rho_rule(opts["rho_rule"], seed=opts["seed"])
    if isinstance(rule, BootstrapScoreQuantile) and opts["reps"] is not None:
        rule = BootstrapScoreQuantile(BootstrapSettings(n_boot=opts["reps"], seed=opts["seed"]))
    return rule


def cmd_simulate(opts: dict) -> int:
    """Monte-Carlo MSE table over a grid of instrument-invalidity settings."""
    base = DgpSpec(beta0=opts["beta0"], gamma=opts["gamma"], sigma=opts["sigma"],
                   n=opts["n"], seed=opts["seed"])
    reps = 500 if opts["reps"] is None else opts["reps"]
    report = run_mse_experiment(opts["grid"], base, opts["estimators"], reps,
                                _rho_rule(opts),
                                ExperimentSettings(anchor_kappa=opts["anchor_kappa"]))
    wide = pd.read_csv(io.StringIO(report.to_wide_csv()))
    print_table(wide.to_dict("records"),
                ["eta", "beta_uz"] + report.estimators())
    if opts["format"] == "json":
        emit([], opts, report.to_json() + "\n")
    else:
        emit([], opts, report.to_wide_csv())
    if opts["tidy_out"]:
        Path(opts["tidy_out"]).write_text(report.to_tidy_csv(), encoding="utf-8")
    return EXIT_OK


def cmd_duality_check(opts: dict) -> int:
    """Randomized check that the closed-form, dual and primal routes agree."""
    perturb = 1e-3 if opts["perturb"] else 0.0
    if opts["replay"]:
        inst = DualityInstance.from_json_dict(
            json.loads(Path(opts["replay"]).read_text(encoding="utf-8")))
        results = [check_duality_instance(inst, perturb)]
    else:
        n = opts["instances"] or opts["reps"] or 100
        results = duality_check_suite(n, opts["seed"], perturb)
    records = [{"instance": i, "n": r.instance.y.size, "p": r.instance.beta.size,
                "d": r.instance.z.shape[1], "loss": r.loss, "rho": r.instance.rho,
                "closed_form": r.closed_form, "dual": r.dual,
                "transport_cost": r.transport_cost, "discrepancy": r.discrepancy}
               for i, r in enumerate(results)]
    if len(records) <= 5:
        print_table(records, ["instance", "loss", "rho", "closed_form", "dual", "discrepancy"])
    worst = max(range(len(results)), key=lambda i: results[i].discrepancy)
    max_disc = results[worst].discrepancy
    print(f"instances: {len(results)}  max discrepancy: {max_disc:.3e}  tolerance: {DUALITY_TOL:g}")
    emit(records, opts)
    if max_disc >= DUALITY_TOL:
        Path(opts["failure_out"]).write_text(
            json.dumps(results[worst].instance.to_json_dict(), indent=2) + "\n", encoding="utf-8")
        print(f"FAILED on instance {worst}; replay with --replay {opts['failure_out']}",
              file=sys.stderr)
        return EXIT_DUALITY
    return EXIT_OK


def cmd_asymptotics(opts: dict) -> int:
    """Sample the limiting laws of DRIVE and TSLS and compare them."""
    beta0 = np.asarray(opts["beta0"], float)
    p = beta0.size
    gamma = np.eye(p) if opts["gamma"] is None else opts["gamma"]
    d = gamma.shape[0]
    sigma_z = np.eye(d) if opts["sigma_z"] is None else opts["sigma_z"]
    if opts["rho"] is not None and opts["rho_fraction"] is not None:
        raise ConfigError("give either rho or rho_fraction, not both")
    if opts["rho_fraction"] is not None:
        g = gamma.T @ sigma_z @ gamma
        rho = opts["rho_fraction"] * float(np.linalg.eigvalsh(0.5 * (g + g.T))[0])
    else:
        rho = 0.0 if opts["rho"] is None else opts["rho"]
    draws = 10_000 if opts["reps"] is None else opts["reps"]
    spec = AsymptoticSpec(beta0, gamma, sigma_z, opts["sigma2"], rho, draws, opts["seed"])
    drive, diag = sample_drive_asymptotic(spec, return_diagnostics=True)
    tsls = sample_tsls_asymptotic(spec)
    ks = ks_distance(drive, tsls)
    crit = ks_critical_value(draws, draws, opts["level"])
    mean_diff = drive_minus_tsls_statistic(drive.mean(axis=0), tsls.mean(axis=0))
    records = [{"coordinate": j + 1, "ks": float(ks[j]), "critical_value": crit,
                "verdict": "laws differ" if ks[j] > crit else "laws match",
                "mean_difference": float(mean_diff[j]), "rho": rho,
                "in_consistency_range": spec.in_consistency_range,
                "failed_draws": diag.n_failed}
               for j in range(p)]
    print_table(records, ["coordinate", "ks", "critical_value", "verdict", "rho"])
    emit(records, opts)
    if opts["samples_out"]:
        rows = [{"estimator": name, "draw": i, "coordinate": j + 1, "value": float(s[i, j])}
                for name, s in (("drive", drive), ("tsls", tsls))
                for i in range(draws) for j in range(p)]
        Path(opts["samples_out"]).write_text(records_to_csv(rows), encoding="utf-8")
    return EXIT_OK if diag.n_failed == 0 else EXIT_SOLVER


def cmd_shift_eval(opts: dict) -> int:
    """Train on some groups, evaluate prediction error on others."""
    if opts["data"] is None:
        raise ConfigError("shift-eval needs --data")
    for key in ("split_variable", "train_ranks", "test_ranks"):
        if opts[key] is None:
            raise ConfigError(f"shift-eval needs --{key.replace('_', '-')}")
    frame = _load_frame(opts["data"])
    if opts["group"] not in frame.columns:
        raise ConfigError(f"missing column(s): {opts['group']}")
    n_groups = frame[opts["group"]].nunique()
    try:
        train = parse_ranks(opts["train_ranks"], n_groups)
        test = parse_ranks(opts["test_ranks"], n_groups)
    except ValueError as exc:
        raise ConfigError(f"invalid rank selection: {exc}") from exc
    spec = ShiftEvalSpec(opts["split_variable"], opts["group"], train, test,
                         opts["outcome"], tuple(opts["endogenous"]), tuple(opts["instruments"]))
    n_boot = 10 if opts["reps"] is None else opts["reps"]
    report = run_shift_eval(frame, spec, opts["estimators"], n_boot, _rho_rule(opts),
                            opts["intercept"], opts["seed"])
    records = report.to_records()
    print_table(records)
    emit(records, opts, report.to_json() + "\n" if opts["format"] == "json" else report.to_csv())
    return EXIT_OK


def cmd_generate(opts: dict) -> int:
    """Write a synthetic CSV: the demo table, a model draw or grouped shift data."""
    kind = opts["kind"]
    if kind == "demo":
        frame = datasets.demo_frame()
    elif kind == "dgp":
        data = generate_dgp(DgpSpec(eta=opts["eta"], beta_uz=opts["beta_uz"], gamma=opts["gamma"],
                                    sigma=opts["sigma"], n=opts["n"], seed=opts["seed"]))
        frame = pd.DataFrame({"y": data.y, "x": data.x[:, 0], "z": data.z[:, 0]})
    elif kind == "shift":
        frame = generate_shift_environments(opts["groups"], opts["n"], seed=opts["seed"])
    else:
        raise ConfigError(f"unknown kind {kind!r}; choose demo, dgp or shift")
    if opts["out"] is None:
        raise ConfigError("generate needs --out")
    datasets.write_csv(frame, opts["out"])
    print(f"wrote {len(frame)} rows to {opts['out']}")
    return EXIT_OK


HANDLERS = {
    "estimate": cmd_estimate,
    "simulate": cmd_simulate,
    "duality-check": cmd_duality_check,
    "asymptotics": cmd_asymptotics,
    "shift-eval": cmd_shift_eval,
    "generate": cmd_generate,
}
_HANDLER_DOCS = {k: (v.__doc__ or "").strip() for k, v in HANDLERS.items()}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    try:
        opts = resolve_options(args.command, args)
        return HANDLERS[args.command](opts)
    except (SolverDidNotConverge, DualBracketFailure, DegenerateGamma) as exc:
        print(f"error: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
