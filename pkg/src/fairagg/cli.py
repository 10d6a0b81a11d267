"""``fairagg`` command-line front end.

Subcommands: simulate, fit, compare, test, sensitivity, gam, prepare.  A
configuration file (``--config``) holds flat ``key = value`` lines that
apply to the subcommand being run, plus optional ``[subcommand]`` sections;
command-line flags override both.  Errors are printed to stderr as one JSON
line; exit status is 2 for usage errors, 1 for data or numeric errors.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__
from .additive import fit_gam, nested_f_test
from .diagnostics import Bias, MeanForecast, PointForecast, sensitivity
from .errors import DataError, FairAggError
from .model import BankPopulation
from .panel import PanelDataset, read_panel_csv, write_panel_csv
from .pipeline import (
    build_regression_frame,
    clean,
    compute_rates,
    macro_pc1,
    read_macro,
    read_raw_panel,
)
from .sample import (
    CovarianceSpec,
    Intercepts,
    PanelMode,
    SlopeOfFeature,
    clustered_covariance,
    fit_panel,
    heterogeneity_test,
    panel_clusters,
    pooled_vs_feo_test,
    relative_prediction_differences,
)
from .scenarios import SCENARIOS
from .simulation import simulate_panel

FLAT_SECTION = "__flat__"
PATH_KEYS = {"out", "summary_out", "offsets_out", "report_out", "panel", "raw", "macro", "population"}
INPUT_KEYS = ("panel", "raw", "macro", "population")


class UsageError(Exception):
    pass


def fmt(x: Any) -> str:
    """Six significant digits; negative zero prints as ``0``."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    s = "%.6g" % x
    return "0" if s in ("-0", "0") else s


def round6(x: float) -> float:
    return float(fmt(x)) if math.isfinite(x) else x


@dataclass(frozen=True)
class Option:
    key: str
    type: Callable[[str], Any]
    default: Any
    help: str


COMMANDS: dict[str, list[Option]] = {
    "simulate": [
        Option("scenario", str, "sim-a", f"built-in population: {', '.join(sorted(SCENARIOS))}"),
        Option("population", str, None, "population JSON file (overrides scenario)"),
        Option("rows_per_bank", int, 1000, "rows per bank"),
        Option("seed", int, 0, "random seed"),
        Option("replication", int, 0, "replication index within the seed"),
        Option("out", str, None, "output panel CSV"),
    ],
    "fit": [
        Option("panel", str, None, "panel CSV"),
        Option("out", str, "-", "output CSV ('-' for stdout)"),
    ],
    "compare": [
        Option("panel", str, None, "panel CSV"),
        Option("out", str, "-", "comparison CSV ('-' for stdout)"),
        Option("summary_out", str, None, "relative prediction difference summary CSV"),
    ],
    "test": [
        Option("panel", str, None, "panel CSV"),
        Option("out", str, "-", "output CSV ('-' for stdout)"),
    ],
    "sensitivity": [
        Option("scenario", str, "sim-a", "built-in population"),
        Option("population", str, None, "population JSON file (overrides scenario)"),
        Option("x", float, 0.0, "feature value for point-forecast sensitivities"),
        Option("out", str, "-", "output JSON ('-' for stdout)"),
    ],
    "gam": [
        Option("panel", str, None, "panel CSV; splines on the first two features and their product"),
        Option("dof", float, 4.0, "target effective dof of every spline"),
        Option("tol", float, 1e-8, "backfitting tolerance"),
        Option("max_sweeps", int, 200, "maximum backfitting sweeps"),
        Option("out", str, "-", "F-test CSV ('-' for stdout)"),
        Option("offsets_out", str, None, "bank offset CSV"),
    ],
    "prepare": [
        Option("raw", str, None, "raw bank panel CSV"),
        Option("macro", str, None, "macro CSV"),
        Option("fit_start", str, None, "first quarter of the PC1 fit range (YYYY-Qn)"),
        Option("fit_end", str, None, "last quarter of the PC1 fit range (YYYY-Qn)"),
        Option("lag", int, 4, "feature lag in quarters"),
        Option("ratio", float, 2.0, "worst-to-best stress weight ratio"),
        Option("out", str, None, "regression frame CSV"),
        Option("report_out", str, None, "exclusion report JSON"),
    ],
}
REQUIRED = {
    "simulate": ("out",),
    "fit": ("panel",),
    "compare": ("panel",),
    "test": ("panel",),
    "gam": ("panel",),
    "prepare": ("raw", "macro", "out"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fairagg", description="Fair aggregation of bank loss models.")
    parser.add_argument("--version", action="version", version=f"fairagg {__version__}")
    parser.add_argument("--config", help="configuration file")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", dest="sub_config", help="configuration file")
        for o in opts:
            p.add_argument("--" + o.key.replace("_", "-"), dest=o.key, type=o.type, default=None,
                           help=o.help)
    return parser


def read_config(path: str, command: str) -> dict[str, str]:
    """Flat keys plus the ``[command]`` section; keys no subcommand knows are rejected."""
    if not os.path.exists(path):
        raise DataError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    cp = configparser.ConfigParser(
        inline_comment_prefixes=("#", ";"), interpolation=None, default_section="__none__"
    )
    try:
        cp.read_string(f"[{FLAT_SECTION}]\n" + text)
    except configparser.Error as exc:
        raise UsageError(f"cannot parse config file {path}: {exc}") from None
    everywhere = {o.key for opts in COMMANDS.values() for o in opts}
    values: dict[str, str] = {}
    for section in cp.sections():
        if section != FLAT_SECTION and section not in COMMANDS:
            raise UsageError(f"unknown config section [{section}]; valid: {sorted(COMMANDS)}")
        # flat keys may belong to another subcommand; section keys must fit their own
        valid = everywhere if section == FLAT_SECTION else {o.key for o in COMMANDS[section]}
        mine = {o.key for o in COMMANDS[command]}
        for key, val in cp.items(section):
            k = key.replace("-", "_")
            if k not in valid:
                where = "" if section == FLAT_SECTION else f" in [{section}]"
                raise UsageError(f"unknown config key {key!r}{where}; valid keys: {sorted(valid)}")
            if k in mine and section in (FLAT_SECTION, command):
                values[k] = val
    return values


def resolve(args: argparse.Namespace) -> dict[str, Any]:
    command = args.command
    cfg_path = args.sub_config or args.config
    from_file = read_config(cfg_path, command) if cfg_path else {}
    settings: dict[str, Any] = {}
    for o in COMMANDS[command]:
        flag = getattr(args, o.key)
        if flag is not None:
            settings[o.key] = flag
        elif o.key in from_file:
            try:
                settings[o.key] = o.type(from_file[o.key])
            except ValueError:
                raise UsageError(f"config key {o.key!r}: cannot parse {from_file[o.key]!r}") from None
        else:
            settings[o.key] = o.default
    for key in REQUIRED.get(command, ()):
        if settings.get(key) in (None, ""):
            raise UsageError(f"{command}: missing required setting {key!r} (flag --{key.replace('_', '-')})")
    return settings


def config_hash(command: str, settings: dict[str, Any]) -> str:
    """Hash of non-path settings plus the bytes of every input file."""
    h = hashlib.sha256(command.encode())
    for key in sorted(settings):
        if key in PATH_KEYS:
            continue
        h.update(f"\n{key}={settings[key]!r}".encode())
    for key in INPUT_KEYS:
        path = settings.get(key)
        if path:
            if not os.path.isfile(path):
                raise DataError(f"{key} file not found: {path}")
            with open(path, "rb") as fh:
                h.update(f"\n{key}:".encode() + hashlib.sha256(fh.read()).digest())
    return h.hexdigest()[:12]


def header(settings: dict[str, Any], digest: str) -> str:
    seed = settings.get("seed")
    return f"# fairagg {__version__} seed={'-' if seed is None else seed} config={digest}"


def write_table(path: str | None, head: str, columns: Sequence[str], rows: list[list[Any]]) -> None:
    lines = [head, ",".join(columns)]
    lines += [",".join(v if isinstance(v, str) else fmt(v) for v in row) for row in rows]
    text = "\n".join(lines) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(text)


def write_json(path: str | None, payload: dict) -> None:
    text = json.dumps(payload, indent=2, sort_keys=False) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(text)


def _load_population(settings: dict[str, Any]) -> BankPopulation:
    path = settings.get("population")
    if path:
        if not os.path.exists(path):
            raise DataError(f"population file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            try:
                return BankPopulation.from_dict(json.load(fh))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"invalid population file {path}: {exc}") from None
    name = settings["scenario"].lower()
    if name not in SCENARIOS:
        raise UsageError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
    return SCENARIOS[name]


def _groups(ds: PanelDataset) -> list[tuple[str, PanelDataset]]:
    if ds.category is None:
        return [("all", ds)]
    return list(ds.by_category().items())


def _se(fit, clusters) -> np.ndarray:
    try:
        return np.sqrt(np.clip(np.diag(clustered_covariance(fit, clusters)), 0, None))
    except DataError:
        return np.full(fit.coefficients.shape, np.nan)


def cmd_simulate(s: dict[str, Any], digest: str) -> None:
    pop = _load_population(s)
    ds = simulate_panel(pop, s["rows_per_bank"], s["seed"], s["replication"])
    write_panel_csv(ds, s["out"], header(s, digest))


def cmd_fit(s: dict[str, Any], digest: str) -> None:
    ds = read_panel_csv(s["panel"])
    rows = []
    for cat, sub in _groups(ds):
        for mode in (PanelMode.POOLED, PanelMode.FIXED_EFFECTS):
            pf = fit_panel(sub, mode)
            fit = pf.fit
            se_b = _se(fit, panel_clusters(sub, CovarianceSpec.BANK_CLUSTERED))
            se_t = _se(fit, panel_clusters(sub, CovarianceSpec.TIME_CLUSTERED))
            name = "pooled" if mode is PanelMode.POOLED else "feo"
            for i, label in enumerate(fit.labels):
                if label.startswith("U["):
                    continue
                rows.append([cat, name, label, fit.coefficients[i], se_b[i], se_t[i]])
    write_table(s["out"], header(s, digest),
                ["category", "model", "term", "estimate", "se_bank", "se_time"], rows)


def cmd_compare(s: dict[str, Any], digest: str) -> None:
    ds = read_panel_csv(s["panel"])
    rows, summary = [], []
    for cat, sub in _groups(ds):
        for name in sub.feature_names:
            rb = pooled_vs_feo_test(sub, name, CovarianceSpec.BANK_CLUSTERED)
            rt = pooled_vs_feo_test(sub, name, CovarianceSpec.TIME_CLUSTERED)
            rows.append([cat, name, rb.beta_pool, rb.beta_f, rb.diff_f_minus_pool,
                         rb.diff_pool_minus_f, rb.wald.p_value, rt.wald.p_value])
        pooled = fit_panel(sub, PanelMode.POOLED).forecaster
        feo = fit_panel(sub, PanelMode.FIXED_EFFECTS).forecaster
        rel = relative_prediction_differences(sub, pooled, feo)
        summary.append([cat, rel.mean, rel.median, rel.n_used, rel.n_excluded])
    head = header(s, digest)
    write_table(s["out"], head, ["category", "feature", "beta_pool", "beta_f", "diff_f_minus_pool",
                                 "diff_pool_minus_f", "p_bank", "p_time"], rows)
    if s.get("summary_out"):
        write_table(s["summary_out"], head, ["category", "mean", "median", "n_used", "n_excluded"],
                    summary)


def cmd_test(s: dict[str, Any], digest: str) -> None:
    ds = read_panel_csv(s["panel"])
    rows = []
    for cat, sub in _groups(ds):
        targets = [("intercept", Intercepts())] + [(n, SlopeOfFeature(n)) for n in sub.feature_names]
        for label, target in targets:
            for spec in (CovarianceSpec.BANK_CLUSTERED, CovarianceSpec.TIME_CLUSTERED):
                r = heterogeneity_test(sub, target, spec)
                rows.append([cat, label, spec.value, r.statistic, r.dof, r.p_value])
    write_table(s["out"], header(s, digest),
                ["category", "target", "spec", "statistic", "dof", "p_value"], rows)


def cmd_sensitivity(s: dict[str, Any], digest: str) -> None:
    pop = _load_population(s)
    rows = []
    for method in ("feo", "pooled"):
        for par in ("mu", "alpha", "beta"):
            for bank in range(pop.n_banks):
                targets = [("point_forecast", None, PointForecast(s["x"]))]
                for l in range(pop.n_banks):
                    targets.append(("mean_forecast", l, MeanForecast(l)))
                    targets.append(("bias", l, Bias(l)))
                for tname, l, target in targets:
                    r = sensitivity(pop, method, par, bank, target)
                    rows.append({
                        "method": method,
                        "parameter": par,
                        "bank": bank,
                        "target": tname,
                        "target_bank": l,
                        "value": round6(r.value),
                        "sign_rule": r.sign_rule.value,
                    })
    write_json(s["out"], {
        "tool": f"fairagg {__version__}",
        "config": digest,
        "x": s["x"],
        "rows": rows,
    })


def cmd_gam(s: dict[str, Any], digest: str) -> None:
    from .additive import Term
    from .smoothers import CubicSplinePenalized

    ds = read_panel_csv(s["panel"])
    ftab, otab = [], []
    for cat, sub in _groups(ds):
        names = sub.feature_names[:2]
        terms = [Term(n, CubicSplinePenalized(s["dof"])) for n in names]
        if len(names) == 2:
            terms.append(Term(tuple(names), CubicSplinePenalized(s["dof"])))
        pooled = fit_gam(sub, "pooled", terms, s["tol"], s["max_sweeps"])
        feo = fit_gam(sub, "feo", terms, s["tol"], s["max_sweeps"])
        ft = nested_f_test(pooled.model, feo.model, sub)
        ftab.append([cat, ft.F, ft.dof1, ft.dof2, ft.p_value, pooled.model.converged,
                     feo.model.converged])
        for bank, off in feo.model.bank_offsets.items():
            otab.append([cat, bank, off])
    head = header(s, digest)
    write_table(s["out"], head, ["category", "F", "dof1", "dof2", "p_value", "converged_pooled",
                                 "converged_feo"], ftab)
    if s.get("offsets_out"):
        write_table(s["offsets_out"], head, ["category", "bank_id", "offset"], otab)


def cmd_prepare(s: dict[str, Any], digest: str) -> None:
    raw = read_raw_panel(s["raw"])
    macro = read_macro(s["macro"])
    rates, r1 = compute_rates(raw)
    cleaned, r2 = clean(rates)
    fit_range = None
    if s["fit_start"] or s["fit_end"]:
        if not (s["fit_start"] and s["fit_end"]):
            raise UsageError("fit_start and fit_end must be given together")
        fit_range = (s["fit_start"], s["fit_end"])
    pc = macro_pc1(macro, fit_range)
    frame = build_regression_frame(cleaned, pc.series, s["lag"], s["ratio"])
    write_panel_csv(frame.panel(), s["out"], header(s, digest))
    if s.get("report_out"):
        write_json(s["report_out"], {
            "tool": f"fairagg {__version__}",
            "config": digest,
            "compute_rates": r1,
            "clean": r2,
            "regression_frame": frame.report,
            "rows": int(frame.data.shape[0]),
            "stress_lambda": round6(frame.stress_lambda),
            "pc1_loadings": {k: round6(v) for k, v in pc.loadings.items()},
            "pc1_explained": round6(pc.explained),
        })


HANDLERS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "compare": cmd_compare,
    "test": cmd_test,
    "sensitivity": cmd_sensitivity,
    "gam": cmd_gam,
    "prepare": cmd_prepare,
}


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(f"a subcommand is required: {', '.join(COMMANDS)}")
        settings = resolve(args)
    except UsageError as exc:
        return _fail("usage", str(exc), 2)
    except FairAggError as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    try:
        digest = config_hash(args.command, settings)
        HANDLERS[args.command](settings, digest)
    except UsageError as exc:
        return _fail("usage", str(exc), 2)
    except (FairAggError, ArithmeticError, ValueError, KeyError, OSError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
