"""Command-line front end.

Exit codes: 0 success, 2 validation error, 3 numerical failure, 4 I/O error.
Results go to stdout as JSON (tests) or CSV (summary); diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import Dataset, summarize
from .errors import IcsError, InvalidScenario, NumericalError, SchemaViolation, ValidationError
from .model_assisted import DEFAULT_HC, model_assisted_test
from .model_based import model_based_test, naive_ics_test
from .randomization import DEFAULT_N_PERMS, randomization_test
from .simulation import (
    SCENARIOS,
    SimulationScenario,
    coerce_scenario_fields,
    parse_scenario_file,
    reports_to_csv,
    run_scenario,
)

SCHEMA_VERSION = "1.0"
EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
REQUIRED_COLUMNS = ("y", "z", "cluster_id")
SUMMARY_COLUMNS = ("cluster_id", "n_i", "a_i", "y_bar", "pi_i")


class InputError(IcsError, OSError):
    pass


def _number(text: str, column: str, lineno: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise SchemaViolation(f"line {lineno}: non-numeric {column!r} value {text!r}") from None
    if not math.isfinite(value):
        raise SchemaViolation(f"line {lineno}: missing or non-finite {column!r} value")
    return value


def read_dataset(path, covariates=()) -> Dataset:
    """Read a CSV with columns ``y``, ``z``, ``cluster_id`` and any covariates."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise InputError(f"file not found: {path}") from None
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    return parse_dataset(text, covariates)


def parse_dataset(text: str, covariates=()) -> Dataset:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if not header:
        raise SchemaViolation("input is empty (no header row)")
    header = [h.strip() for h in header]
    missing = [c for c in (*REQUIRED_COLUMNS, *covariates) if c not in header]
    if missing:
        raise SchemaViolation(f"missing required columns: {', '.join(missing)}")
    pos = {name: header.index(name) for name in (*REQUIRED_COLUMNS, *covariates)}
    y, z, cid = [], [], []
    covs = {c: [] for c in covariates}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) < len(header):
            raise SchemaViolation(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        y.append(_number(row[pos["y"]], "y", lineno))
        zv = _number(row[pos["z"]], "z", lineno)
        if zv not in (0.0, 1.0):
            raise SchemaViolation(f"line {lineno}: z must be 0 or 1, got {row[pos['z']]!r}")
        z.append(int(zv))
        label = row[pos["cluster_id"]].strip()
        if not label:
            raise SchemaViolation(f"line {lineno}: empty cluster_id")
        cid.append(label)
        for c in covariates:
            covs[c].append(_number(row[pos[c]], c, lineno))
    if not y:
        raise SchemaViolation("input has a header but no data rows")
    try:
        labels = np.array([int(v) for v in cid])
    except ValueError:
        labels = np.array(cid)
    return Dataset(np.array(y), np.array(z), labels, {c: np.array(v) for c, v in covs.items()})


def _finite(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def envelope(method: str, statistic, p_value, df, metadata: dict) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "method": method,
        "statistic": _finite(statistic),
        "p_value": _finite(p_value),
        "df": _finite(df),
        "metadata": metadata,
    }


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2)


def _covariate_list(text):
    return [c.strip() for c in text.split(",") if c.strip()] if text else []


def _run_test(args) -> dict:
    covs = _covariate_list(getattr(args, "covariates", None))
    ds = read_dataset(args.input, covs)
    if args.command == "model-assisted":
        res = model_assisted_test(ds, covs, adjust_size=args.adjust_size, hc_variant=args.hc)
        meta = {
            "delta_hat": _finite(res.delta_hat),
            "se": _finite(res.se),
            "ci_95": [_finite(v) for v in res.ci_95],
            "adjusted": res.adjusted,
            "adjust_size": args.adjust_size,
            "covariates": list(res.covariate_names),
            "p_covariates": res.p_covariates,
            "hc_variant": res.hc_variant,
            "residual_df": res.residual_df,
            "degenerate": res.degenerate,
            "n_clusters": ds.n_clusters,
        }
        return envelope(res.method, res.t_stat, res.p_value, res.df, meta)
    if args.command == "randomization":
        res = randomization_test(
            ds, covs, adjust_size=args.adjust_size, n_perms=args.n_perms, seed=args.seed,
            add_one=args.add_one, hc_variant=args.hc,
        )
        meta = {
            "seed": args.seed,
            "n_perms": res.n_perms,
            "n_extreme": res.n_extreme,
            "enumerated": res.enumerated,
            "degenerate_permutations": res.n_degenerate,
            "add_one": res.add_one,
            "adjusted": res.adjusted,
            "adjust_size": args.adjust_size,
            "covariates": list(res.covariate_names),
            "hc_variant": args.hc,
            "degenerate": res.degenerate,
            "n_clusters": ds.n_clusters,
        }
        return envelope(res.method, res.observed_stat, res.p_value, None, meta)
    if args.command == "model-based":
        transforms = [t for t in args.transform.split(",") if t.strip()]
        res = model_based_test(ds, transforms, covs or None, args.correlation)
    else:
        res = naive_ics_test(ds, args.correlation)
    meta = {
        "terms_tested": list(res.terms_tested),
        "correlation": res.correlation_used,
        "rho_hat": _finite(res.rho_hat),
        "converged": res.converged,
        "adjusted": res.adjusted,
        "covariates": covs,
        "reference": "normal" if res.df == 1 else "chi-square",
        "n_clusters": ds.n_clusters,
    }
    return envelope(res.method, res.stat, res.p_value, res.df, meta)


def _int_list(text):
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise InvalidScenario(f"expected comma-separated integers, got {text!r}") from None


def _run_simulate(args, out) -> None:
    fields = {}
    if args.config:
        try:
            fields = parse_scenario_file(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise InputError(f"config not found: {args.config}") from None
    cli_fields = {
        "scenario": args.scenario, "icc": args.icc, "n_sims": args.n_sims,
        "n_perms": args.n_perms, "alpha": args.alpha, "seed": args.seed,
        "methods": args.methods, "correlation": args.correlation,
        "threads": args.threads,
    }
    fields.update(coerce_scenario_fields({k: v for k, v in cli_fields.items() if v is not None}))
    if args.literal_s:
        fields["literal_s"] = True
    fields.setdefault("scenario_id", "sim1")
    sid = fields["scenario_id"]
    if sid not in SCENARIOS:
        raise ValidationError(f"unknown scenario {sid!r}")
    default_m = "30,40,50,60,70,80,90,100" if sid == "typeI_sweep" else str(fields.get("M", 100))
    ms = _int_list(args.M or default_m)
    ks = _int_list(args.k or str(fields.get("k", 5)))
    fields.pop("M", None)
    fields.pop("k", None)
    reports = []
    for m in ms:
        for k in ks:
            sc = SimulationScenario(M=m, k=k, **fields)
            reports.append(run_scenario(sc))
    outdir = Path(args.out)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        payload = [json.loads(r.to_json()) for r in reports]
        (outdir / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        (outdir / "report.csv").write_text(reports_to_csv(reports))
    except OSError as exc:
        raise InputError(f"cannot write reports to {outdir}: {exc}") from None
    out.write("scenario,M,k,icc,method,rejection_rate,mc_se,bias,n_failed\n")
    for r in reports:
        s = r.scenario
        for name, m in r.methods.items():
            bias = "" if m.bias is None else f"{m.bias:.4f}"
            out.write(
                f"{s['scenario_id']},{s['M']},{s['k']},{s['icc']},{name},"
                f"{m.rejection_rate:.4f},{m.mc_se:.4f},{bias},{m.n_failed}\n"
            )


def _run_summary(args, out) -> None:
    ds = read_dataset(args.input)
    w = csv.writer(out, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for row in summarize(ds, covariates=[]):
        w.writerow([row.cluster_id, row.n_i, row.a_i, repr(row.y_bar), repr(row.pi_i)])


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="clusterics",
        description="Tests for informative cluster size in cluster randomized trials.",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, with_covariates=True):
        sp.add_argument("input", help="CSV with columns y, z, cluster_id (+ covariates)")
        if with_covariates:
            sp.add_argument("--covariates", help="comma-separated covariate column names")

    for name in ("model-assisted", "randomization"):
        sp = sub.add_parser(name)
        common(sp)
        sp.add_argument("--no-adjust-size", dest="adjust_size", action="store_false")
        sp.add_argument("--hc", choices=("HC0", "HC1"), default=DEFAULT_HC)
        if name == "randomization":
            sp.add_argument("--n-perms", type=int, default=DEFAULT_N_PERMS)
            sp.add_argument("--seed", type=int, default=0)
            sp.add_argument("--add-one", action="store_true")

    sp = sub.add_parser("model-based")
    common(sp)
    sp.add_argument("--transform", default="linear",
                    help="linear | log | threshold:<c>; comma-separate several for a chunk test")
    sp.add_argument("--correlation", choices=("exchangeable", "independence"),
                    default="exchangeable")

    sp = sub.add_parser("naive")
    common(sp, with_covariates=False)
    sp.add_argument("--correlation", choices=("exchangeable", "independence"),
                    default="exchangeable")

    sp = sub.add_parser("summary")
    sp.add_argument("input")

    sp = sub.add_parser("simulate")
    sp.add_argument("--config", help="key = value scenario file")
    sp.add_argument("--scenario")
    sp.add_argument("--M", help="number of clusters (comma list allowed)")
    sp.add_argument("--k", help="ICS magnitude 1..9 (comma list allowed)")
    sp.add_argument("--icc", type=float)
    sp.add_argument("--n-sims", dest="n_sims", type=int)
    sp.add_argument("--n-perms", dest="n_perms", type=int)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--methods", help="comma-separated method ids")
    sp.add_argument("--correlation", choices=("exchangeable", "independence"))
    sp.add_argument("--literal-s", action="store_true")
    sp.add_argument("--threads", type=int)
    sp.add_argument("--out", default="sim_out")
    return p


def main(argv=None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    try:
        if args.command == "simulate":
            _run_simulate(args, stdout)
        elif args.command == "summary":
            _run_summary(args, stdout)
        else:
            stdout.write(dumps(_run_test(args)) + "\n")
    except InputError as exc:
        stderr.write(f"error: {exc}\n")
        return EXIT_IO
    except ValidationError as exc:
        stderr.write(f"validation error ({type(exc).__name__}): {exc}\n")
        return EXIT_VALIDATION
    except (NumericalError, np.linalg.LinAlgError) as exc:
        stderr.write(f"numerical failure ({type(exc).__name__}): {exc}\n")
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
