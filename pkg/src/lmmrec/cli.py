"""Command line interface.

Subcommands: ``fit``, ``compare``, ``evaluate``, ``recommend`` and
``coefficients``.  The data directory comes from ``--data`` or the
``LMMREC_DATA`` environment variable.  A ``--config`` file of ``key=value``
lines supplies defaults that flags override.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical or
convergence error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from lmmrec.errors import DataError, LmmError, UsageError
from lmmrec.evaluation import cross_validate
from lmmrec.formula import parse_formula
from lmmrec.ingest import DISPLAY_NAMES, expand_genres, genre_table, load_movielens, movie_table
from lmmrec.recommend import GroupCell, coefficient_report, rank_groups_for_item, rank_items_for_group
from lmmrec.reml import FitOptions, fit_reml, standard_errors
from lmmrec.stats import information_criteria, likelihood_ratio_test

DATA_ENV = "LMMREC_DATA"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

MODEL_6 = "y ~ -1 + occupation + (1|age) + (1|gender)"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _fmt(value, full: bool):
    if isinstance(value, bool) or value is None:
        return "" if value is None else str(value).lower()
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return repr(value) if full else f"{value:.6g}"
    return str(value)


def write_rows(rows: list[dict], fmt: str, out, full_precision: bool = False) -> None:
    if fmt == "json":
        json.dump(rows, out, indent=2)
        out.write("\n")
        return
    if not rows:
        return
    fields = list(rows[0])
    for r in rows[1:]:
        fields.extend(k for k in r if k not in fields)
    w = csv.DictWriter(out, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k), full_precision) for k in fields})


def read_config(path: str) -> dict[str, str]:
    values = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _load(args):
    data = args.data or os.environ.get(DATA_ENV)
    if not data:
        raise DataError(f"no data directory: pass --data or set {DATA_ENV}")
    return load_movielens(data)


def _selected_table(args, users, movies, ratings):
    if args.movie and args.genre:
        raise UsageError("give either --movie or --genre, not both")
    if args.movie:
        return movie_table(ratings, users, movies, args.movie)
    if args.genre:
        return genre_table(ratings, users, movies, args.genre)
    raise UsageError("a selector is required: --movie or --genre")


def _options(args) -> FitOptions:
    return FitOptions(max_iter=int(args.max_iter))


def fit_rows(fit) -> list[dict]:
    rows = []
    se = standard_errors(fit)
    p = fit.design.p
    for i, label in enumerate(fit.tau_labels):
        rows.append({"kind": "fixed", "name": label, "estimate": float(fit.tau_hat[i]), "std_error": float(se[i])})
    for i, label in enumerate(fit.u_labels):
        rows.append({"kind": "random", "name": label, "estimate": float(fit.u_hat[i]), "std_error": float(se[p + i])})
    rows.append({"kind": "variance", "name": "residual", "estimate": fit.theta.sigma2, "std_error": None})
    for name, g, v in zip(fit.formula.random_factors, fit.theta.gamma, fit.theta.variances):
        rows.append({"kind": "variance", "name": name, "estimate": v, "std_error": None})
        rows.append({"kind": "ratio", "name": name, "estimate": g, "std_error": None})
    aic, bic, ll = information_criteria(fit)
    for name, value in (("loglik", ll), ("aic", aic), ("bic", bic)):
        rows.append({"kind": "criterion", "name": name, "estimate": value, "std_error": None})
    for name, value in (
        ("n_obs", fit.n_obs),
        ("n_params", fit.n_params),
        ("iterations", fit.iterations),
        ("converged", fit.converged),
    ):
        rows.append({"kind": "info", "name": name, "estimate": value, "std_error": None})
    return rows


def cmd_fit(args, out) -> int:
    f = parse_formula(args.formula)
    users, movies, ratings = _load(args)
    table = _selected_table(args, users, movies, ratings)
    fit = fit_reml(f, table, _options(args))
    if args.format == "json":
        summary = fit.summary()
        summary["selection"] = table.label
        summary["std_errors"] = dict(zip(fit.tau_labels, map(float, standard_errors(fit)[: fit.design.p])))
        json.dump(summary, out, indent=2)
        out.write("\n")
    else:
        write_rows(fit_rows(fit), "csv", out, args.full_precision)
    return EXIT_OK if fit.converged else EXIT_NUMERIC


def cmd_compare(args, out) -> int:
    if len(args.formula) != 2:
        raise UsageError("compare needs exactly two --formula options (nested first)")
    f_nested, f_full = (parse_formula(s) for s in args.formula)
    if f_nested == f_full:
        raise UsageError("the two formulas are identical: models are not nested")
    users, movies, ratings = _load(args)
    table = _selected_table(args, users, movies, ratings)
    opts = _options(args)
    nested, full = fit_reml(f_nested, table, opts), fit_reml(f_full, table, opts)
    lrt = likelihood_ratio_test(nested, full)
    rows = []
    for label, fit, is_full in (("nested", nested, False), ("full", full, True)):
        aic, bic, ll = information_criteria(fit)
        ml_aic, _, ml_ll = information_criteria(fit.ml_fit)
        rows.append(
            {
                "model": label,
                "formula": str(fit.formula),
                "DF": lrt.df_full if is_full else lrt.df_nested,
                "AIC": aic,
                "BIC": bic,
                "LogL": ll,
                "LRStat": lrt.lr_stat if is_full else None,
                "deltaDF": lrt.delta_df if is_full else None,
                "pValue": lrt.p_value if is_full else None,
                "ML_LogL": ml_ll,
                "ML_AIC": ml_aic,
            }
        )
    if args.format == "csv":
        for r in rows:
            for k in ("LRStat", "deltaDF", "pValue"):
                if r[k] is None:
                    r[k] = "-----"
    write_rows(rows, args.format, out, args.full_precision)
    return EXIT_OK


def _eval_one(f, table, args, label):
    return cross_validate(
        f,
        table,
        repeats=int(args.repeats),
        train_fraction=float(args.fraction),
        seed=int(args.seed),
        clip=(1.0, 5.0) if args.clip else None,
        opts=_options(args),
        label=str(f),
    ).rows(label)


def cmd_evaluate(args, out) -> int:
    f = parse_formula(args.formula)
    if int(args.repeats) < 1:
        raise UsageError(f"--repeats must be >= 1, got {args.repeats}")
    users, movies, ratings = _load(args)
    if args.all_genres:
        genres = sorted(expand_genres(movies))
        tables = [genre_table(ratings, users, movies, g) for g in genres]
        jobs = max(1, int(args.jobs))
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda gt: _eval_one(f, gt[1], args, gt[0]), zip(genres, tables)))
        rows = [r for res in results for r in res]
    else:
        table = _selected_table(args, users, movies, ratings)
        rows = _eval_one(f, table, args, table.label)
    write_rows(rows, args.format, out, args.full_precision)
    return EXIT_OK


def _display(factor: str, level: str) -> str:
    return DISPLAY_NAMES.get(factor, {}).get(level, level)


def cmd_recommend(args, out) -> int:
    f = parse_formula(args.formula)
    users, movies, ratings = _load(args)
    opts = _options(args)
    rows = []
    if args.for_cell is not None:
        cell = GroupCell.parse(args.for_cell)
        genres = sorted(expand_genres(movies))
        fits = {g: fit_reml(f, genre_table(ratings, users, movies, g), opts) for g in genres}
        for rank, (genre, score) in enumerate(rank_items_for_group(fits, cell, int(args.top)), 1):
            rows.append({"rank": rank, "cell": str(cell), "genre": genre, "score": score})
    else:
        if not args.by:
            raise UsageError("recommend needs --by (rank groups) or --for (rank genres)")
        table = _selected_table(args, users, movies, ratings)
        fit = fit_reml(f, table, opts)
        by = [s.strip() for s in args.by.split(",") if s.strip()]
        ranked = rank_groups_for_item(fit, by)
        for rank, rc in enumerate(ranked[: int(args.top)] if args.top else ranked, 1):
            row = {"rank": rank, "selection": table.label}
            for name, level in rc.cell.values:
                row[name] = level
                row[f"{name}_name"] = _display(name, level)
            row.update({"score": rc.score, "support": rc.support})
            rows.append(row)
    write_rows(rows, args.format, out, args.full_precision)
    return EXIT_OK


def cmd_coefficients(args, out) -> int:
    f = parse_formula(args.formula)
    users, movies, ratings = _load(args)
    table = _selected_table(args, users, movies, ratings)
    fit = fit_reml(f, table, _options(args))
    factors = [args.factor] if args.factor else list(f.fixed_factors) or ["intercept"]
    rows = []
    for factor in factors:
        rep = coefficient_report(fit, factor, str(f))
        for r in rep.rows:
            rows.append(
                {
                    "model": rep.model_label,
                    "selection": table.label,
                    "factor": factor,
                    "level": r.level,
                    "level_name": _display(factor, r.level),
                    "estimate": r.estimate,
                    "std_error": r.std_error,
                    "aliased": r.aliased,
                }
            )
    write_rows(rows, args.format, out, args.full_precision)
    return EXIT_OK if fit.converged else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lmmrec", description="Linear mixed models for group recommendation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, selector=True):
        p.add_argument("--config", help="key=value file with default options")
        p.add_argument("--data", help=f"MovieLens-1M directory (default: ${DATA_ENV})")
        if selector:
            p.add_argument("--movie", help="movie id or exact title, e.g. 'Jurassic Park (1993)'")
            p.add_argument("--genre", help="genre bucket, e.g. Musical")
        p.add_argument("--format", choices=("csv", "json"), default="csv")
        p.add_argument("--out", help="output file (default: stdout)")
        p.add_argument("--full-precision", action="store_true", help="CSV numbers with full precision")
        p.add_argument("--max-iter", type=int, default=200)

    p = sub.add_parser("fit", help="fit one model")
    common(p)
    p.add_argument("--formula")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("compare", help="likelihood-ratio comparison of nested models")
    common(p)
    p.add_argument("--formula", action="append", help="give twice: nested then full")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("evaluate", help="repeated 80/20 holdout MAE")
    common(p)
    p.add_argument("--formula", default=MODEL_6)
    p.add_argument("--all-genres", action="store_true")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--fraction", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--clip", action="store_true", help="clip predictions to [1, 5]")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("recommend", help="rank groups for an item or genres for a group")
    common(p)
    p.add_argument("--formula", default=MODEL_6)
    p.add_argument("--by", help="comma-separated factors to rank, e.g. occupation")
    p.add_argument("--for", dest="for_cell", help="group cell, e.g. 'age=25,gender=M'")
    p.add_argument("--top", type=int, default=0)
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("coefficients", help="fixed-effect estimates as plot data")
    common(p)
    p.add_argument("--formula", default=MODEL_6)
    p.add_argument("--factor")
    p.set_defaults(func=cmd_coefficients)
    return parser


_INT_KEYS = {"max_iter", "repeats", "seed", "jobs", "top"}
_FLOAT_KEYS = {"fraction"}
_BOOL_KEYS = {"all_genres", "clip", "full_precision"}


def _apply_config(parser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        values = read_config(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        defaults = {}
        for key, value in values.items():
            if key not in known:
                raise UsageError(f"unknown config key {key!r} for {args.command}")
            if key in _INT_KEYS:
                value = int(value)
            elif key in _FLOAT_KEYS:
                value = float(value)
            elif key in _BOOL_KEYS:
                value = value.lower() in ("1", "true", "yes", "on")
            elif key == "formula" and args.command == "compare":
                value = [s.strip() for s in value.split(";")]
            defaults[key] = value
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def main(argv=None, stdout=None) -> int:
    parser = build_parser()
    stdout = stdout or sys.stdout
    try:
        args = _apply_config(parser, argv)
    except LmmError as exc:
        print(f"lmmrec: error [{exc.module}]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "formula", None) is None:
        print("lmmrec: error [cli]: --formula is required", file=sys.stderr)
        return EXIT_USAGE
    buf = io.StringIO()
    try:
        code = args.func(args, buf)
    except LmmError as exc:
        print(f"lmmrec: error [{exc.module}]: {exc}", file=sys.stderr)
        return exc.exit_code
    if args.out:
        Path(args.out).write_text(buf.getvalue(), encoding="utf-8")
    else:
        stdout.write(buf.getvalue())
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
