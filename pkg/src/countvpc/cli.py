"""Command-line interface: ``countvpc <subcommand> [flags]``.

Exit status is 0 on success, 1 for user errors (unreadable or invalid
input) and 2 for numeric or convergence failures.  Floats are written with
9 significant digits so repeated runs give byte-identical files.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .data import DataError, Schema, expand_categoricals, group_summary, load_csv, write_csv
from .fit import ConvergenceError, FitOptions, fit_ml
from .model import ModelFamily, SpecError, load_params
from .simulate import SimConfig, default_seed, simulate_dataset, verify
from .stats import marginal_stats, reference_row, stats_profile

DIGITS = 9

_STAT_LABELS = [
    ("mu_m", "expectation"),
    ("variance", "variance"),
    ("comp_l3", "variance3"),
    ("comp_l2", "variance2"),
    ("comp_l1", "variance1"),
    ("vpc3", "vpc3"),
    ("vpc2", "vpc2"),
    ("vpc1", "vpc1"),
]


class UserError(Exception):
    pass


class NumericError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _fmt(v) -> str:
    return "" if v is None else f"{v:.{DIGITS}g}"


def _round(obj):
    if isinstance(obj, float):
        return float(_fmt(obj)) if np.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    return obj


def _emit(text: str, out) -> None:
    if out:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _parse_at(items) -> dict:
    row = {}
    for item in items or ():
        name, sep, value = item.partition("=")
        if not sep:
            raise UserError(f"--at expects name=value, got {item!r}")
        try:
            row[name] = float(value)
        except ValueError:
            raise UserError(f"--at value for {name!r} is not a number") from None
    return row


def _load_data(args):
    schema = Schema.load(args.schema) if args.schema else Schema()
    dataset = load_csv(args.data, schema)
    if dataset.categoricals:
        dataset = expand_categoricals(dataset)
    return dataset


def _sim_config(args, spec) -> SimConfig:
    base = SimConfig.full(spec)
    return SimConfig(
        n_clusters=args.clusters or base.n_clusters,
        n_units=args.units or base.n_units,
        n_superclusters=(args.superclusters or base.n_superclusters) if spec.is_three_level else None,
        seed=default_seed() if args.seed is None else args.seed,
        threads=args.threads,
    )


def cmd_stats(args):
    spec = load_params(args.params)
    eta, z = reference_row(spec, **_parse_at(args.at))
    stats = marginal_stats(spec, eta, z)
    rows = [(label, getattr(stats, attr)) for attr, label in _STAT_LABELS
            if spec.is_three_level or attr not in ("comp_l3", "vpc3")]
    if args.format == "json":
        text = json.dumps(_round(dict(rows)), indent=2) + "\n"
    elif args.format == "csv":
        text = ",".join(k for k, _ in rows) + "\n" + ",".join(_fmt(v) for _, v in rows) + "\n"
    else:
        text = "".join(f"{k:<12}{_fmt(v):>16}\n" for k, v in rows)
    _emit(text, args.out)


def cmd_profile(args):
    spec = load_params(args.params)
    profile = stats_profile(spec, _load_data(args))
    text = profile.to_csv(digits=DIGITS)
    _emit(text, args.out)


def cmd_simulate(args):
    spec = load_params(args.params)
    data = simulate_dataset(spec, _sim_config(args, spec), _parse_at(args.at))
    if not args.out:
        raise UserError("simulate needs --out")
    write_csv(data, args.out)


def cmd_verify(args):
    spec = load_params(args.params)
    report = verify(spec, _sim_config(args, spec), _parse_at(args.at))
    text = report.to_json() if args.format == "json" else report.to_table()
    _emit(text, args.out)


def cmd_fit(args):
    dataset = _load_data(args)
    options = FitOptions(n_quad_nodes=args.nodes)
    result = fit_ml(dataset, args.family or "nb2", options)
    doc = _round(result.to_dict())
    _emit(json.dumps(doc, indent=2) + "\n", args.out)
    if not result.converged:
        raise ConvergenceError("optimiser did not converge; best point written")


def cmd_summary(args):
    dataset = load_csv(args.data, Schema.load(args.schema) if args.schema else Schema())
    parts = []
    for by in args.by:
        table = group_summary(dataset, by)
        if args.format == "csv":
            parts.append(f"by,level,n,mean\n" + "".join(
                f"{by},{lvl},{n},{_fmt(m)}\n" for lvl, n, m in table.itertuples(index=False)))
        elif args.format == "json":
            parts.append({"by": by, "groups": [
                {"level": str(lvl), "n": int(n), "mean": _round(float(m))}
                for lvl, n, m in table.itertuples(index=False)]})
        else:
            body = "".join(f"{str(lvl):<12}{n:>10}{_fmt(m):>14}\n" for lvl, n, m in table.itertuples(index=False))
            parts.append(f"{by:<12}{'N':>10}{'mean':>14}\n{body}")
    if args.format == "json":
        text = json.dumps(parts, indent=2) + "\n"
    else:
        text = "\n".join(parts)
    _emit(text, args.out)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="countvpc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(func=func)
        return p

    def params(p):
        p.add_argument("--params", required=True, help="JSON parameter file")

    def data(p):
        p.add_argument("--data", required=True, help="long-format CSV data file")
        p.add_argument("--schema", help="JSON schema declaring column roles")

    def out(p, formats=None):
        p.add_argument("--out", help="output path (default: stdout)")
        if formats:
            p.add_argument("--format", choices=formats, default=formats[0], help="output format")

    def at(p):
        p.add_argument("--at", action="append", metavar="NAME=VALUE",
                       help="covariate value for the evaluated unit (repeatable; others are 0)")

    def sim(p):
        p.add_argument("--clusters", type=int, help="clusters (per supercluster for three levels)")
        p.add_argument("--units", type=int, help="units per cluster")
        p.add_argument("--superclusters", type=int, help="superclusters (three-level models)")
        p.add_argument("--seed", type=int, help="RNG seed (default: $COUNTVPC_SEED or built-in)")
        p.add_argument("--threads", type=int, default=1, help="worker threads for generation")

    p = add("stats", cmd_stats, "marginal statistics for one covariate pattern")
    params(p), at(p), out(p, ["table", "json", "csv"])
    p = add("profile", cmd_profile, "per-observation statistics written as CSV")
    params(p), data(p), out(p, ["csv"])
    p = add("simulate", cmd_simulate, "draw a dataset from a parameter file")
    params(p), at(p), sim(p), out(p)
    p = add("verify", cmd_verify, "compare closed forms with a simulated dataset")
    params(p), at(p), sim(p), out(p, ["table", "json"])
    p = add("fit", cmd_fit, "fit a two-level random-intercept model by ML")
    data(p), out(p, ["json"])
    p.add_argument("--family", choices=[ModelFamily.POISSON.value, ModelFamily.NB2.value],
                   default="nb2", help="response family")
    p.add_argument("--nodes", type=int, default=7, help="adaptive quadrature nodes")
    p = add("summary", cmd_summary, "count and mean response by group")
    data(p), out(p, ["table", "csv", "json"])
    p.add_argument("--by", action="append", required=True, help="grouping column (repeatable)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (UserError, SpecError, DataError, FileNotFoundError, KeyError, ValueError) as exc:
        msg = exc.args[0] if exc.args else exc
        print(f"countvpc {args.command}: error: {msg}", file=sys.stderr)
        return 1
    except (OverflowError, FloatingPointError, ConvergenceError, NumericError) as exc:
        print(f"countvpc {args.command}: numeric failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
