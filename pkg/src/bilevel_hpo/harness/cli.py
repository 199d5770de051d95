"""Command-line entry point.

Exit status: 0 on success, 1 for configuration or I/O errors, 2 for numeric
failures (including a failed gradient or curse-of-dimensionality check).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml

from .. import bounds
from ..errors import ContractViolation, NumericError
from .config import PROFILES, TASKS, ConfigError, load_config, parse_seeds
from .gradcheck import TOLERANCE, gradcheck_task
from .sweep import ensure_writable, run_sweep

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2


def _add_run_args(p):
    p.add_argument("--config", type=Path, help="YAML experiment file")
    p.add_argument("--task", choices=TASKS, help="override the task named in the config")
    p.add_argument("--out", help="output directory for CSVs")
    p.add_argument("--seeds", help="comma-separated seeds (beats BILEVEL_SEED and the config)")
    p.add_argument("--profile", choices=PROFILES, help="size profile for defaults")
    p.add_argument("--workers", type=int, help="parallel worker processes")


def build_parser():
    parser = argparse.ArgumentParser(prog="bilevel-hpo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_ in (("run-ud", "unrolled differentiation sweep"), ("run-cv", "random-search CV sweep")):
        _add_run_args(sub.add_parser(name, help=help_))

    p = sub.add_parser("bounds", help="evaluate the stability and generalization bounds")
    p.add_argument("inputs", nargs="?", type=Path, help="YAML mapping of bound inputs")
    p.add_argument("--set", action="append", default=[], metavar="NAME=VALUE", help="override one input")
    p.add_argument("--out", type=Path, help="write the report here instead of stdout")

    p = sub.add_parser("gradcheck", help="compare hypergradients with finite differences")
    p.add_argument("--task", choices=sorted(TOLERANCE), default="scalar_quadratic")
    p.add_argument("--sizes", default="", help="e.g. n=8,m=4,hidden=8,K=4")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("cod-check", help="Monte-Carlo check of the random-search rate")
    p.add_argument("--dims", default="1,2,5")
    p.add_argument("--T", dest="horizons", default="10,100,1000")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _int_list(text, name):
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{name}: expected comma-separated integers, got {text!r}") from None
    if not values:
        raise ConfigError(f"{name}: empty list")
    return values


def _parse_sizes(text):
    sizes = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"sizes: expected NAME=VALUE, got {item!r}")
        try:
            sizes[key.strip()] = float(value) if "." in value else int(value)
        except ValueError:
            raise ConfigError(f"sizes.{key.strip()}: not a number: {value!r}") from None
    return sizes


def cmd_run(args, algorithm):
    overrides = {}
    if args.seeds is not None:
        overrides["seeds"] = parse_seeds(args.seeds)
    if args.out is not None:
        overrides["out"] = args.out
    if args.workers is not None:
        overrides["workers"] = args.workers
    config = load_config(args.config, task=args.task, profile=args.profile, overrides=overrides)
    paths = run_sweep(config, algorithm)
    print(f"wrote {len(paths)} files to {paths[-1].parent}")
    return EXIT_OK


def read_bound_inputs(path=None, assignments=()):
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as err:
            raise ConfigError(f"inputs: cannot read {path}: {err.strerror}") from None
        except yaml.YAMLError as err:
            raise ConfigError(f"inputs: invalid YAML: {err}") from None
        if not isinstance(raw, dict):
            raise ConfigError("inputs: expected a mapping of NAME: VALUE")
    for item in assignments:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set: expected NAME=VALUE, got {item!r}")
        raw[key.strip()] = yaml.safe_load(value)
    known = {f.name: f.type for f in fields(bounds.BoundInputs)}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"{key}: unknown bound input")
        if known[key] == "int" and isinstance(value, float) and value.is_integer():
            raw[key] = int(value)
    try:
        return bounds.BoundInputs(**raw)
    except ContractViolation as err:
        raise ConfigError(str(err)) from None


def bound_report(inputs):
    """Plain-text report of every bound applicable to ``inputs``."""
    sgd = bounds.ud_sgd_beta(inputs)
    gd = bounds.ud_gd_beta(inputs)
    reports = [
        sgd,
        bounds.generalization_gap_bound(sgd.value),
        gd,
        bounds.gd_hp_bound(inputs, gd.value),
        bounds.cv_gap_bound(inputs),
    ]
    growth = bounds.lipschitz_growth_order(inputs)
    lines = ["# inputs"]
    lines += [f"{f.name} = {getattr(inputs, f.name)!r}" for f in fields(inputs)]
    lines.append("# bounds")
    lines += [r.format() for r in reports]
    lines.append(f"cod_bound(L, d, T) = {bounds.cod_bound(inputs.L, inputs.d, inputs.T):.10g}  [ok]")
    lines.append(f"kappa = {bounds.kappa(inputs):.10g}")
    lines.append(
        f"lipschitz_growth_order: L ~ {growth.L_base:.6g}^{growth.K} = {growth.L_growth:.6g}, "
        f"gamma ~ {growth.gamma_base:.6g}^{growth.K} = {growth.gamma_growth:.6g}  (order only)"
    )
    return "\n".join(lines) + "\n"


def cmd_bounds(args):
    if args.out is not None:
        ensure_writable(args.out.parent if str(args.out.parent) else Path("."))
    text = bound_report(read_bound_inputs(args.inputs, args.set))
    if args.out is None:
        sys.stdout.write(text)
    else:
        args.out.write_text(text)
    return EXIT_OK


def cmd_gradcheck(args):
    try:
        report = gradcheck_task(args.task, _parse_sizes(args.sizes), args.seed)
    except ContractViolation as err:
        raise ConfigError(str(err)) from None
    print(report.format())
    return EXIT_OK if report.passed else EXIT_NUMERIC


def sup_norm(lam):
    return np.abs(lam).max(axis=-1)


def cmd_cod_check(args):
    dims = _int_list(args.dims, "dims")
    horizons = _int_list(args.horizons, "T")
    if args.trials < 2:
        raise ConfigError("trials: must be >= 2")
    ok = True
    print("d,T,mean_min,stderr,bound,holds")
    for d in dims:
        for T in horizons:
            r = bounds.cod_montecarlo(sup_norm, 1.0, d, T, args.trials, seed=[args.seed, d, T])
            ok &= r.holds
            print(f"{d},{T},{r.mean_min:.6g},{r.stderr:.3g},{r.bound:.6g},{r.holds}")
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {
    "run-ud": lambda a: cmd_run(a, "ud"),
    "run-cv": lambda a: cmd_run(a, "cv"),
    "bounds": cmd_bounds,
    "gradcheck": cmd_gradcheck,
    "cod-check": cmd_cod_check,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ContractViolation) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
