"""Command-line entry point: ``adjfree {run,sweep,table,verify}``.

Exit status is 0 on success, 1 on a runtime failure and 2 on a bad
configuration. Progress goes to stderr; stdout carries only results.
"""
import argparse
import itertools
import json
import logging
import os
import sys

import numpy as np
from pydantic import ValidationError

from .harness import ExperimentConfig, format_float, sweep, write_csv, write_results, write_trace

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

TABLE_HEADER = ["kind", "gamma", "N", "r", "p", "MC", "MLEF", "NODA"]

log = logging.getLogger("adjfree")


class ConfigError(Exception):
    pass


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data, overrides):
    """Apply ``key=value`` strings to a config dict; dotted keys reach nested fields."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        *parents, leaf = key.split(".")
        node = data
        for part in parents:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {part!r} is not a section")
        node[leaf] = _parse_value(value)
    return data


def _validation_message(exc):
    parts = []
    for e in exc.errors():
        loc = ".".join(str(x) for x in e["loc"]) or "<root>"
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def build_config(path, overrides):
    data = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    data = apply_overrides(data, overrides)
    env_seed = os.environ.get("DA_SEED")
    if env_seed is not None:
        try:
            data["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"DA_SEED must be an integer, got {env_seed!r}") from exc
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_validation_message(exc)) from exc


def _grid_values(text, cast):
    try:
        return [cast(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad grid list {text!r}") from exc


def _check_errors(summaries):
    failed = [s for s in summaries if s.error is not None]
    for s in failed:
        print(f"error: {s.config.method} replication {s.replication}: {s.error}", file=sys.stderr)
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_run(args, cfg):
    summaries = sweep([cfg], jobs=args.jobs)
    for s in summaries:
        print(format_float(s.rmse))
    if len(summaries) > 1:
        log.info("mean rmse %s", format_float(np.mean([s.rmse for s in summaries])))
    _write_outputs(args, summaries)
    return _check_errors(summaries)


def cmd_sweep(args, cfg):
    """Cartesian product of the base config over ``--vary key=v1,v2`` options."""
    axes = []
    for item in args.vary:
        key, sep, values = item.partition("=")
        if not sep:
            raise ConfigError(f"--vary {item!r} is not of the form key=v1,v2")
        axes.append([f"{key}={v}" for v in values.split(",")])
    base = cfg.model_dump()
    configs = []
    for combo in itertools.product(*axes):
        try:
            configs.append(ExperimentConfig.model_validate(apply_overrides(base, combo)))
        except ValidationError as exc:
            raise ConfigError(_validation_message(exc)) from exc
    summaries = sweep(configs, jobs=args.jobs)
    for s in summaries:
        c = s.config
        print(f"{c.method} gamma={c.gamma} N={c.N} r={c.r} p={c.p} rep={s.replication} rmse={format_float(s.rmse)}")
    _write_outputs(args, summaries)
    return _check_errors(summaries)


def table_configs(cfg, gammas, radii, sizes, fractions):
    """Configs of the RMSE table grid: MC per cell, MLEF per (gamma, N, p), one NODA."""
    cells = list(itertools.product(gammas, sizes, radii, fractions))
    mc = {c: cfg.model_copy(update=dict(method="MC", gamma=c[0], N=c[1], r=c[2], p=c[3])) for c in cells}
    # MLEF ignores the radius, so each (gamma, N, p) runs once
    mlef = {
        k: cfg.model_copy(update=dict(method="MLEF", gamma=k[0], N=k[1], p=k[2]))
        for k in dict.fromkeys((g, N, p) for g, N, _, p in cells)
    }
    noda = cfg.model_copy(update=dict(method="NODA"))
    return cells, mc, mlef, noda


def cmd_table(args, cfg):
    gammas = _grid_values(args.gammas, int)
    radii = _grid_values(args.radii, int)
    sizes = _grid_values(args.sizes, int)
    fractions = _grid_values(args.fractions, float)
    try:
        cells, mc, mlef, noda = table_configs(cfg, gammas, radii, sizes, fractions)
    except ValidationError as exc:
        raise ConfigError(_validation_message(exc)) from exc
    # model_copy skips validation, so re-check every generated config
    try:
        for c in itertools.chain(mc.values(), mlef.values(), [noda]):
            ExperimentConfig.model_validate(c.model_dump())
    except ValidationError as exc:
        raise ConfigError(_validation_message(exc)) from exc

    configs = list(mc.values()) + list(mlef.values()) + [noda]
    summaries = sweep(configs, jobs=args.jobs)
    reps = cfg.replications
    groups = [summaries[i : i + reps] for i in range(0, len(summaries), reps)]
    means = [float(np.mean([s.rmse for s in g])) for g in groups]
    mc_mean = dict(zip(mc, means[: len(mc)]))
    mlef_mean = dict(zip(mlef, means[len(mc) : len(mc) + len(mlef)]))
    noda_mean = means[-1]

    rows = []
    for g, N, r, p in cells:
        rows.append(["cell", str(g), str(N), str(r), format_float(p),
                     format_float(mc_mean[(g, N, r, p)]), format_float(mlef_mean[(g, N, p)]), ""])
    rows.append(["baseline", "", "", "", "", "", "", format_float(noda_mean)])
    for row in rows:
        print(",".join(row))
    if args.out:
        write_csv(args.out, TABLE_HEADER, rows)
    if args.trace:
        write_trace(args.trace, summaries)
    return _check_errors(summaries)


def cmd_verify(args):
    from . import verify

    try:
        results = verify.run_suites(args.suite or None)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from exc
    status = EXIT_OK
    for name, failures in results.items():
        print(f"{name}: {'PASS' if not failures else 'FAIL'}")
        for msg in failures:
            print(f"  {msg}")
        if failures:
            status = EXIT_RUNTIME
    return status


def _write_outputs(args, summaries):
    if args.out:
        write_results(args.out, summaries, timing=args.timing)
    if args.trace:
        write_trace(args.trace, summaries)


def make_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V",
                        help="override a config field; dotted keys for nested fields; repeatable")
    common.add_argument("--out", help="CSV output path")
    common.add_argument("--trace", help="per-step trace CSV path")
    common.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    common.add_argument("--timing", action="store_true", help="fill the wall_time_s column")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="adjfree", description="Adjoint-free 4D-Var twin experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run one configuration")
    p = sub.add_parser("sweep", parents=[common], help="run a product grid of configurations")
    p.add_argument("--vary", action="append", default=[], metavar="K=V1,V2", help="grid axis; repeatable")
    p = sub.add_parser("table", parents=[common], help="RMSE table over gamma, r, N and p")
    p.add_argument("--gammas", default="1,2,3,4,5,6,7")
    p.add_argument("--radii", default="2,6,18")
    p.add_argument("--sizes", default="20,60")
    p.add_argument("--fractions", default="0.7,1.0")
    p = sub.add_parser("verify", help="run the built-in verification suites")
    p.add_argument("--suite", action="append", help="run only this suite; repeatable")
    return parser


def main(argv=None):
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.command == "verify":
            return cmd_verify(args)
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = build_config(args.config, args.overrides)
        handler = {"run": cmd_run, "sweep": cmd_sweep, "table": cmd_table}[args.command]
        return handler(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
