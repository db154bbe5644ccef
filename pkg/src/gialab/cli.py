"""Command-line driver: ``gialab run|compare|sweep|selftest``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

from .config import ConfigError, ExperimentConfig, apply_overrides, load_config
from .harness import sweep, write_results
from .selftest import run_selftest
from .vgia.config import AttackConfig


def _workers(args, cfg: ExperimentConfig) -> int:
    if args.workers is not None:
        return max(1, args.workers)
    if cfg.workers is not None:
        return max(1, int(cfg.workers))
    env = os.environ.get("GIA_LAB_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"GIA_LAB_WORKERS must be an integer, got {env!r}") from None
    return 1


def _experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.outdir is not None:
        cfg = replace(cfg, outdir=args.outdir)
    return cfg


def _execute(cfg: ExperimentConfig, cells, workers: int, strict: bool) -> int:
    result = sweep(cells, cfg.seeds, workers=workers, record_timing=cfg.record_timing)
    effective = cfg.to_dict()
    effective["sweep"]["workers"] = workers
    path = write_results(cfg.outdir, result, effective)
    for row in result.rows:
        if row["status"] == "ok":
            print(
                f"{row['cell']} {row['method']} seed={row['seed']}: correct={row['n_correct']} "
                f"spurious={row['n_spurious']} rounds_to_verifiability={row['rounds_to_verifiability']}"
            )
    print(f"results written to {path}")
    if result.failures:
        label, seed, reason = result.failures[0]
        print(f"error: {len(result.failures)} run(s) failed; first: {label} seed {seed}: {reason}", file=sys.stderr)
        return 1 if strict or len(result.failures) == len(result.rows) else 0
    return 0


def cmd_run(args) -> int:
    cfg = _experiment(args)
    if cfg.grid:
        raise ConfigError("config has sweep axes; use the sweep command")
    methods = cfg.methods
    if "methods" not in cfg.raw.get("run", {}) and cfg.ctp is not None:
        methods = ("vgia", "ctp")
    return _execute(cfg, cfg.cells(methods), _workers(args, cfg), strict=True)


def cmd_compare(args) -> int:
    cfg = _experiment(args)
    if cfg.ctp is None:
        raise ConfigError("compare needs a [ctp] section")
    return _execute(cfg, cfg.cells(("vgia", "ctp")), _workers(args, cfg), strict=True)


def cmd_sweep(args) -> int:
    cfg = _experiment(args)
    return _execute(cfg, cfg.cells(), _workers(args, cfg), strict=False)


def cmd_selftest(args) -> int:
    raw = apply_overrides({}, args.set)
    unsupported = [s for s in raw if s != "attack"]
    if unsupported:
        raise ConfigError(f"selftest only takes attack.* overrides, got [{unsupported[0]}]")
    try:
        attack = AttackConfig(**raw.get("attack", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[attack] {exc}") from None
    results = run_selftest(attack, seed=args.seed or 0)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    failed = sum(not ok for _, ok, _ in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gialab", description="Verifiable gradient inversion lab")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, metavar="PATH", help="experiment config file")
            p.add_argument("--outdir", metavar="PATH", help="override run.outdir")
            p.add_argument("--workers", type=int, metavar="N", help="parallel runs (default $GIA_LAB_WORKERS or 1)")
        p.add_argument("--seed", type=int, metavar="N", help="run only this seed")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override section.key=value")

    for name, fn, text in (
        ("run", cmd_run, "run the attack (and the baseline if [ctp] is configured)"),
        ("compare", cmd_compare, "paired attack/baseline runs sharing w and data"),
        ("sweep", cmd_sweep, "run every point of the [sweep] grid"),
    ):
        p = sub.add_parser(name, help=text)
        common(p)
        p.set_defaults(func=fn)
    p = sub.add_parser("selftest", help="fast built-in correctness checks")
    common(p, needs_config=False)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
