"""``fedsub`` command line.

Subcommands: ``run``, ``validate``, ``stepsize`` and ``export-data``, each
taking a JSON spec. The output directory comes from ``--out``, then the
spec's ``output`` field, then ``$FEDSUB_OUT``, then ``./fedsub-out``.

Exit codes: 0 on success (divergence during ``run`` is data, not an error),
1 when a validator check fails, 2 for an invalid spec or command line.
"""
from __future__ import annotations

import argparse
import sys

from . import __version__
from .experiment import (OUT_ENV, SpecError, export_data, load_spec, resolve_output, run_experiment,
                         theory_stepsize, validate, write_checks)
from .federation import Engine
from .kernels import BACKEND


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return value


def _engine(text: str) -> str:
    try:
        return Engine.parse(text).value
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("spec", help="experiment spec (JSON)")
    common.add_argument("--out", help=f"output directory (default: spec 'output', ${OUT_ENV}, ./fedsub-out)")
    common.add_argument("--seed", type=_u64, help="override the master seed")
    common.add_argument("--threads", type=_positive, default=1, help="worker threads for sweep cells")
    common.add_argument("--engine", type=_engine, help="override the engine of every cell")

    p = argparse.ArgumentParser(prog="fedsub", description="Subspace federated optimization experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__} ({BACKEND} kernels)")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", parents=[common], help="run every sweep cell, write CSVs and summary.csv")
    run.add_argument("--no-timing", action="store_true",
                     help="write wall_ms as 0 so repeated runs give byte-identical CSVs")
    val = sub.add_parser("validate", parents=[common], help="run the validator suite")
    val.add_argument("--debug-corrupt-cd-scaling", action="store_true",
                     help="negative control: drop the sqrt(m/r) factor from CD projections")
    val.add_argument("--samples", type=_positive, default=20_000, help="Monte-Carlo draws per projection check")
    sub.add_parser("stepsize", parents=[common], help="evaluate the theoretical step-size conditions")
    sub.add_parser("export-data", parents=[common], help="write the synthetic dataset, one CSV per client")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = load_spec(args.spec)
        spec = spec.with_overrides(seed=args.seed, engine=args.engine)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SpecError as exc:
        print(f"error: invalid spec {args.spec}: {exc}", file=sys.stderr)
        return 2
    out = resolve_output(spec, args.out)

    if args.command == "run":
        results = run_experiment(spec, out, threads=args.threads,
                                 timing=False if args.no_timing else None)
        diverged = sum(r.status != "ok" for r in results)
        print(f"wrote {len(results)} cell CSVs and summary.csv to {out}"
              + (f" ({diverged} diverged)" if diverged else ""))
        return 0

    if args.command == "validate":
        checks = validate(spec, corrupt_cd_scaling=args.debug_corrupt_cd_scaling, n_samples=args.samples)
        width = max(len(c.name) for c in checks)
        for c in checks:
            status = "pass" if c.passed else "FAIL"
            print(f"{status}  {c.name:<{width}s}  value={c.value:.3e}  tol={c.tolerance:.3e}  {c.detail}")
        out.mkdir(parents=True, exist_ok=True)
        write_checks(checks, out / "validate.csv")
        failed = [c.name for c in checks if not c.passed]
        print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
        return 1 if failed else 0

    if args.command == "stepsize":
        for line in theory_stepsize(spec).lines():
            print(line)
        return 0

    if args.command == "export-data":
        try:
            paths = export_data(spec, out)
        except SpecError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        print(f"wrote {len(paths)} client files to {out}")
        return 0
    return 2


if __name__ == "__main__":
    sys.exit(main())
