"""Command line entry point.

Subcommands::

    bounds  MANIFEST --out BOUNDS.json     derive Jacobian bounds
    synth   MANIFEST --out GAINS.json      synthesize certified observer gains
    verify  --gains GAINS.json             re-check a gains file
    run     --scenario SCENARIO.json       closed-loop run, CSV telemetry

Failures print one JSON object on stderr, e.g.
``{"error": "infeasible", "message": "..."}``, and exit nonzero.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .integrator import StiffnessError
from .lmi import LmiInfeasibleError, verify_gains
from .manifest import (ManifestError, load_gains, load_model_manifest, save_bounds, save_gains,
                       synthesize)
from .model_core import DomainError
from .sim import load_scenario, run_scenario

EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_VERIFY = 4
EXIT_RUNTIME = 5


class _Fail(Exception):
    def __init__(self, code: int, kind: str, message: str, **extra):
        super().__init__(message)
        self.code, self.kind, self.extra = code, kind, extra


def _error_line(kind: str, message: str, **extra) -> str:
    return json.dumps({"error": kind, "message": message, **extra}, sort_keys=True)


def cmd_bounds(args):
    m = load_model_manifest(args.manifest)
    b = m.build_bounds()
    save_bounds(args.out, b)
    print(f"bounds written to {args.out}")


def cmd_synth(args):
    m = load_model_manifest(args.manifest)
    try:
        gf = synthesize(m)
    except LmiInfeasibleError as exc:
        raise _Fail(EXIT_INFEASIBLE, "infeasible", str(exc), best_margin=exc.best_margin) from None
    save_gains(args.out, gf)
    print(f"certified: max_eig={gf.gains.certified_margin:.6e}; gains written to {args.out}")


def cmd_verify(args):
    gf = load_gains(args.gains)
    report = verify_gains(gf.gains, gf.problem())
    print(report)
    if not report.passed:
        raise _Fail(EXIT_VERIFY, "verify_failed", "; ".join(report.messages),
                    max_eig=report.max_eig)


def cmd_run(args):
    sc = load_scenario(args.scenario)
    if args.gains is not None:
        sc.gains_file = Path(args.gains)
    if args.tol is not None:
        sc.tol = args.tol
    if args.seed is not None:
        sc.seed = args.seed
    if args.out is not None:
        sc.output = Path(args.out)
    if sc.output is None:
        raise ManifestError(args.scenario, "output", "no output path (use --out)")
    sc.validate()
    try:
        log = run_scenario(sc)
    except LmiInfeasibleError as exc:
        raise _Fail(EXIT_INFEASIBLE, "infeasible", str(exc)) from None
    except StiffnessError as exc:
        raise _Fail(EXIT_RUNTIME, "stiffness", str(exc)) from None
    print(f"{log.t.size} rows written to {sc.output}; events={len(log.event_times)} "
          f"purges={len(log.purge_times)} |x_err(tf)|={log.x_err_norm[-1]:.3e} "
          f"|theta_err(tf)|={log.theta_err_norm[-1]:.3e}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cl-observer", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bounds", help="model manifest -> bounds file")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("synth", help="model manifest -> gains file")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("verify", help="gains file -> margin report")
    p.add_argument("--gains", required=True)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("run", help="scenario file -> CSV run log")
    p.add_argument("--scenario", required=True)
    p.add_argument("--gains", help="gains file (overrides the scenario)")
    p.add_argument("--out", help="CSV path (overrides the scenario)")
    p.add_argument("--tol", type=float, help="integrator tolerance")
    p.add_argument("--seed", type=int, help="seed for randomized scenarios")
    p.set_defaults(func=cmd_run)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except _Fail as exc:
        print(_error_line(exc.kind, str(exc), **exc.extra), file=sys.stderr)
        return exc.code
    except ManifestError as exc:
        print(_error_line("parse", str(exc), field=exc.field, location=exc.location),
              file=sys.stderr)
        return EXIT_CONFIG
    except DomainError as exc:
        print(_error_line("domain", str(exc)), file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(_error_line("io", str(exc)), file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
