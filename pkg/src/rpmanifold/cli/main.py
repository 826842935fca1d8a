"""Command-line entry point.

Exit codes: 0 pass, 1 acceptance failure, 2 invalid config, 3 runtime error.
"""

import argparse
import json
import os
import sys
import time
from datetime import datetime, timezone
from fractions import Fraction

from ..schedules import RegularityTriple
from ..sgd import run_replications
from .. import stats as st
from . import experiments as ex
from .artifacts import write_outputs
from .config import ConfigError, ExperimentConfig

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


def _simulate(cfg, workers=1, force=False):
    spec = cfg.build_spec()
    gate = ex.feasibility_gate(cfg, {"main": cfg.schedule}, force)
    trajs = run_replications(spec, cfg.seed, cfg.replications, workers)
    used = [tr for tr in trajs if ex._usable(tr)]
    report = st.ExperimentReport(samples=len(used), excluded=len(trajs) - len(used),
                                 max_excluded_fraction=cfg.tube["max_excluded_fraction"])
    report.extra["exclusions"] = ex._exclusions(trajs)
    report.extra["final_distance_mean"] = float(sum(tr.dist[-1] for tr in used) / max(len(used), 1))
    header = ["replication", "horizon"] + [f"x{i}" for i in range(spec.problem.dim)]
    return ex.Outcome(report.to_dict(), report.passed,
                      {"deviations.csv": (header, ex._deviation_rows(trajs))}, gate)


COMMANDS = {
    "clt-check": ex.run_clt_experiment,
    "rate-check": ex.run_rate_experiment,
    "rho-sweep": lambda cfg, workers, force: ex.run_rho_sweep(cfg, workers=workers, force=force),
    "linear-oracle": ex.run_linear_oracle,
    "simulate": _simulate,
}


def _fraction(text):
    try:
        return Fraction(text)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="master seed (u64), overrides the config")
    common.add_argument("--out", help="output directory, overrides the config")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    common.add_argument("--force", action="store_true",
                        help="run even if the schedule fails the assumption checks")

    ap = argparse.ArgumentParser(prog="rpmanifold", parents=[common],
                                 description="Averaged stochastic approximation experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    fr = sub.add_parser("feasible-region", parents=[common],
                        help="admissible exponents for a regularity triple")
    fr.add_argument("alphas", nargs=3, type=_fraction, metavar="ALPHA",
                    help="alpha_f alpha_phi alpha_psi, e.g. 1/2 1 2/3")
    fr.add_argument("--gamma", type=_fraction)
    fr.add_argument("--rho", type=_fraction)
    return ap


def _load(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        cfg = cfg.replace(seed=args.seed)
    if args.out is not None:
        cfg = cfg.replace(out=args.out)
    return cfg


def _feasible_region(args):
    try:
        r = RegularityTriple(*args.alphas)
        region = ex.feasible_region(r, args.gamma, args.rho)
    except ValueError as e:
        print(f"invalid input: {e}", file=sys.stderr)
        return EXIT_CONFIG
    g = region["gamma_interval"]
    print(f"gamma in ({g['lower']:g}, {g['upper']:g})")
    if "rho_interval" in region:
        print(f"rho in ({region['rho_interval']['lower']:g}, inf)")
    if "beta_interval" in region:
        b = region["beta_interval"]
        print(f"beta in ({b.get('lower_exact', b['lower'])}, {b['upper']:g})")
    print(json.dumps(region, indent=2, sort_keys=True))
    return EXIT_PASS


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "feasible-region":
        return _feasible_region(args)
    try:
        cfg = _load(args)
        started = datetime.now(timezone.utc)
        t0 = time.perf_counter()
        outcome = COMMANDS[args.command](cfg, workers=max(1, args.workers), force=args.force)
    except ConfigError as e:
        print(f"invalid config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - mapped to the runtime exit code
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    out_dir = cfg.out or os.path.join("runs", args.command)
    try:
        mismatched = write_outputs(out_dir, args.command, cfg, outcome, started,
                                   time.perf_counter() - t0, args.force, args.workers)
    except OSError as e:
        print(f"runtime error: cannot write outputs: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    if mismatched:
        print(f"runtime error: outputs differ from the previous identical run: {mismatched}",
              file=sys.stderr)
        return EXIT_RUNTIME
    for c in outcome.report.get("criteria", []):
        mark = "PASS" if c["passed"] else "FAIL"
        print(f"{mark} {c['name']}: {c['value']:.6g} (threshold {c['threshold']:.6g})")
    if outcome.report.get("invalid"):
        print(f"INVALID: excluded fraction {outcome.report['excluded_fraction']:.3g} "
              f"exceeds {outcome.report['max_excluded_fraction']:.3g}")
    print(f"outputs in {out_dir}")
    return EXIT_PASS if outcome.passed else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
