"""Command-line entry points: run, simulate, export.

Exit codes: 0 success, 2 configuration error, 3 run aborted (too many
diverged rollouts).
"""

from __future__ import annotations

import argparse
import sys

from .experiments import ConfigError, builtin_config_path, cmd_export, cmd_run, \
    cmd_simulate, load_config, parse_overrides
from .optimizer import RunAbortedError


def _resolve_config(name_or_path: str):
    builtin = builtin_config_path(name_or_path)
    return builtin if builtin.exists() else name_or_path


def _add_config_args(p):
    p.add_argument("--config", required=True,
                   help="path to a config JSON, or the name of a shipped config "
                        "(heat1d, burgers1d, nagumo, euler_bernoulli, heat2d, "
                        "softlimb, or their *_desk variants)")
    p.add_argument("--override", nargs="*", default=[], metavar="KEY=VALUE",
                   help="config overrides; shorthands K R J T dt rho N seed")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stso",
        description="Joint policy and actuator co-design optimization "
                    "for stochastic PDE testbeds.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train policy and actuator design")
    _add_config_args(p_run)
    p_run.add_argument("--out", default="runs/latest", help="output directory")
    p_run.add_argument("--resume", default=None, help="checkpoint file to resume from")

    p_sim = sub.add_parser("simulate", help="roll out a zero or trained policy")
    _add_config_args(p_sim)
    p_sim.add_argument("--policy", default="zero",
                       help="'zero' or a checkpoint path")
    p_sim.add_argument("--rollouts", type=int, default=8)
    p_sim.add_argument("--out", default="runs/simulate", help="output directory")

    p_exp = sub.add_parser("export", help="emit plot-ready CSV from a run directory")
    p_exp.add_argument("--run-dir", required=True)
    p_exp.add_argument("--kind", required=True,
                       choices=["contour", "final_snapshot", "convergence"])
    p_exp.add_argument("--out", default=None, help="destination CSV path")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "export":
            dest = cmd_export(args.run_dir, args.kind, args.out)
            print(f"wrote {dest}")
            return 0
        overrides = parse_overrides(args.override)
        if args.seed is not None:
            overrides["seed"] = args.seed
        cfg = load_config(_resolve_config(args.config), overrides)
        if args.command == "run":
            out = cmd_run(cfg, args.out, resume=args.resume)
            print(f"run complete; artifacts in {out}")
            return 0
        if args.command == "simulate":
            out = cmd_simulate(cfg, args.policy, args.rollouts, args.out)
            print(f"wrote {args.rollouts} rollouts to {out}")
            return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except RunAbortedError as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
