"""``grcrec`` command line: one subcommand per pipeline stage plus ``run-all``.

Exit codes: 0 success, 1 usage/config error, 2 runtime fault.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from importlib import resources

from .errors import ConfigError, DataFormatError, MissingArtifact

log = logging.getLogger("grcrec")

STAGE_COMMANDS = ["gen-data", "tokenize", "pretrain", "build-sft-corpus", "sft", "rl", "decode", "eval"]
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with 2, which is reserved for runtime faults
        raise UsageError(f"{self.prog}: {message}")


def bundled_config(name: str = "smoke.json") -> str:
    return str(resources.files("grcrec") / "configs" / name)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="experiment JSON (default: bundled smoke config)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value; repeatable")
    common.add_argument("--seed", type=int, help="global seed (same as --set seed=N)")
    common.add_argument("--run-root", help="directory holding run directories")
    common.add_argument("--run-dir", help="use this run directory instead of <run-root>/<config hash>")
    common.add_argument("--force", action="store_true", help="rebuild despite hash mismatches")
    common.add_argument("--threads", type=int, default=1, help="cap on BLAS worker threads")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = _Parser(prog="grcrec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGE_COMMANDS + ["run-all"]:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage" if name != "run-all" else "run every stage")
    sub.add_parser("show-config", parents=[common], help="print the resolved config and its hash")
    return parser


def resolve_config(args):
    from .config import apply_overrides, load_config

    cfg = load_config(args.config or bundled_config())
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.run_root:
        overrides.append(f"run_root={args.run_root}")
    return apply_overrides(cfg, overrides) if overrides else cfg


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("grcrec: --threads must be >= 1", file=sys.stderr)
        return 1
    for var in THREAD_VARS:
        os.environ.setdefault(var, str(args.threads))
    try:
        cfg = resolve_config(args)
        if args.command == "show-config":
            import json

            print(json.dumps({"config_hash": cfg.hash(), "config": cfg.to_dict()}, indent=1, sort_keys=True))
            return 0
        from . import pipeline

        ctx = pipeline.prepare_run_dir(cfg, args.run_dir, args.force)
        if args.command == "run-all":
            pipeline.run_all(ctx)
        else:
            pipeline.run_stage(ctx, args.command)
        print(ctx.run_dir)
        return 0
    except (ConfigError, MissingArtifact, DataFormatError) as exc:
        print(f"grcrec: error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"grcrec: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001  (ContractViolation, NumericalFault, ...)
        log.exception("runtime fault")
        print(f"grcrec: runtime fault: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
