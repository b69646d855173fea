"""``masdt`` command line: one pipeline stage per invocation.

Config overrides are dotted flags, e.g. ``--fusion.alpha 0.7`` or
``--train.epochs 5``; they apply on top of ``--config`` and the defaults.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Tuple

from masdt import pipeline
from masdt.checkpoint import CheckpointError
from masdt.config import ConfigError, RunConfig, load_config, parse_value

logger = logging.getLogger("masdt")

SUBCOMMANDS = ("synth", "flow", "pretrain", "finetune", "evaluate", "gradcam", "alpha-sweep", "ablate")


def _common(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", type=Path, default=d(None), help="JSON run configuration")
    parser.add_argument("--seed", type=int, default=d(None), help="override the global seed")
    parser.add_argument("--out", type=Path, default=d(None),
                        help="output root (default: $MASDT_OUT or ./masdt_out)")
    parser.add_argument("--jobs", type=int, default=d(1), help="worker processes for per-clip stages")
    parser.add_argument("--force", action="store_true", default=d(False), help="overwrite existing outputs")
    parser.add_argument("--print-config", action="store_true", default=d(False),
                        help="print the effective configuration and exit")
    parser.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="masdt", description="Two-branch masked-autoencoder deepfake detector.")
    _common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    helps = {
        "synth": "generate the synthetic paired dataset",
        "flow": "precompute the optical-flow cache",
        "pretrain": "masked-autoencoder pre-training of one branch",
        "finetune": "supervised fine-tuning of both branches",
        "evaluate": "score the test split and write the report",
        "gradcam": "spatial-branch saliency maps on fake test clips",
        "alpha-sweep": "fusion weight sweep on the validation split",
        "ablate": "spatial-only vs score fusion vs feature fusion",
    }
    subs = {}
    for name in SUBCOMMANDS:
        subs[name] = sub.add_parser(name, help=helps[name], description=helps[name])
        _common(subs[name], suppress=True)
    subs["pretrain"].add_argument("--branch", choices=pipeline.BRANCHES, required=True)
    subs["finetune"].add_argument("--branch", choices=pipeline.BRANCHES, default=None,
                                  help="fine-tune one branch only (default: both)")
    subs["finetune"].add_argument("--from-scratch", action="store_true",
                                  help="skip pre-trained weights")
    subs["evaluate"].add_argument("--mode", choices=("score", "feature", "spatial_only"), default=None)
    subs["evaluate"].add_argument("--trace", action="store_true", help="also write per-frame scores")
    return parser


def _is_override(token: str) -> bool:
    return token.startswith("--") and "." in token[2:].split("=", 1)[0]


def extract_overrides(argv: List[str]) -> Tuple[List[str], List[str]]:
    """Separate dotted ``--section.key value`` tokens from the argparse arguments."""
    rest, found, i = [], [], 0
    while i < len(argv):
        token = argv[i]
        if _is_override(token):
            take = 1 if "=" in token else 2
            found.extend(argv[i:i + take])
            i += take
        else:
            rest.append(token)
            i += 1
    return rest, found


def split_overrides(extra: List[str]) -> List[Tuple[str, object]]:
    """``['--fusion.alpha', '0.7']`` -> ``[('fusion.alpha', 0.7)]``; also accepts ``--key=value``."""
    pairs, i = [], 0
    while i < len(extra):
        token = extra[i]
        if not _is_override(token):
            raise ConfigError(token, "unrecognized argument")
        if "=" in token:
            key, value = token[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(token[2:], "missing value")
            key, value = token[2:], extra[i + 1]
            i += 2
        pairs.append((key, parse_value(value)))
    return pairs


def resolve_config(args, extra: List[str]) -> RunConfig:
    overrides = split_overrides(extra)
    if args.seed is not None:
        overrides.append(("seed", args.seed))
    return load_config(args.config, overrides)


def output_root(args) -> Path:
    if args.out is not None:
        return args.out
    return Path(os.environ.get("MASDT_OUT", "masdt_out"))


def dispatch(command: str, args, config: RunConfig) -> None:
    ws = pipeline.Workspace(output_root(args), force=args.force)
    jobs = max(1, args.jobs)
    if command == "synth":
        print(pipeline.stage_synth(ws, config, jobs))
    elif command == "flow":
        print(f"{pipeline.stage_flow(ws, config, jobs)} flow fields")
    elif command == "pretrain":
        print(pipeline.stage_pretrain(ws, config, args.branch))
    elif command == "finetune":
        branches = (args.branch,) if args.branch else pipeline.BRANCHES
        for path in pipeline.stage_finetune(ws, config, branches, args.from_scratch):
            print(path)
    elif command == "evaluate":
        written = pipeline.stage_evaluate(ws, config, args.mode, args.trace)
        print(written["predictions.csv"])
    elif command == "gradcam":
        print(pipeline.stage_gradcam(ws, config)["summary.json"])
    elif command == "alpha-sweep":
        print(pipeline.stage_alpha_sweep(ws, config)["alpha_sweep.csv"])
    elif command == "ablate":
        print(pipeline.stage_ablate(ws, config)["ablation.csv"])


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    argv, extra = extract_overrides(argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors, unknown subcommands, --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args, extra)
    except ConfigError as exc:
        print(f"masdt: config error: {exc}", file=sys.stderr)
        return 2
    if args.print_config:
        print(config.to_json())
        return 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    print(f"seed={config.seed} fingerprint={config.fingerprint}", file=sys.stderr)
    try:
        dispatch(args.command, args, config)
    except (pipeline.StageError, CheckpointError, ValueError, OSError) as exc:
        print(f"masdt {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
