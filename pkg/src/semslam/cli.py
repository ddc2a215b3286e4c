"""Command-line entry point: ``semslam <subcommand> --seed N [--config FILE] [--out DIR]``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
Logs go to stderr as JSON lines; stdout carries only the path of the main
artifact written.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path

from . import pipeline
from .errors import ConfigInvalid, SemSlamError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

STAGE_OUTPUT = {
    "simulate": "scene",
    "segment": "assignment",
    "init": "init",
    "refine": "refined",
    "evaluate": "report",
    "export-plot": "plots",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail(EXIT_CONFIG, "ConfigInvalid", message)


def _fail(code, kind, message, **extra):
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exitCode": code, **extra},
                                sort_keys=True) + "\n")
    raise SystemExit(code)


def bundled_config(name="default"):
    return resources.files("semslam") / "configs" / f"{name}.json"


def _resolve_config(args, path=None):
    """Explicit --config, else the config saved in the run directory, else the bundled default."""
    if path is None:
        path = args.config[0] if args.config else None
    if path is None and args.out is not None and (Path(args.out) / "config.json").exists():
        path = Path(args.out) / "config.json"
    if path is None:
        path = bundled_config()
    cfg = pipeline.load_config(path, seed=args.seed)
    if args.name:
        cfg.name = args.name
    return cfg


def build_parser():
    parser = _Parser(prog="semslam", description="Dynamic-scene reconstruction experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    names = list(STAGE_OUTPUT) + ["ablate", "run"]
    for name in names:
        p = sub.add_parser(name)
        p.add_argument("--seed", type=int, required=True)
        p.add_argument("--config", action="append",
                       help="experiment JSON; repeat for ablate (rows in the given order)")
        p.add_argument("--out", help="run directory (default: runs/<name>-<seed>)")
        p.add_argument("--name", help="override the run name")
        p.add_argument("--verbose", action="store_true", help="log solver iterations")
    return parser


def _setup_logging(verbose):
    log = logging.getLogger("semslam")
    log.handlers.clear()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.DEBUG if verbose else logging.INFO)
    log.propagate = False


def _dispatch(args):
    if args.command == "ablate":
        if not args.config or len(args.config) < 2:
            raise ConfigInvalid("config", "ablate needs at least two --config files")
        configs = [_resolve_config(args, path) for path in args.config]
        out = Path(args.out or f"runs/ablation-{args.seed}")
        return pipeline.run_ablation(configs, out)
    cfg = _resolve_config(args)
    out = Path(args.out or f"runs/{cfg.name}-{args.seed}")
    if args.command == "run":
        return pipeline.run_pipeline(cfg, out)
    pipeline.STAGES[args.command](cfg, out)
    return getattr(pipeline.RunPaths(out), STAGE_OUTPUT[args.command])


def main(argv=None):
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    try:
        path = _dispatch(args)
    except ConfigInvalid as e:
        _fail(EXIT_CONFIG, "ConfigInvalid", str(e), field=e.field)
    except (OSError, json.JSONDecodeError, KeyError) as e:
        _fail(EXIT_IO, type(e).__name__, str(e))
    except (SemSlamError, ArithmeticError, ValueError) as e:
        extra = {k: v for k, v in vars(e).items() if isinstance(v, (int, str, float))}
        _fail(EXIT_NUMERIC, type(e).__name__, str(e), **extra)
    sys.stdout.write(f"{path}\n")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
