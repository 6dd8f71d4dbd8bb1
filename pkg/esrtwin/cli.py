from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import List, Optional

from esrtwin.config import EXPERIMENT_KINDS, load_config
from esrtwin.errors import (
    ConfigError,
    DataFormatError,
    EsrTwinError,
    ManifestError,
    ValidationError,
)

logger = logging.getLogger("esrtwin")

EXIT_OK = 0
EXIT_DRIFT = 1
EXIT_SCHEMA = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

LOG_FORMAT = "%(levelname)s %(name)s: %(message)s"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="esrtwin", description="Simulated pulsed ESR experiments on Bi:Si donors."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment from a config file")
    run.add_argument("kind", choices=EXPERIMENT_KINDS)
    run.add_argument("--config", required=True, help="YAML file or bundled config name")
    run.add_argument("--out", default=None, help="output directory (default: output.directory)")
    run.add_argument("--seed-override", type=int, default=None, help="replace the noise seed")
    run.add_argument("--threads", type=int, default=1)
    run.add_argument("--log-level", default="WARNING")

    rep = sub.add_parser("replay", help="re-run a results directory and compare outputs")
    rep.add_argument("results_dir")
    rep.add_argument("--seed-override", type=int, default=None)
    rep.add_argument("--threads", type=int, default=1)
    rep.add_argument("--log-level", default="WARNING")
    return parser


def _classify(err: BaseException) -> tuple:
    """(exit code, error kind, path) for a failure."""
    if isinstance(err, ConfigError):
        return EXIT_SCHEMA, err.kind, err.path
    if isinstance(err, (DataFormatError, ManifestError)):
        path = getattr(err, "source", None) or err.diagnostics.get("path", "")
        return EXIT_IO, err.kind, path or ""
    if isinstance(err, ValidationError):
        return EXIT_SCHEMA, err.kind, ""
    if isinstance(err, EsrTwinError):
        return EXIT_NUMERIC, err.kind, ""
    if isinstance(err, OSError):
        return EXIT_IO, "io", getattr(err, "filename", None) or ""
    if isinstance(err, (RuntimeError, ArithmeticError)):
        return EXIT_NUMERIC, "numeric", ""
    return EXIT_SCHEMA, "value", ""


def _report_error(err: BaseException) -> int:
    code, kind, path = _classify(err)
    message = " ".join(str(err).split())
    print(f"esrtwin: error={kind} code={code} path={path} msg={message}", file=sys.stderr)
    return code


def _run(args: argparse.Namespace) -> int:
    from esrtwin.io.experiments import run_experiment

    config = load_config(args.config)
    if args.seed_override is not None:
        config = config.with_seed(args.seed_override)
    manifest = run_experiment(config, args.out, threads=args.threads, kind=args.kind)
    print(manifest.parent)
    return EXIT_OK


def _replay(args: argparse.Namespace) -> int:
    from esrtwin.io.experiments import replay

    report = replay(args.results_dir, seed_override=args.seed_override, threads=args.threads)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK if report.all_match else EXIT_DRIFT


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
        format=LOG_FORMAT,
        stream=sys.stderr,
    )
    try:
        return _run(args) if args.command == "run" else _replay(args)
    except (EsrTwinError, ValueError, OSError, RuntimeError, ArithmeticError) as err:
        logger.debug("failure", exc_info=True)
        return _report_error(err)


if __name__ == "__main__":
    sys.exit(main())
