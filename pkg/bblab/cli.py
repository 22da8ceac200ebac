"""Command line entry point: ``bblab <command> [--config ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from pydantic import ValidationError

from bblab import settings
from bblab.blowup import classify_profiles, shooting_oracle
from bblab.errors import BBLabError, DegenerateInput
from bblab.models import ExperimentConfig
from bblab.persistence import write_json
from bblab.runner import StatusBoard, start_experiment
from bblab.state import validate_spec
from bblab.suite import SCALES, run_suite

logger = logging.getLogger("bblab")

COMMANDS = ("validate", "solve", "optimize", "weiss", "blowup", "boundary", "suite")


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="worker threads (default BBLAB_THREADS)")
    common.add_argument("--log-level", default=settings.LOG_LEVEL, help="logging level")

    ap = argparse.ArgumentParser(
        prog="bblab", description="Bilinear optimal control and free boundary lab"
    )
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("validate", parents=[common], help="check the model assumptions")
    sub.add_parser("solve", parents=[common], help="solve the state for the initial control")
    sub.add_parser("optimize", parents=[common], help="optimize and run the configured analyses")
    sub.add_parser("weiss", parents=[common], help="optimize, then Weiss profiles")
    blowup = sub.add_parser(
        "blowup", parents=[common], help="blow-up matching, or a profile catalogue for (f0, g0)"
    )
    blowup.add_argument("--f0", type=float, help="catalogue mode: positive-phase coefficient")
    blowup.add_argument("--g0", type=float, default=0.0, help="negative-phase coefficient")
    blowup.add_argument("--n-max", type=int, default=12, help="largest component count")
    sub.add_parser("boundary", parents=[common], help="optimize, then trace the free boundary")
    suite = sub.add_parser("suite", parents=[common], help="run the acceptance checks")
    suite.add_argument("--scale", choices=sorted(SCALES), default="reduced")
    suite.add_argument("--only", nargs="*", help="names of the checks to run")
    return ap.parse_args(argv)


def _configure_logging(level: str, out_dir: Path | None) -> None:
    formatter = logging.Formatter("%(asctime)s %(levelname)s %(name)s %(message)s")
    handlers: list[logging.Handler] = [logging.StreamHandler(stream=sys.stderr)]
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(out_dir / "run.log", mode="a", encoding="utf-8"))
    for handler in handlers:
        handler.setFormatter(formatter)
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO), handlers=handlers, force=True
    )


def load_config(path: Path | None, seed: int | None = None) -> ExperimentConfig:
    config = (
        ExperimentConfig.model_validate_json(Path(path).read_text(encoding="utf-8"))
        if path
        else ExperimentConfig()
    )
    if seed is not None:
        config = config.model_copy(update={"seed": seed})
    return config


def _for_command(config: ExperimentConfig, command: str) -> ExperimentConfig:
    if command == "solve":
        return config.model_copy(update={"stages": ["solve"]})
    flags = {"weiss": "weiss", "blowup": "blowup_match", "boundary": "boundary"}
    update: dict = {"stages": ["solve", "optimize"]}
    if command in flags:
        update["analyses"] = config.analyses.model_copy(update={flags[command]: True})
    return config.model_copy(update=update)


def _catalogue(args: argparse.Namespace, out: Path) -> int:
    catalogue = classify_profiles(args.f0, args.g0, args.n_max)
    rows = []
    for profile in catalogue:
        first = profile.components[0]
        shot = shooting_oracle(args.f0, args.g0, 0.0, 2.0 * first.coefficient)
        rows.append({**profile.to_dict(), "shooting_confirmed": shot is not None})
    write_json(out / "catalogue.json", rows)
    print(json.dumps({"profiles": len(rows), "N": [row["N"] for row in rows]}))
    return 0


def _validate(config: ExperimentConfig, out: Path) -> int:
    report = validate_spec(config.spec)
    write_json(out / "validation.json", report.model_dump(mode="json"))
    print(json.dumps({"passed": report.passed, "clauses": len(report.clauses)}))
    return 0 if report.passed else DegenerateInput.exit_code


def run(args: argparse.Namespace) -> int:
    config = load_config(args.config, args.seed)
    out = settings.resolve_output_dir(args.out, config.output_dir)
    if args.out is None and config.output_dir is None:
        out = out / config.name
    _configure_logging(args.log_level, out)
    threads = settings.resolve_threads(args.threads)
    logger.info("bblab %s -> %s (threads=%d)", args.command, out, threads)

    if args.command == "validate":
        return _validate(config, out)
    if args.command == "suite":
        failed = run_suite(out, args.scale, threads, config.seed, args.only)
        print(json.dumps({"failed": failed}))
        return 0 if failed == 0 else 1
    if args.command == "blowup" and args.f0 is not None:
        return _catalogue(args, out)

    board = StatusBoard()
    worker = start_experiment(
        config.name, _for_command(config, args.command), out, board.set_status, threads
    )
    worker.join()
    status = board.get(config.name)
    result = status.get("result")
    if result is None:
        print(json.dumps({"status": "error", "error": status.get("error")}))
        return 1
    print(json.dumps({"status": result["status"], "manifest": str(out / "manifest.json")}))
    return result["exit_code"]


def main(argv: Sequence[str] | None = None) -> int:
    args = parse_args(argv)
    try:
        return run(args)
    except ValidationError as e:
        print(f"invalid config: {e}", file=sys.stderr)
        return 2
    except BBLabError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
