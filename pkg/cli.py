"""
Command-line driver for class-incremental experiments.
Run with: python cli.py run configs/naive.json
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv
from pydantic import ValidationError

from Modules.cka import CKATrajectory
from Modules.config import LOG_LEVEL_ENV, OUTPUT_ROOT_ENV
from Modules.errors import ArtifactError, ContinualError
from Modules.formatter import build_report_frame, format_report_table, format_trial_summary
from Modules.metrics import AccuracyMatrix, accuracy_curve
from Modules.model import freeze_checkpoint, load_checkpoint
from Modules.schemas import ExperimentConfig
from Modules.store import (
    ACC_MATRIX, CKA, MANIFEST, PROBE, atomic_write_bytes, checkpoint_name, experiment_dir, list_seed_dirs,
    missing_artifacts, read_csv, read_json, read_tensors, write_csv,
)
from Modules.trainer import compute_cka, run_all_seeds

logger = logging.getLogger("continual")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def load_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as f:
        return ExperimentConfig.model_validate(json.load(f))


def output_root(config: ExperimentConfig) -> str:
    return os.environ.get(OUTPUT_ROOT_ENV) or config.output_dir


# ── Commands ─────────────────────────────────────────────────────

def cmd_validate(args) -> int:
    config = load_config(args.config)
    print(f"config OK: {config.method.display_name}, digest {config.digest()}")
    print(json.dumps(config.resolved(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_run(args) -> int:
    config = load_config(args.config)
    root = output_root(config)
    print(f"Running {config.name} [{config.method.display_name}] seeds {config.seeds}")
    reports = run_all_seeds(config, root, force=args.force, workers=args.workers)
    print(format_trial_summary(config.method.display_name, config.seeds, reports))
    print(f"\nArtifacts: {experiment_dir(root, config.digest())}")
    return EXIT_OK


def cmd_report(args) -> int:
    frame = build_report_frame(args.dirs)
    text = format_report_table(frame)
    first = Path(args.dirs[0])
    write_csv(first / "report.csv", frame)
    atomic_write_bytes(first / "report.txt", text.encode("utf-8"))
    print(text)
    return EXIT_OK


def recompute_cka(seed_dir: Path) -> CKATrajectory:
    """Rebuild one seed's trajectory from its stored checkpoints and probe cache."""
    missing = missing_artifacts(seed_dir, (MANIFEST, PROBE, ACC_MATRIX))
    if missing:
        raise ArtifactError(f"incomplete artifacts in {seed_dir}: missing {', '.join(missing)}")
    manifest = read_json(seed_dir / MANIFEST)
    config = ExperimentConfig.model_validate(manifest["config"])
    matrix = AccuracyMatrix.from_frame(read_csv(seed_dir / ACC_MATRIX))

    checkpoints = []
    for i in range(1, matrix.N + 1):
        path = seed_dir / checkpoint_name(i)
        if not path.exists():
            raise ArtifactError(f"missing checkpoint {path.name} in {seed_dir}")
        checkpoints.append(freeze_checkpoint(load_checkpoint(path), task_index=i))
    probe = read_tensors(seed_dir / PROBE)["probe"]
    return compute_cka(checkpoints, probe, config.analysis.cka_taps, accuracy_curve(matrix))


def cmd_cka(args) -> int:
    seeds = list_seed_dirs(args.dir)
    if not seeds:
        raise ArtifactError(f"{args.dir} holds no seed directories")
    for seed_dir in seeds:
        trajectory = recompute_cka(seed_dir)
        write_csv(seed_dir / CKA, trajectory.to_frame())
        print(f"wrote {seed_dir / CKA}")
    return EXIT_OK


# ── Entry point ──────────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="continual", description="Rehearsal-free class-incremental experiments")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train every seed of an experiment config")
    run.add_argument("config")
    run.add_argument("--force", action="store_true", help="overwrite existing artifacts")
    run.add_argument("--workers", type=int, default=1, help="seeds to run in parallel processes")
    run.set_defaults(func=cmd_run)

    report = sub.add_parser("report", help="compare experiments as a results table")
    report.add_argument("dirs", nargs="+")
    report.set_defaults(func=cmd_report)

    cka = sub.add_parser("cka", help="recompute CKA trajectories from stored checkpoints")
    cka.add_argument("dir")
    cka.set_defaults(func=cmd_cka)

    validate = sub.add_parser("validate", help="check a config and print its resolved form")
    validate.add_argument("config")
    validate.set_defaults(func=cmd_validate)
    return parser


def _configure_logging(verbose: int) -> None:
    if verbose:
        level = logging.DEBUG if verbose > 1 else logging.INFO
    else:
        level = getattr(logging, os.environ.get(LOG_LEVEL_ENV, "WARNING").upper(), logging.WARNING)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    _configure_logging(args.verbose)
    try:
        return args.func(args)
    except ValidationError as e:
        print("invalid config:", file=sys.stderr)
        for err in e.errors():
            path = ".".join(str(p) for p in err["loc"]) or "<root>"
            print(f"  {path}: {err['msg']}", file=sys.stderr)
        return EXIT_CONFIG
    except json.JSONDecodeError as e:
        print(f"invalid config: not valid JSON ({e})", file=sys.stderr)
        return EXIT_CONFIG
    except (ContinualError, OSError, ValueError, RuntimeError) as e:
        logger.debug("command failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
