"""Command-line entry point: run, truth, compare and validate."""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from .config import settings
from .dynamics import MODEL_IDS
from .exceptions import AssimilationError, ConfigError
from .models import ExperimentConfig, ExperimentSummary, SeedSettings, load_config, parse_config
from .services.harness import generate_truth_and_obs, run_twin_experiment
from .services.results import compare_records, load_record, load_truth, save_truth, write_record
from .services.validation import validate_model

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_TRUNCATED = 3
EXIT_CHECKS_FAILED = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vfpda", description="Constrained ensemble data assimilation twin experiments"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def experiment_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="YAML experiment file")
        p.add_argument("--out", help="Output directory (default: config output.directory or VFPDA_RESULTS_DIR)")
        p.add_argument("--seed-override", type=int, help="Derive every seed from this base seed")
        p.add_argument("--cycles", type=int, help="Run only the first N cycles")
        p.add_argument("--spinup", type=int, help="Override the number of spinup cycles")
        p.add_argument("--grid-scale", type=int, help="Coarsen the Navier-Stokes grid by this factor")

    run = sub.add_parser("run", help="Run an experiment and write its record")
    experiment_flags(run)
    run.add_argument("--truth", help="Reuse a truth.npz written by the 'truth' command")

    truth = sub.add_parser("truth", help="Generate and cache truth and observations")
    experiment_flags(truth)

    compare = sub.add_parser("compare", help="Tabulate final RMSE/CRMSE of run records")
    compare.add_argument("records", nargs="+", help="JSON run records")

    validate = sub.add_parser("validate", help="Run model self-checks")
    validate.add_argument("--model", required=True, choices=MODEL_IDS)
    validate.add_argument("--grid-scale", type=int, default=1, help="Coarsen the Navier-Stokes grid")
    validate.add_argument("--seed", type=int, default=0)
    return parser


def apply_overrides(
    cfg: ExperimentConfig,
    seed: Optional[int] = None,
    cycles: Optional[int] = None,
    grid_scale: Optional[int] = None,
    spinup: Optional[int] = None,
) -> ExperimentConfig:
    """Config with command-line overrides applied and re-validated."""
    data: Dict[str, Any] = cfg.model_dump(mode="json")
    if seed is not None:
        data["seeds"] = SeedSettings.from_base(seed).model_dump()
    if spinup is not None:
        data["spinup"] = spinup
    if cycles is not None:
        data["cycles"] = cycles
        if data["spinup"] > cycles:
            logger.warning(f"Spinup {data['spinup']} exceeds --cycles {cycles}; clipping it")
            data["spinup"] = cycles
    if grid_scale is not None:
        if data["model"]["kind"] != "navier_stokes":
            raise ConfigError("only applies to the navier_stokes model", "--grid-scale")
        data["model"]["grid_scale"] = grid_scale
    return parse_config(data)


def _load(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config)
    return apply_overrides(cfg, args.seed_override, args.cycles, args.grid_scale, args.spinup)


def _out_dir(args: argparse.Namespace, cfg: ExperimentConfig) -> Path:
    return Path(args.out or cfg.output.directory or settings.results_dir)


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _load(args)
    truth = load_truth(args.truth) if args.truth else None
    record = run_twin_experiment(cfg, truth=truth)
    write_record(record, _out_dir(args, cfg), cfg.output.write_csv)
    print(ExperimentSummary.from_record(record).model_dump_json(indent=2))
    return EXIT_TRUNCATED if record.truncated else EXIT_OK


def cmd_truth(args: argparse.Namespace) -> int:
    cfg = _load(args)
    path = save_truth(generate_truth_and_obs(cfg), _out_dir(args, cfg) / "truth.npz")
    print(path)
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    table = compare_records(load_record(path) for path in args.records)
    print(table.to_string(index=False))
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    report = validate_model(args.model, seed=args.seed, grid_scale=args.grid_scale)
    for check in report.checks:
        status = "PASS" if check.passed else "FAIL"
        print(f"{status}  {check.name}: {check.value:.3e} (<= {check.threshold:.0e})")
    return EXIT_OK if report.passed else EXIT_CHECKS_FAILED


COMMANDS = {
    "run": cmd_run,
    "truth": cmd_truth,
    "compare": cmd_compare,
    "validate": cmd_validate,
}


def _error(record: Dict[str, Any]) -> None:
    print(json.dumps(record), file=sys.stderr)


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(
        level=settings.logging_level, format="%(asctime)s - %(levelname)s - %(message)s"
    )
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        _error(e.to_record())
        return EXIT_CONFIG
    except AssimilationError as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        _error(e.to_record())
        return EXIT_ERROR
    except Exception as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        _error({"error": type(e).__name__, "message": str(e)})
        return EXIT_ERROR
