"""
FedPass-Lab command line.

  python app.py train         --config cfg.json [--seed 0] [--out checkpoints]
  python app.py sweep         --config cfg.json [--jobs 4] [--out results]
  python app.py attack        --checkpoint checkpoints/run.npz [--config cfg.json] [--out results]
  python app.py verify-theory [--seed 0] [--out results/theory]
  python app.py cap           --results results/fedpass.csv [--out results]
"""
import argparse
import sys
from pathlib import Path
from typing import List, Optional

import pandas as pd
from loguru import logger

from config.experiment_config import ExperimentConfig, load_experiment_config
from config.settings import SETTINGS
from core.errors import ConfigError, FedPassError


def configure_logging(level: Optional[str] = None):
    logger.remove()
    logger.add(sys.stderr, level=level or SETTINGS.LOG_LEVEL)
    Path(SETTINGS.LOG_PATH).mkdir(parents=True, exist_ok=True)
    logger.add(str(Path(SETTINGS.LOG_PATH) / "fedpass.log"), rotation="10 MB", level="DEBUG")


def _config(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required for this command")
    return load_experiment_config(args.config)


def cmd_train(args) -> int:
    from core.experiment_runner import train_and_save

    cfg = _config(args)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    system, archive = train_and_save(cfg, seed, args.out)
    print(f"main accuracy {system.main_accuracy:.4f} after {system.history.rounds} rounds; checkpoint {archive}")
    return 0


def cmd_sweep(args) -> int:
    from core.experiment_runner import run_experiment

    cfg = _config(args)
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seeds": [args.seed]})
    results = run_experiment(cfg, jobs=args.jobs, out_dir=args.out)
    failed = sum(r.error is not None for r in results)
    print(f"{len(results)} rows ({failed} failed) written to {args.out or cfg.output_dir}")
    return 1 if failed == len(results) else 0


def cmd_attack(args) -> int:
    from core.experiment_runner import attack_checkpoint
    from database.result_store import ResultStore

    if not args.checkpoint:
        raise ConfigError("--checkpoint is required for attack")
    cfg = load_experiment_config(args.config) if args.config else None
    rows = attack_checkpoint(args.checkpoint, cfg)
    out = Path(args.out or SETTINGS.RESULTS_PATH)
    store = ResultStore(str(out / SETTINGS.DB_NAME))
    store.upsert(rows)
    store.export(str(out), name="attacks")
    for r in rows:
        outcome = f"error={r.error}" if r.error else f"recovery_error={r.recovery_error:.6g}"
        print(f"{r.attack:<5} {r.defense}={r.strength:g} seed={r.seed} accuracy={r.main_accuracy:.4f} {outcome}")
    return 0


def cmd_verify_theory(args) -> int:
    from research.theory_report import verify_theory

    report = verify_theory(args.out or str(Path(SETTINGS.RESULTS_PATH) / "theory"), seed=args.seed or 0,
                           trials=args.trials, instances=args.instances)
    print(f"theory checks: {'PASS' if report['passed'] else 'FAIL'}")
    return 0 if report["passed"] else 1


def cmd_cap(args) -> int:
    from core.trade_off_analyzer import cap_table

    if not args.results or not Path(args.results).exists():
        raise ConfigError(f"results CSV not found: {args.results}")
    table = cap_table(pd.read_csv(args.results))
    out = Path(args.out or Path(args.results).parent)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "cap.csv", index=False)
    print(table.to_string(index=False))
    return 0


COMMANDS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "attack": cmd_attack,
    "verify-theory": cmd_verify_theory,
    "cap": cmd_cap,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedpass", description=f"{SETTINGS.PROJECT_NAME} v{SETTINGS.VERSION}")
    parser.add_argument("--log-level", default=None)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--jobs", type=int, default=SETTINGS.DEFAULT_JOBS)
        p.add_argument("--out", default=None)
    sub.choices["attack"].add_argument("--checkpoint", default=None)
    sub.choices["verify-theory"].add_argument("--trials", type=int, default=100_000)
    sub.choices["verify-theory"].add_argument("--instances", type=int, default=100)
    sub.choices["cap"].add_argument("--results", default=None)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    logger.info(f"Initializing {SETTINGS.PROJECT_NAME} v{SETTINGS.VERSION}: {args.command}")
    try:
        return COMMANDS[args.command](args)
    except FedPassError as e:
        logger.error(f"{args.command} failed: {e}")
        return 2
    except KeyboardInterrupt:
        logger.info("Shutdown signal received.")
        return 130


if __name__ == "__main__":
    sys.exit(main())
