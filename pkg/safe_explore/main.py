import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from pydantic import ValidationError

from safe_explore.barrier import (
    bound_barrier_time,
    bound_barrier_time_tight,
    bstar_oracle,
    lag_partition,
)
from safe_explore.config import settings
from safe_explore.errors import ConfigError, MDPValidationError, SafeExploreError
from safe_explore.exp_harness import ExperimentResult, run_experiment
from safe_explore.mdp_core import TabularMDP, min_nonzero_prob, validate
from safe_explore.models import ExperimentConfig, ExperimentKind, MDPFile, TieBreak
from safe_explore.storage.local import LocalStorage
from safe_explore.utils.helpers import format_bound

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INCOMPLETE = 2

SUBCOMMAND_KINDS = {
    "bandit": ExperimentKind.BANDIT_SWEEP,
    "grid": ExperimentKind.GRID_BARRIER,
    "corridor": ExperimentKind.CORRIDOR_COMPARE,
}


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    """argparse that reports usage errors as exit code 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON file with ExperimentConfig fields")
    parser.add_argument("--seed", type=int, dest="base_seed", help="Base seed of the replication streams")
    parser.add_argument("--runs", type=int, dest="n_runs", help="Number of replications")
    parser.add_argument("--out", dest="output_path", help="Summary CSV path")
    parser.add_argument(
        "--paper-scale",
        "--full-scale",
        dest="paper_scale",
        action="store_true",
        help="Use the full-size experiment defaults",
    )
    parser.add_argument("--strict", action="store_true", help="Exit 2 when any run is incomplete")
    parser.add_argument("--executor", choices=["local", "celery"], help="Where replications run")
    parser.add_argument("--threads", type=int, help="Worker processes for the local executor")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="safe-explore", description="Safe exploration experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    bandit = sub.add_parser("bandit", help="Relaxed Inspector sweep over (alpha, epsilon)")
    _add_run_flags(bandit)
    bandit.add_argument("--arms", type=int, dest="n_arms", help="Number of arms K")
    bandit.add_argument("--mu", type=float, dest="mu_spec", help="Safety specification mu")
    bandit.add_argument("--arms-file", dest="arms_file", help="File with one damage probability per line")
    bandit.add_argument("--epsilons", type=float, nargs="+", help="Slack values")
    bandit.add_argument("--alphas", type=float, nargs="+", help="Failure tolerances")

    grid = sub.add_parser("grid", help="Barrier learner on the unstable grid-world")
    _add_run_flags(grid)
    grid.add_argument("--size", type=int, dest="grid_size", help="Side of the open square grid")
    grid.add_argument("--map", dest="grid_map", help="Map file: '.' free, '#' wall, 'O' hole")
    grid.add_argument("--p", type=float, dest="p_intended", help="Probability the intended move happens")

    corridor = sub.add_parser("corridor", help="Assured vs classic Q-learning on the corridor")
    _add_run_flags(corridor)
    corridor.add_argument("--length", type=int, dest="corridor_length", help="Corridor length")
    corridor.add_argument("--agents", type=int, dest="n_runs", help="Agents per mode")
    corridor.add_argument("--eta", type=float, help="Learning rate")
    corridor.add_argument("--gamma", type=float, help="Discount factor")
    corridor.add_argument("--eps-explore", type=float, dest="eps_explore", help="Exploration probability")
    corridor.add_argument("--tie-break", choices=[t.value for t in TieBreak], dest="tie_break")

    oracle = sub.add_parser("oracle", help="Print B*, lag and bounds of an MDP file")
    oracle.add_argument("--mdp", required=True, help="MDP JSON file")
    oracle.add_argument("--out", help="Write the B* table as CSV")

    check = sub.add_parser("validate", help="Check an MDP file")
    check.add_argument("--mdp", required=True, help="MDP JSON file")
    return parser


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    """Defaults, then the config file, then command-line flags."""
    kind = SUBCOMMAND_KINDS[args.command]
    full = args.paper_scale or settings.paper_scale
    base = (ExperimentConfig.paper_scale(kind) if full else ExperimentConfig.desk_scale(kind)).model_dump()

    from_file: Dict[str, Any] = {}
    if args.config:
        try:
            from_file = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from None
        if not isinstance(from_file, dict):
            raise ConfigError(f"config {args.config} must hold a JSON object")
        if from_file.get("experiment", kind.value) != kind.value:
            raise ConfigError(f"config is for {from_file['experiment']!r}, not {kind.value!r}")

    ignored = {"command", "verbose", "config", "paper_scale", "strict", "executor", "threads"}
    flags = {k: v for k, v in vars(args).items() if k not in ignored and v is not None}
    return ExperimentConfig.model_validate({**base, **from_file, **flags, "experiment": kind})


def _output_path(config: ExperimentConfig) -> Path:
    if config.output_path:
        return Path(config.output_path)
    return Path(settings.output_dir) / f"{config.experiment.value}.csv"


def write_result(result: ExperimentResult, out: Path) -> List[str]:
    storage = LocalStorage(out.parent)
    written = [storage.save_csv(out.name, result.summary)]
    for name, table in result.tables.items():
        if name != "summary":
            written.append(storage.save_csv(f"{out.stem}_{name}{out.suffix or '.csv'}", table))
    return written


def _run_experiment(args: argparse.Namespace) -> int:
    config = build_config(args)
    out = _output_path(config)
    storage = LocalStorage(out.parent)
    runner = {"executor": args.executor, "threads": args.threads}
    logger.info("Starting %s with %d replications", config.experiment.value, config.replication_count)

    if config.experiment == ExperimentKind.BANDIT_SWEEP:
        mus = storage.read_arm_parameters(config.arms_file) if config.arms_file else None
        result = run_experiment(config, mus=mus, **runner)
    elif config.experiment == ExperimentKind.GRID_BARRIER:
        map_text = storage.read_grid_map(config.grid_map) if config.grid_map else None
        result = run_experiment(config, map_text=map_text, **runner)
    else:
        result = run_experiment(config, **runner)

    for path in write_result(result, out):
        print(f"wrote {path}")
    logger.info("Finished %s (%d incomplete runs)", config.experiment.value, result.n_incomplete)
    if result.n_incomplete and args.strict:
        logger.warning("%d incomplete runs with --strict", result.n_incomplete)
        return EXIT_INCOMPLETE
    return EXIT_OK


def _read_mdp_file(path: str) -> TabularMDP:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read MDP file {path}: {e}") from None
    return TabularMDP.from_file_model(MDPFile.model_validate_json(text), name=Path(path).stem)


def _run_oracle(args: argparse.Namespace) -> int:
    mdp = LocalStorage(Path(args.mdp).parent).read_mdp(args.mdp)
    B = bstar_oracle(mdp)
    partition = lag_partition(mdp)
    print(f"states: {mdp.n_states}  actions: {mdp.n_actions}")
    print(f"unsafe pairs: {B.n_condemned}")
    print(f"dead states: {len(B.dead_states())}")
    print(f"lag: {partition.lag}  level sizes: {[len(level) for level in partition.unsafe_levels]}")
    print(f"mu: {format_bound(min_nonzero_prob(mdp))}")
    print(f"barrier time bound: {format_bound(bound_barrier_time(mdp, partition))}")
    print(f"tight bound: {format_bound(bound_barrier_time_tight(mdp, partition))}")
    if args.out:
        out = Path(args.out)
        print(f"wrote {LocalStorage(out.parent).save_csv(out.name, B.to_rows())}")
    return EXIT_OK


def _run_validate(args: argparse.Namespace) -> int:
    mdp = _read_mdp_file(args.mdp)
    violations = validate(mdp)
    for v in violations:
        print(v)
    if violations:
        logger.error("%s: %d violations", args.mdp, len(violations))
        return EXIT_CONFIG
    print(f"{args.mdp}: ok ({mdp.n_states} states, {mdp.n_actions} actions)")
    return EXIT_OK


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as e:
        # --help
        return int(e.code or 0)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else getattr(logging, settings.log_level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "oracle":
            return _run_oracle(args)
        if args.command == "validate":
            return _run_validate(args)
        return _run_experiment(args)
    except (ValidationError, MDPValidationError, SafeExploreError, OSError) as e:
        logger.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
