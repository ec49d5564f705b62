"""Replication runner and the three experiment suites.

Every replication is a pure function of ``(experiment, payload, run_index)``
returning plain JSON-able data, so it can run in process, in a process
pool or on a Celery worker. Results are merged in run-index order, which
keeps output identical whatever executed them.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from safe_explore import bandit_safety
from safe_explore.assured_q import run_episodic
from safe_explore.barrier import (
    barrier_learner,
    bound_barrier_time,
    bound_barrier_time_tight,
    bstar_oracle,
    lag_partition,
)
from safe_explore.config import settings
from safe_explore.environments import build_corridor, build_unstable_grid
from safe_explore.errors import ConfigError, ParameterError, ReplicationError
from safe_explore.mdp_core import min_nonzero_prob
from safe_explore.models import (
    BanditInstance,
    ExperimentConfig,
    ExperimentKind,
    GridSpec,
    InspectorMode,
    LearningMode,
    RelaxedParams,
    SummaryStat,
    default_holes,
)
from safe_explore.utils.helpers import point_seed, split_seed

logger = logging.getLogger(__name__)

CONSERVATION_METRIC = "C_eps_inf"
EXPOSURE_METRIC = "E_inf/K"


def aggregate(values: Sequence[float]) -> SummaryStat:
    """Mean and standard error (n - 1 denominator) of replicated values."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise ParameterError("cannot aggregate an empty sample")
    if arr.size == 1:
        return SummaryStat(mean=float(arr[0]), stderr=0.0, n=1, degenerate=True)
    return SummaryStat(
        mean=float(arr.mean()),
        stderr=float(arr.std(ddof=1) / math.sqrt(arr.size)),
        n=int(arr.size),
    )


def _summary_row(values: Sequence[float], n_incomplete: int, **keys: Any) -> Dict[str, Any]:
    if len(values) == 0:
        stat = {"mean": float("nan"), "stderr": float("nan"), "n": 0}
    else:
        agg = aggregate(values)
        stat = {"mean": agg.mean, "stderr": agg.stderr, "n": agg.n}
    return {**keys, **stat, "n_incomplete": n_incomplete}


@dataclass
class ExperimentResult:
    """Tables produced by one experiment; ``summary`` is the main CSV."""

    experiment: ExperimentKind
    tables: Dict[str, pd.DataFrame] = field(default_factory=dict)
    n_incomplete: int = 0

    @property
    def summary(self) -> pd.DataFrame:
        return self.tables["summary"]


# Replications ----------------------------------------------------------------------


def replication_rng(config: ExperimentConfig, run_index: int) -> np.random.SeedSequence:
    if config.seeds is not None:
        return np.random.SeedSequence(config.seeds[run_index])
    return split_seed(config.base_seed, run_index)


def build_grid_spec(config: ExperimentConfig, map_text: Optional[str] = None) -> GridSpec:
    if map_text is not None:
        return GridSpec.from_map(map_text, p_intended=config.p_intended)
    holes = config.holes if config.holes is not None else default_holes(config.grid_size)
    return GridSpec.open_field(config.grid_size, [tuple(h) for h in holes], p_intended=config.p_intended)


def _bandit_replication(config: ExperimentConfig, extras: Dict[str, Any], run_index: int) -> Dict[str, Any]:
    instance_seq, sweep_seq = replication_rng(config, run_index).spawn(2)
    if extras.get("mus") is not None:
        instance = BanditInstance(mus=extras["mus"], mu_spec=config.mu_spec)
    else:
        instance = bandit_safety.generate_instance(
            config.n_arms, config.mu_spec, config.arm_low, config.arm_high, np.random.default_rng(instance_seq)
        )
    rows = []
    for alpha in config.alphas:
        for epsilon in config.epsilons:
            # one stream per (alpha, epsilon), keyed by value
            rng = np.random.default_rng(point_seed(sweep_seq, alpha, epsilon))
            relaxed = RelaxedParams(epsilon=epsilon, alpha=alpha)
            b = bandit_safety.bounds(instance, relaxed)
            horizon = max(1, math.ceil(config.horizon_factor * b.relaxed_time_bound))
            record = bandit_safety.run_inspector(
                instance, InspectorMode.RELAXED, rng, max_rounds=horizon, relaxed=relaxed, keep_events=False
            )
            rows.append(
                {
                    "run": run_index,
                    "alpha": alpha,
                    "epsilon": epsilon,
                    "n_arms": instance.n_arms,
                    "n_unsafe": instance.n_unsafe,
                    "final_exposure": record.final_exposure,
                    "exposure_over_k": record.final_exposure / instance.n_arms,
                    "conservation_ratio": record.final_conservation_ratio,
                    "false_alarms": len(record.false_alarms),
                    "stop_round": record.stop_round,
                    "complete": record.complete,
                    "relaxed_exposure_bound": b.relaxed_exposure_bound,
                    "relaxed_time_bound": b.relaxed_time_bound,
                    "conservation_lb": b.relaxed_conservation_lb,
                    "flawless_exposure_bound": b.flawless_exposure_bound,
                    "flawless_time_bound": b.flawless_time_bound,
                }
            )
    return {"run": run_index, "rows": rows}


def _grid_replication(config: ExperimentConfig, extras: Dict[str, Any], run_index: int) -> Dict[str, Any]:
    rng = np.random.default_rng(replication_rng(config, run_index))
    mdp = build_unstable_grid(build_grid_spec(config, extras.get("grid_map_text")))
    oracle = bstar_oracle(mdp)
    partition = lag_partition(mdp)
    bound = bound_barrier_time(mdp, partition)
    max_steps = max(1, math.ceil(config.max_steps_factor * bound))
    result = barrier_learner(mdp, rng, max_steps, oracle=oracle, keep_trace=False)

    n_states = len(mdp.nonterminal_states())
    n_pairs = n_states * mdp.n_actions
    state_steps = sorted(int(t) for t in result.state_detection if t >= 0)
    series = [{"run": run_index, "step": 0, "fraction_pairs_condemned": 0.0, "fraction_states_condemned": 0.0}]
    dead = 0
    for t, n_condemned in enumerate(result.history, start=1):
        while dead < len(state_steps) and state_steps[dead] <= t:
            dead += 1
        series.append(
            {
                "run": run_index,
                "step": t,
                "fraction_pairs_condemned": n_condemned / n_pairs,
                "fraction_states_condemned": dead / n_states,
            }
        )
    row = {
        "run": run_index,
        "completion_step": result.completion_step,
        "steps": result.steps,
        "complete": result.complete,
        "n_unsafe_pairs": result.oracle_unsafe,
        "thm7_bound": bound,
        "tight_bound": bound_barrier_time_tight(mdp, partition),
        "lag": partition.lag,
        "mu": min_nonzero_prob(mdp),
    }
    return {"run": run_index, "rows": [row], "series": series}


def _corridor_replication(config: ExperimentConfig, extras: Dict[str, Any], run_index: int) -> Dict[str, Any]:
    assured_seq, classic_seq = replication_rng(config, run_index).spawn(2)
    env = build_corridor(config.corridor_length)
    params = config.learner_params()
    rows = []
    for mode, seq in ((LearningMode.ASSURED, assured_seq), (LearningMode.CLASSIC, classic_seq)):
        log = run_episodic(env, mode, params, np.random.default_rng(seq))
        rows.append(
            {
                "agent": run_index,
                "mode": mode.value,
                "transitions_to_goal": log.transitions_to_goal,
                "bumps_to_goal": log.bumps_to_goal,
                "episodes_to_goal": log.episodes_to_goal,
                "condemned_selections": log.condemned_selections,
                "incomplete": log.incomplete,
            }
        )
    return {"run": run_index, "rows": rows}


REPLICATORS: Dict[ExperimentKind, Callable[[ExperimentConfig, Dict[str, Any], int], Dict[str, Any]]] = {
    ExperimentKind.BANDIT_SWEEP: _bandit_replication,
    ExperimentKind.GRID_BARRIER: _grid_replication,
    ExperimentKind.CORRIDOR_COMPARE: _corridor_replication,
}


def replicate(experiment: str, payload: Dict[str, Any], run_index: int) -> Dict[str, Any]:
    """Run one replication from a JSON payload ``{"config": ..., "extras": ...}``."""
    kind = ExperimentKind(experiment)
    config = ExperimentConfig.model_validate(payload["config"])
    result = REPLICATORS[kind](config, payload.get("extras") or {}, run_index)
    logger.debug("%s replication %d finished", kind.value, run_index)
    return result


def group_timeout(n_tasks: int) -> int:
    """Seconds to wait for a whole Celery group; the task limit applies to each task."""
    return settings.replication_time_limit * max(1, n_tasks)


def run_replications(
    config: ExperimentConfig,
    extras: Optional[Dict[str, Any]] = None,
    executor: Optional[str] = None,
    threads: Optional[int] = None,
) -> List[Dict[str, Any]]:
    """Run every replication of ``config`` and return them sorted by run index."""
    executor = executor or settings.executor
    threads = threads if threads is not None else settings.threads
    payload = {"config": config.model_dump(mode="json"), "extras": extras or {}}
    kind = config.experiment.value
    indices = range(config.replication_count)
    logger.info("Running %d %s replications (executor=%s)", len(indices), kind, executor)

    if executor == "celery":
        from celery import group
        from celery.exceptions import TimeoutError as CeleryTimeoutError

        from safe_explore.tasks.replications import run_replication

        job = group(run_replication.s(kind, payload, i) for i in indices)
        timeout = group_timeout(len(indices))
        try:
            results = job.apply_async().get(timeout=timeout)
        except CeleryTimeoutError:
            raise ReplicationError(
                f"{len(indices)} {kind} replications did not finish within {timeout}s"
            ) from None
    elif executor == "local":
        if threads <= 1 or len(indices) <= 1:
            results = [replicate(kind, payload, i) for i in indices]
        else:
            with ProcessPoolExecutor(max_workers=min(threads, len(indices))) as pool:
                results = list(pool.map(replicate, [kind] * len(indices), [payload] * len(indices), indices))
    else:
        raise ConfigError(f"unknown executor {executor!r}")
    return sorted(results, key=lambda r: r["run"])


# Experiment suites --------------------------------------------------------------------


def _check_kind(config: ExperimentConfig, kind: ExperimentKind) -> None:
    if config.experiment != kind:
        raise ConfigError(f"expected a {kind.value} config, got {config.experiment.value}")


def run_bandit_sweep(
    config: ExperimentConfig, mus: Optional[List[float]] = None, **runner: Any
) -> ExperimentResult:
    """Relaxed Inspector over the (alpha, epsilon) grid; one arm set per run.

    ``mus`` fixes the arm parameters for every run instead of sampling them.
    """
    _check_kind(config, ExperimentKind.BANDIT_SWEEP)
    replications = run_replications(config, {"mus": mus}, **runner)
    runs = pd.DataFrame([row for rep in replications for row in rep["rows"]])

    summary = []
    n_incomplete = 0
    for (alpha, epsilon), group_df in runs.groupby(["alpha", "epsilon"], sort=True):
        done = group_df[group_df["complete"]]
        incomplete = int((~group_df["complete"]).sum())
        n_incomplete += incomplete
        ratios = done["conservation_ratio"].dropna().tolist()
        summary.append(
            {
                **_summary_row(ratios, incomplete, alpha=alpha, epsilon=epsilon, metric=CONSERVATION_METRIC),
                "bound": 1.0 - alpha,
            }
        )
        summary.append(
            {
                **_summary_row(
                    done["exposure_over_k"].tolist(), incomplete,
                    alpha=alpha, epsilon=epsilon, metric=EXPOSURE_METRIC,
                ),
                "bound": float((group_df["relaxed_exposure_bound"] / group_df["n_arms"]).mean()),
            }
        )
    if n_incomplete:
        logger.warning("%d bandit runs hit the horizon before detecting every unsafe arm", n_incomplete)
    return ExperimentResult(
        experiment=config.experiment,
        tables={"summary": pd.DataFrame(summary), "runs": runs},
        n_incomplete=n_incomplete,
    )


def run_grid_experiment(
    config: ExperimentConfig, map_text: Optional[str] = None, **runner: Any
) -> ExperimentResult:
    """Barrier learner on the unstable grid; time series plus completion summary."""
    _check_kind(config, ExperimentKind.GRID_BARRIER)
    replications = run_replications(config, {"grid_map_text": map_text}, **runner)
    runs = pd.DataFrame([row for rep in replications for row in rep["rows"]])
    series = pd.DataFrame([row for rep in replications for row in rep["series"]])
    n_incomplete = int((~runs["complete"]).sum())
    if n_incomplete:
        logger.warning("%d grid runs stopped before detecting every unsafe pair", n_incomplete)
    return ExperimentResult(
        experiment=config.experiment,
        tables={"summary": runs, "series": series},
        n_incomplete=n_incomplete,
    )


def run_corridor_comparison(config: ExperimentConfig, **runner: Any) -> ExperimentResult:
    """Train assured and classic agents on the corridor, one pair per run index."""
    _check_kind(config, ExperimentKind.CORRIDOR_COMPARE)
    replications = run_replications(config, **runner)
    agents = pd.DataFrame([row for rep in replications for row in rep["rows"]])

    summary = []
    for mode in (LearningMode.ASSURED, LearningMode.CLASSIC):
        rows = agents[agents["mode"] == mode.value]
        done = rows[~rows["incomplete"]]
        incomplete = int(rows["incomplete"].sum())
        for metric in ("transitions_to_goal", "bumps_to_goal"):
            values = done[metric].astype(float).tolist()
            row = _summary_row(values, incomplete, mode=mode.value, metric=metric)
            row["variance"] = float(np.var(values, ddof=1)) if len(values) > 1 else 0.0
            summary.append(row)
    n_incomplete = int(agents["incomplete"].sum())
    if n_incomplete:
        logger.warning("%d corridor agents never reached the goal", n_incomplete)
    return ExperimentResult(
        experiment=config.experiment,
        tables={"summary": pd.DataFrame(summary), "agents": agents},
        n_incomplete=n_incomplete,
    )


def run_experiment(config: ExperimentConfig, **kwargs: Any) -> ExperimentResult:
    suites = {
        ExperimentKind.BANDIT_SWEEP: run_bandit_sweep,
        ExperimentKind.GRID_BARRIER: run_grid_experiment,
        ExperimentKind.CORRIDOR_COMPARE: run_corridor_comparison,
    }
    return suites[config.experiment](config, **kwargs)
