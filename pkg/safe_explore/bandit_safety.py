"""Safe multi-armed bandits: the flawless and relaxed inspectors.

Arms are 0-based. An arm ``a`` is unsafe for an instance when
``mus[a] > mu_spec``. Inspectors never look at ``mus``; the ground-truth
labels are only used by :func:`run_inspector` to decide when an experiment
has detected every unsafe arm, and by the metrics.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, NamedTuple, Optional, Protocol, Sequence

import numpy as np

from safe_explore.errors import (
    ArmIndexError,
    InvalidStateError,
    ParameterError,
    UndefinedRatioError,
)
from safe_explore.models import BanditBounds, BanditInstance, InspectorMode, RelaxedParams
from safe_explore.utils.helpers import harmonic_number

logger = logging.getLogger(__name__)


# Strategies -------------------------------------------------------------------


class Strategy(Protocol):
    def choose(self, candidates: Sequence[int], rng: np.random.Generator) -> int: ...


class UniformStrategy:
    """Pick uniformly from the candidate safe set."""

    def choose(self, candidates: Sequence[int], rng: np.random.Generator) -> int:
        return candidates[int(rng.integers(len(candidates)))]


UNIFORM = UniformStrategy()


# State and records ------------------------------------------------------------


@dataclass
class InspectorState:
    """Learner-side state of an inspector.

    ``candidate_set`` is kept sorted so that identical random streams give
    identical arm draws in both modes.
    """

    candidate_set: List[int]
    pull_counts: List[int]
    lambdas: List[float]
    mode: InspectorMode = InspectorMode.FLAWLESS
    relaxed: Optional[RelaxedParams] = None
    round: int = 0

    @classmethod
    def initial(
        cls,
        n_arms: int,
        mode: InspectorMode = InspectorMode.FLAWLESS,
        relaxed: Optional[RelaxedParams] = None,
    ) -> "InspectorState":
        if n_arms <= 0:
            raise ParameterError(f"need at least one arm, got {n_arms}")
        if mode is InspectorMode.RELAXED and relaxed is None:
            raise ParameterError("relaxed mode needs epsilon and alpha")
        return cls(
            candidate_set=list(range(n_arms)),
            pull_counts=[0] * n_arms,
            lambdas=[0.0] * n_arms,
            mode=mode,
            relaxed=relaxed if mode is InspectorMode.RELAXED else None,
        )

    @property
    def threshold(self) -> float:
        """SPRT stopping level log(1/alpha)."""
        if self.relaxed is None:
            raise InvalidStateError("flawless inspectors have no SPRT threshold")
        return math.log(1.0 / self.relaxed.alpha)


class StepOutcome(NamedTuple):
    arm: int
    damage: int
    removed: bool


class BanditEvent(NamedTuple):
    t: int
    arm: int
    damage: int
    removed: bool


@dataclass
class BanditRunRecord:
    instance: BanditInstance
    mode: InspectorMode
    epsilon: float
    events: List[BanditEvent] = field(default_factory=list)
    detection_times: Dict[int, int] = field(default_factory=dict)
    pull_counts: List[int] = field(default_factory=list)
    candidate_set: List[int] = field(default_factory=list)
    final_exposure: int = 0
    final_conservation_ratio: Optional[float] = None
    stop_round: int = 0
    complete: bool = False
    has_events: bool = True

    @property
    def false_alarms(self) -> List[int]:
        """Safe arms that were removed."""
        return sorted(a for a in self.detection_times if not self.instance.is_unsafe(a))

    def to_rows(self) -> List[dict]:
        return [
            {"t": e.t, "arm": e.arm, "damage": e.damage, "removed": e.removed}
            for e in self.events
        ]


# Primitive operations -----------------------------------------------------------


def _check_arm(instance: BanditInstance, arm: int) -> None:
    if not 0 <= arm < instance.n_arms:
        raise ArmIndexError(f"arm {arm} outside 0..{instance.n_arms - 1}")


def sample_damage(instance: BanditInstance, arm: int, rng: np.random.Generator) -> int:
    """Pull ``arm`` once; consumes exactly one uniform draw."""
    _check_arm(instance, arm)
    return int(rng.random() < instance.mus[arm])


def _check_slack(mu: float, epsilon: float) -> None:
    if not 0.0 < mu < 1.0:
        raise ParameterError(f"mu={mu} must lie in (0, 1)")
    if not 0.0 < epsilon <= mu:
        raise ParameterError(f"epsilon={epsilon} must lie in (0, mu={mu}]")


def sprt_increment(d: int, mu: float, epsilon: float) -> float:
    """Log-likelihood increment log(f_mu(d) / f_{mu-eps}(d)).

    With ``epsilon == mu`` a damage makes the increment ``+inf``, which
    stands for immediate removal.
    """
    _check_slack(mu, epsilon)
    if d == 1:
        if epsilon == mu:
            return math.inf
        return math.log(mu / (mu - epsilon))
    if d == 0:
        return math.log((1.0 - mu) / (1.0 - mu + epsilon))
    raise ParameterError(f"damage must be 0 or 1, got {d}")


def sprt_log_likelihood(k: int, n: int, mu: float, epsilon: float) -> float:
    """Closed form of the statistic after ``k`` damages in ``n`` pulls."""
    if not 0 <= k <= n:
        raise ParameterError(f"need 0 <= k <= n, got k={k}, n={n}")
    total = (n - k) * sprt_increment(0, mu, epsilon)
    if k:
        total += k * sprt_increment(1, mu, epsilon)
    return total


def kl_bernoulli(mu: float, epsilon: float) -> float:
    """kl(mu, mu - epsilon) between Bernoulli distributions."""
    if not (0.0 < epsilon < mu < 1.0):
        raise ParameterError(f"kl needs 0 < epsilon < mu < 1, got mu={mu}, epsilon={epsilon}")
    return mu * math.log(mu / (mu - epsilon)) + (1.0 - mu) * math.log(
        (1.0 - mu) / (1.0 - mu + epsilon)
    )


# Inspector steps -------------------------------------------------------------------


def _record_pull(state: InspectorState, arm: int) -> None:
    state.round += 1
    state.pull_counts[arm] += 1


def flawless_step(
    state: InspectorState,
    instance: BanditInstance,
    rng: np.random.Generator,
    strategy: Strategy = UNIFORM,
) -> StepOutcome:
    """Pull one candidate arm and trim it at the first damage."""
    if state.mode is not InspectorMode.FLAWLESS:
        raise InvalidStateError("flawless_step on a relaxed inspector")
    if not state.candidate_set:
        raise InvalidStateError("candidate safe set is empty")
    arm = strategy.choose(state.candidate_set, rng)
    damage = sample_damage(instance, arm, rng)
    _record_pull(state, arm)
    removed = damage == 1
    if removed:
        state.candidate_set.remove(arm)
    return StepOutcome(arm, damage, removed)


def relaxed_step(
    state: InspectorState,
    instance: BanditInstance,
    rng: np.random.Generator,
    strategy: Strategy = UNIFORM,
) -> StepOutcome:
    """Pull one candidate arm, update its SPRT and trim it on rejection."""
    if state.mode is not InspectorMode.RELAXED or state.relaxed is None:
        raise InvalidStateError("relaxed_step on a flawless inspector")
    if not state.candidate_set:
        raise InvalidStateError("candidate safe set is empty")
    arm = strategy.choose(state.candidate_set, rng)
    damage = sample_damage(instance, arm, rng)
    _record_pull(state, arm)
    state.lambdas[arm] += sprt_increment(damage, instance.mu_spec, state.relaxed.epsilon)
    removed = state.lambdas[arm] >= state.threshold
    if removed:
        state.candidate_set.remove(arm)
    return StepOutcome(arm, damage, removed)


# Metrics ---------------------------------------------------------------------------


def exposure(record: BanditRunRecord, upto: Optional[int] = None) -> int:
    """Number of pulls of unsafe arms during rounds ``1..upto``."""
    if not record.has_events:
        _check_final_only(record, upto)
        return record.final_exposure
    unsafe = set(record.instance.unsafe_arms)
    return sum(1 for e in record.events if (upto is None or e.t <= upto) and e.arm in unsafe)


def _check_final_only(record: BanditRunRecord, upto: Optional[int]) -> None:
    # without events only the end-of-run totals are known
    if upto is not None and upto < record.stop_round:
        raise ParameterError(
            f"run kept no events, cannot report round {upto} of {record.stop_round}"
        )


def pull_counts_at(record: BanditRunRecord, upto: Optional[int] = None) -> List[int]:
    if not record.has_events:
        _check_final_only(record, upto)
        return list(record.pull_counts)
    counts = [0] * record.instance.n_arms
    for e in record.events:
        if upto is not None and e.t > upto:
            break
        counts[e.arm] += 1
    return counts


def exposure_from_pull_counts(pull_counts: Sequence[int], instance: BanditInstance) -> int:
    """Sum of pull counts over the unsafe arms."""
    return sum(pull_counts[a] for a in instance.unsafe_arms)


def conservation_ratio(
    candidate_set: Iterable[int], instance: BanditInstance, epsilon: float
) -> float:
    """Fraction of (mu - epsilon)-safe arms still in the candidate set."""
    if epsilon < 0:
        raise ParameterError(f"epsilon must be nonnegative, got {epsilon}")
    reference = {a for a, mu_a in enumerate(instance.mus) if mu_a <= instance.mu_spec - epsilon}
    if not reference:
        raise UndefinedRatioError(
            f"no arm satisfies mu_a <= {instance.mu_spec - epsilon:g}"
        )
    return len(reference.intersection(candidate_set)) / len(reference)


def inconclusive_arms(instance: BanditInstance, epsilon: float) -> List[int]:
    """Arms with mu - epsilon < mu_a <= mu, on which the SPRT guarantees nothing."""
    low = instance.mu_spec - epsilon
    return [a for a, mu_a in enumerate(instance.mus) if low < mu_a <= instance.mu_spec]


def sprt_per_arm_bound(mu: float, epsilon: float, alpha: float) -> float:
    """Expected pulls for the SPRT to reject an unsafe arm, 1 + log(1/alpha)/kl."""
    _check_slack(mu, epsilon)
    if epsilon == mu:
        return 1.0
    return 1.0 + math.log(1.0 / alpha) / kl_bernoulli(mu, epsilon)


def bounds(instance: BanditInstance, relaxed: Optional[RelaxedParams] = None) -> BanditBounds:
    """Closed-form exposure, detection-time and conservation bounds."""
    k = instance.n_arms
    m = instance.n_unsafe
    unsafe_mus = [instance.mus[a] for a in instance.unsafe_arms]
    if m:
        flawless_exposure = math.fsum(1.0 / mu_a for mu_a in unsafe_mus)
        flawless_time = k / instance.mu_low * harmonic_number(m)
    else:
        flawless_exposure = flawless_time = 0.0
    result = BanditBounds(
        flawless_exposure_bound=flawless_exposure,
        flawless_time_bound=flawless_time,
    )
    if relaxed is None:
        return result
    per_arm = sprt_per_arm_bound(instance.mu_spec, relaxed.epsilon, relaxed.alpha)
    return result.model_copy(
        update={
            "relaxed_conservation_lb": 1.0 - relaxed.alpha,
            "relaxed_exposure_bound": m * per_arm,
            "relaxed_time_bound": m * (k - m + 1) * per_arm if m else 0.0,
            "sprt_per_arm_bound": per_arm,
        }
    )


# Runs ------------------------------------------------------------------------------


def default_max_rounds(
    instance: BanditInstance, mode: InspectorMode, relaxed: Optional[RelaxedParams] = None
) -> int:
    """Ten times the applicable detection-time bound."""
    b = bounds(instance, relaxed if mode is InspectorMode.RELAXED else None)
    bound = b.relaxed_time_bound if mode is InspectorMode.RELAXED else b.flawless_time_bound
    return max(1, math.ceil(10.0 * bound))


def run_inspector(
    instance: BanditInstance,
    mode: InspectorMode,
    rng: np.random.Generator,
    max_rounds: Optional[int] = None,
    relaxed: Optional[RelaxedParams] = None,
    strategy: Strategy = UNIFORM,
    keep_events: bool = True,
) -> BanditRunRecord:
    """Run an inspector until every unsafe arm is removed or the horizon ends."""
    if max_rounds is None:
        max_rounds = default_max_rounds(instance, mode, relaxed)
    if max_rounds <= 0:
        raise ParameterError(f"max_rounds must be positive, got {max_rounds}")
    state = InspectorState.initial(instance.n_arms, mode, relaxed)
    if mode is InspectorMode.RELAXED:
        _check_slack(instance.mu_spec, state.relaxed.epsilon)
        step = relaxed_step
    else:
        step = flawless_step
    epsilon = state.relaxed.epsilon if state.relaxed is not None else 0.0

    record = BanditRunRecord(instance=instance, mode=mode, epsilon=epsilon, has_events=keep_events)
    unsafe_flags = [instance.is_unsafe(a) for a in range(instance.n_arms)]
    remaining = instance.n_unsafe

    while remaining and state.round < max_rounds and state.candidate_set:
        arm, damage, removed = step(state, instance, rng, strategy)
        if unsafe_flags[arm]:
            record.final_exposure += 1
        if removed:
            record.detection_times[arm] = state.round
            if unsafe_flags[arm]:
                remaining -= 1
        if keep_events:
            record.events.append(BanditEvent(state.round, arm, damage, removed))

    record.stop_round = state.round
    record.complete = remaining == 0
    record.pull_counts = list(state.pull_counts)
    record.candidate_set = list(state.candidate_set)
    try:
        record.final_conservation_ratio = conservation_ratio(state.candidate_set, instance, epsilon)
    except UndefinedRatioError:
        record.final_conservation_ratio = None
    logger.debug(
        "%s inspector stopped at round %d (complete=%s, exposure=%d)",
        mode.value,
        record.stop_round,
        record.complete,
        record.final_exposure,
    )
    return record


class SPRTOutcome(NamedTuple):
    decided: bool
    pulls: int
    log_likelihood: float


def run_sprt(
    mu_a: float,
    mu: float,
    epsilon: float,
    alpha: float,
    rng: np.random.Generator,
    max_pulls: int,
) -> SPRTOutcome:
    """Run the one-sided test on a single arm with damage probability ``mu_a``."""
    if not 0.0 <= mu_a <= 1.0:
        raise ParameterError(f"mu_a={mu_a} is not a probability")
    if not 0.0 < alpha <= 1.0:
        raise ParameterError(f"alpha={alpha} must lie in (0, 1]")
    threshold = math.log(1.0 / alpha)
    up, down = sprt_increment(1, mu, epsilon), sprt_increment(0, mu, epsilon)
    statistic = 0.0
    for n in range(1, max_pulls + 1):
        statistic += up if rng.random() < mu_a else down
        if statistic >= threshold:
            return SPRTOutcome(True, n, statistic)
    return SPRTOutcome(False, max_pulls, statistic)


def generate_instance(
    n_arms: int, mu_spec: float, low: float, high: float, rng: np.random.Generator
) -> BanditInstance:
    """Arm parameters drawn uniformly on [low, high]."""
    if n_arms <= 0:
        raise ParameterError(f"need at least one arm, got {n_arms}")
    if not 0.0 <= low <= high <= 1.0:
        raise ParameterError(f"need 0 <= low <= high <= 1, got [{low}, {high}]")
    mus = rng.uniform(low, high, size=n_arms)
    return BanditInstance(mus=[float(x) for x in mus], mu_spec=mu_spec)
