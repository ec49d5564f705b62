"""Q-learning fused with a learned barrier.

Assured agents add the barrier to their action values and never choose a
condemned action again. Classic agents run plain Q-learning where damage
pays a reward of -inf; they keep a barrier table only to count how often
they repeat a known-bad action.
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Iterable, List, NamedTuple, Optional, Protocol, Sequence, Union

import numpy as np

from safe_explore.barrier import BarrierTable, barrier_update, bstar_oracle
from safe_explore.errors import DeadStateError, ParameterError, StateActionIndexError
from safe_explore.mdp_core import NEG_INF, ZERO, TabularMDP, XReal, as_xreal, step, xmax
from safe_explore.models import LearnerParams, LearningMode, StepSizeRule, TieBreak

logger = logging.getLogger(__name__)

# must lie in (0.5, 1]
DEFAULT_VISIT_POWER = 0.6

Policy = Sequence[int]


class QTable:
    """Action values in the extended reals; -inf entries are masked."""

    def __init__(self, n_states: int, n_actions: int):
        self.values = np.zeros((n_states, n_actions))
        self.neg_inf = np.zeros((n_states, n_actions), dtype=bool)

    @classmethod
    def zeros_like(cls, mdp: TabularMDP) -> "QTable":
        return cls(mdp.n_states, mdp.n_actions)

    @property
    def n_states(self) -> int:
        return self.values.shape[0]

    @property
    def n_actions(self) -> int:
        return self.values.shape[1]

    def get(self, s: int, a: int) -> XReal:
        if not (0 <= s < self.n_states and 0 <= a < self.n_actions):
            raise StateActionIndexError(f"pair ({s}, {a}) outside a {self.n_states}x{self.n_actions} table")
        return NEG_INF if self.neg_inf[s, a] else XReal(self.values[s, a])

    def set(self, s: int, a: int, value: XReal) -> None:
        if value.is_neg_inf:
            self.neg_inf[s, a] = True
            self.values[s, a] = 0.0
        else:
            self.neg_inf[s, a] = False
            self.values[s, a] = value.value

    def state_max(self, s: int) -> XReal:
        return xmax(self.get(s, a) for a in range(self.n_actions))

    def to_array(self) -> np.ndarray:
        """Float copy with -inf where masked."""
        return np.where(self.neg_inf, -np.inf, self.values)

    def to_rows(self) -> List[dict]:
        return [
            {"s": s, "a": a, "q": str(self.get(s, a))}
            for s, a in itertools.product(range(self.n_states), range(self.n_actions))
        ]


# Step sizes ------------------------------------------------------------------------


class StepSize(Protocol):
    def rate(self, visits: int) -> float:
        """Learning rate for a pair already updated ``visits`` times."""


@dataclass(frozen=True)
class ConstantStepSize:
    eta: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.eta <= 1.0:
            raise ParameterError(f"eta={self.eta} is not in (0, 1]")

    def rate(self, visits: int) -> float:
        return self.eta


@dataclass(frozen=True)
class VisitCountStepSize:
    """eta = 1 / (1 + visits) ** power; diminishing for power in (0.5, 1]."""

    power: float = DEFAULT_VISIT_POWER

    def __post_init__(self):
        if not 0.5 < self.power <= 1.0:
            raise ParameterError(f"power={self.power} is not in (0.5, 1]")

    def rate(self, visits: int) -> float:
        return 1.0 / (1.0 + visits) ** self.power


def step_size_for(params: LearnerParams) -> StepSize:
    if params.step_size == StepSizeRule.VISITS:
        return VisitCountStepSize(params.step_power)
    return ConstantStepSize(params.eta)


# Updates ---------------------------------------------------------------------------------


def q_update(
    Q: QTable,
    B: Optional[BarrierTable],
    s: int,
    a: int,
    s_next: int,
    r: Union[float, XReal],
    eta: float,
    gamma: float,
    terminal: bool = False,
) -> QTable:
    """Q(s,a) <- B(s,a) + (1-eta) Q(s,a) + eta (r + gamma max_a' Q(s',a')).

    The bootstrap term is 0 when ``s_next`` is terminal. Passing ``B=None``
    gives the classic update.
    """
    bootstrap = ZERO if terminal else Q.state_max(s_next)
    target = as_xreal(r) + bootstrap.scale(gamma)
    value = Q.get(s, a).scale(1.0 - eta) + target.scale(eta)
    if B is not None:
        value = B.get(s, a) + value
    Q.set(s, a, value)
    return Q


def epsilon_greedy(
    Q: QTable,
    B: Optional[BarrierTable],
    s: int,
    eps: float,
    rng: np.random.Generator,
    mode: LearningMode = LearningMode.ASSURED,
    tie_break: TieBreak = TieBreak.LOWEST,
) -> int:
    """Pick an action at ``s``; assured mode never offers condemned actions."""
    if mode == LearningMode.ASSURED:
        if B is None:
            raise ParameterError("assured action selection needs a barrier table")
        admissible = B.admissible(s)
        if not admissible:
            raise DeadStateError(s)
    else:
        admissible = list(range(Q.n_actions))

    if rng.random() < eps:
        return admissible[int(rng.integers(len(admissible)))]
    values = [Q.get(s, a) for a in admissible]
    best = xmax(values)
    ties = [a for a, v in zip(admissible, values) if v == best]
    if tie_break == TieBreak.RANDOM and len(ties) > 1:
        return ties[int(rng.integers(len(ties)))]
    return ties[0]


# Generative learner -------------------------------------------------------------------------


@dataclass
class GenerativeResult:
    q: QTable
    b: BarrierTable
    trace: List[dict]
    steps: int

    def __iter__(self):
        return iter((self.q, self.b, self.trace))


def generative_assured_q(
    mdp: TabularMDP,
    params: LearnerParams,
    rng: np.random.Generator,
    max_steps: int,
    step_size: Optional[StepSize] = None,
    keep_trace: bool = False,
) -> GenerativeResult:
    """Update uniformly drawn live pairs from one sampled transition each.

    Defaults to visit-count step sizes, under which finite entries converge
    to the optimal values of the safe sub-MDP.
    """
    if max_steps <= 0:
        raise ParameterError(f"max_steps must be positive, got {max_steps}")
    step_size = step_size or VisitCountStepSize(params.step_power)
    Q = QTable.zeros_like(mdp)
    B = BarrierTable.zeros_like(mdp)
    visits = np.zeros((mdp.n_states, mdp.n_actions), dtype=np.int64)
    live = list(mdp.pairs())
    trace: List[dict] = []

    t = 0
    while live and t < max_steps:
        t += 1
        idx = int(rng.integers(len(live)))
        s, a = live[idx]
        tr = step(mdp, s, a, rng)
        barrier_update(B, s, a, tr.next_state, tr.damage)
        eta = step_size.rate(int(visits[s, a]))
        visits[s, a] += 1
        q_update(Q, B, s, a, tr.next_state, tr.reward, eta, params.gamma, mdp.is_terminal(tr.next_state))
        if B.is_condemned(s, a):
            live[idx] = live[-1]
            live.pop()
        if keep_trace:
            trace.append(
                {"step": t, "s": s, "a": a, "s_next": tr.next_state, "r": tr.reward, "d": tr.damage,
                 "q": str(Q.get(s, a))}
            )
    if not live:
        logger.info("Every pair of %r condemned after %d steps", mdp, t)
    return GenerativeResult(q=Q, b=B, trace=trace, steps=t)


# Episodic learner ---------------------------------------------------------------------------


class EpisodeRecord(NamedTuple):
    episode: int
    steps: int
    bumps: int
    reached_goal: bool
    cumulative_steps: int


@dataclass
class EpisodeLog:
    mode: LearningMode
    episodes: List[EpisodeRecord] = field(default_factory=list)
    transitions_to_goal: Optional[int] = None
    bumps_to_goal: Optional[int] = None
    episodes_to_goal: Optional[int] = None
    condemned_selections: int = 0
    incomplete: bool = False

    @property
    def total_steps(self) -> int:
        return self.episodes[-1].cumulative_steps if self.episodes else 0

    @property
    def total_bumps(self) -> int:
        return sum(e.bumps for e in self.episodes)

    def to_rows(self) -> List[dict]:
        return [e._asdict() for e in self.episodes]


def run_episodic(
    env: TabularMDP,
    mode: LearningMode,
    params: LearnerParams,
    rng: np.random.Generator,
    goal_states: Optional[Iterable[int]] = None,
    step_size: Optional[StepSize] = None,
    Q: Optional[QTable] = None,
) -> EpisodeLog:
    """Train one agent from the start state until it first reaches a goal.

    Episodes end on damage, on a goal or terminal state, or after
    ``episode_cap`` steps. The agent gives up after ``max_episodes``.
    """
    goals = frozenset(goal_states if goal_states is not None else env.goal_states)
    if not goals:
        raise ParameterError(f"{env!r} has no goal state")
    assured = mode == LearningMode.ASSURED
    step_size = step_size or step_size_for(params)
    Q = Q if Q is not None else QTable.zeros_like(env)
    B = BarrierTable.zeros_like(env)
    visits = np.zeros((env.n_states, env.n_actions), dtype=np.int64)
    log = EpisodeLog(mode=mode)

    cumulative = 0
    bumps = 0
    for episode in range(1, params.max_episodes + 1):
        s = env.start_state
        steps = 0
        bumped = False
        reached = False
        while steps < params.episode_cap:
            a = epsilon_greedy(Q, B, s, params.eps_explore, rng, mode, params.tie_break)
            if B.is_condemned(s, a):
                log.condemned_selections += 1
            tr = step(env, s, a, rng)
            steps += 1
            barrier_update(B, s, a, tr.next_state, tr.damage)
            eta = step_size.rate(int(visits[s, a]))
            visits[s, a] += 1
            terminal = env.is_terminal(tr.next_state)
            if assured:
                q_update(Q, B, s, a, tr.next_state, tr.reward, eta, params.gamma, terminal)
            else:
                reward = NEG_INF if tr.damage else tr.reward
                q_update(Q, None, s, a, tr.next_state, reward, eta, params.gamma, terminal)
            if tr.damage:
                bumped = True
                break
            if tr.next_state in goals:
                reached = True
                break
            if terminal:
                break
            s = tr.next_state
        cumulative += steps
        bumps += int(bumped)
        log.episodes.append(EpisodeRecord(episode, steps, int(bumped), reached, cumulative))
        if reached:
            log.transitions_to_goal = cumulative
            log.bumps_to_goal = bumps
            log.episodes_to_goal = episode
            return log

    log.incomplete = True
    logger.warning("%s agent on %r gave up after %d episodes", mode.value, env, params.max_episodes)
    return log


# Policy evaluation ---------------------------------------------------------------------------


def _check_policy(mdp: TabularMDP, policy: Policy) -> None:
    if len(policy) != mdp.n_states:
        raise ParameterError(f"policy has {len(policy)} entries for {mdp.n_states} states")
    for s, a in enumerate(policy):
        if not 0 <= a < mdp.n_actions:
            raise StateActionIndexError(f"policy picks action {a} at state {s}")


def _policy_unsafe_states(mdp: TabularMDP, policy: Policy) -> set:
    """States from which following ``policy`` risks damage."""
    bad = {s for s in range(mdp.n_states) if mdp.damage_possible(s, policy[s])}
    grew = True
    while grew:
        grew = False
        for s in range(mdp.n_states):
            if s not in bad and any(b.next_state in bad for b in mdp.transitions[s][policy[s]]):
                bad.add(s)
                grew = True
    return bad


@dataclass
class PolicyEvaluation:
    """Q^pi split into a reward-only part and a barrier part.

    ``finite_part`` is NaN wherever the barrier part is -inf.
    """

    finite_part: np.ndarray
    barrier_part: BarrierTable

    def __iter__(self):
        return iter((self.finite_part, self.barrier_part))

    def q(self, s: int, a: int) -> XReal:
        return self.barrier_part.get(s, a) + (0.0 if self.barrier_part.is_condemned(s, a) else self.finite_part[s, a])

    def to_array(self) -> np.ndarray:
        return np.where(self.barrier_part.condemned, -np.inf, self.finite_part)


def policy_eval_decomposed(mdp: TabularMDP, policy: Policy, gamma: float) -> PolicyEvaluation:
    """Evaluate a deterministic policy as reward-only Q^pi plus B^pi."""
    if not 0.0 <= gamma < 1.0:
        raise ParameterError(f"gamma={gamma} is not in [0, 1)")
    _check_policy(mdp, policy)
    bad = _policy_unsafe_states(mdp, policy)
    barrier_part = BarrierTable.zeros_like(mdp)
    for s, a in mdp.pairs():
        if any(b.damage == 1 or b.next_state in bad for b in mdp.transitions[s][a]):
            barrier_part.condemn(s, a)

    safe = [s for s in range(mdp.n_states) if s not in bad]
    V = np.zeros(mdp.n_states)
    if safe:
        P = mdp.transition_matrix()
        idx = np.array(safe)
        P_pi = np.array([P[s, policy[s], idx] for s in safe])
        R_pi = np.array([mdp.expected_reward(s, policy[s]) for s in safe])
        V[idx] = np.linalg.solve(np.eye(len(safe)) - gamma * P_pi, R_pi)

    finite_part = np.full((mdp.n_states, mdp.n_actions), np.nan)
    for s, a in mdp.pairs():
        if not barrier_part.is_condemned(s, a):
            finite_part[s, a] = mdp.expected_reward(s, a) + gamma * sum(
                b.prob * V[b.next_state] for b in mdp.transitions[s][a]
            )
    return PolicyEvaluation(finite_part=finite_part, barrier_part=barrier_part)


def value_iteration(
    mdp: TabularMDP,
    gamma: float,
    barrier: Optional[BarrierTable] = None,
    tol: float = 1e-10,
    max_iter: int = 100_000,
) -> np.ndarray:
    """Optimal Q on the safe sub-MDP; -inf where ``barrier`` (default B*) condemns."""
    if not 0.0 <= gamma < 1.0:
        raise ParameterError(f"gamma={gamma} is not in [0, 1)")
    barrier = barrier if barrier is not None else bstar_oracle(mdp)
    mask = barrier.condemned
    P = mdp.transition_matrix()
    R = np.array([[mdp.expected_reward(s, a) for a in range(mdp.n_actions)] for s in range(mdp.n_states)])
    Q = np.zeros_like(R)
    for iteration in range(max_iter):
        masked = np.where(mask, -np.inf, Q)
        V = masked.max(axis=1)
        V = np.where(np.isfinite(V), V, 0.0)
        Q_new = np.where(mask, 0.0, R + gamma * P @ V)
        delta = float(np.max(np.abs(Q_new - Q)))
        Q = Q_new
        if delta < tol:
            logger.debug("Value iteration on %r converged after %d sweeps", mdp, iteration + 1)
            break
    return np.where(mask, -np.inf, Q)


@dataclass
class MonteCarloQ:
    mean: np.ndarray
    stderr: np.ndarray
    n_rollouts: int


def simulate_policy_q(
    mdp: TabularMDP,
    policy: Policy,
    gamma: float,
    rng: np.random.Generator,
    n_rollouts: int = 1000,
    horizon: int = 50,
) -> MonteCarloQ:
    """Monte-Carlo Q^pi with the hard barrier: one damaging rollout makes it -inf."""
    _check_policy(mdp, policy)
    mean = np.zeros((mdp.n_states, mdp.n_actions))
    stderr = np.zeros_like(mean)
    for s0, a0 in mdp.pairs():
        returns = np.empty(n_rollouts)
        damaged = False
        for k in range(n_rollouts):
            s, a = s0, a0
            total, discount = 0.0, 1.0
            for _ in range(horizon):
                tr = step(mdp, s, a, rng)
                if tr.damage:
                    damaged = True
                    break
                total += discount * tr.reward
                discount *= gamma
                if mdp.is_terminal(tr.next_state):
                    break
                s = tr.next_state
                a = policy[s]
            returns[k] = total
            if damaged:
                break
        if damaged:
            mean[s0, a0] = -np.inf
            stderr[s0, a0] = 0.0
        else:
            mean[s0, a0] = returns.mean()
            stderr[s0, a0] = returns.std(ddof=1) / np.sqrt(n_rollouts) if n_rollouts > 1 else 0.0
    return MonteCarloQ(mean=mean, stderr=stderr, n_rollouts=n_rollouts)
