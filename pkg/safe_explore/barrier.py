"""Barrier functions over tabular MDPs.

A barrier table holds, for every state-action pair, either 0 (surely safe
under some continuation) or -inf (damage has positive probability whatever
happens next). This module learns such tables from sampled transitions,
computes the exact optimal one by backward closure, and bounds how long the
learner needs.
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import FrozenSet, Iterable, List, NamedTuple, Optional, Set, Tuple

import numpy as np

from safe_explore.errors import ParameterError, StateActionIndexError
from safe_explore.mdp_core import NEG_INF, ZERO, TabularMDP, XReal, barrier_index, min_nonzero_prob, step
from safe_explore.utils.helpers import harmonic_number

logger = logging.getLogger(__name__)

Pair = Tuple[int, int]


class BarrierTable:
    """A {0, -inf} table over state-action pairs.

    Entries only ever move from 0 to -inf. ``condemned[s, a]`` is True where
    the entry is -inf.
    """

    def __init__(self, n_states: int, n_actions: int, condemned: Optional[np.ndarray] = None):
        if condemned is None:
            condemned = np.zeros((n_states, n_actions), dtype=bool)
        elif condemned.shape != (n_states, n_actions):
            raise ParameterError(f"condemned mask has shape {condemned.shape}, expected {(n_states, n_actions)}")
        self.condemned = condemned.astype(bool, copy=True)
        self._dead_actions = self.condemned.sum(axis=1)

    @classmethod
    def zeros_like(cls, mdp: TabularMDP) -> "BarrierTable":
        return cls(mdp.n_states, mdp.n_actions)

    @classmethod
    def from_pairs(cls, n_states: int, n_actions: int, pairs: Iterable[Pair]) -> "BarrierTable":
        table = cls(n_states, n_actions)
        for s, a in pairs:
            table.condemn(s, a)
        return table

    @property
    def n_states(self) -> int:
        return self.condemned.shape[0]

    @property
    def n_actions(self) -> int:
        return self.condemned.shape[1]

    @property
    def n_condemned(self) -> int:
        return int(self._dead_actions.sum())

    def _check(self, s: int, a: int) -> None:
        if not (0 <= s < self.n_states and 0 <= a < self.n_actions):
            raise StateActionIndexError(f"pair ({s}, {a}) outside a {self.n_states}x{self.n_actions} table")

    def get(self, s: int, a: int) -> XReal:
        self._check(s, a)
        return NEG_INF if self.condemned[s, a] else ZERO

    def is_condemned(self, s: int, a: int) -> bool:
        return bool(self.condemned[s, a])

    def condemn(self, s: int, a: int) -> bool:
        """Set B(s, a) = -inf; returns True if the entry changed."""
        self._check(s, a)
        if self.condemned[s, a]:
            return False
        self.condemned[s, a] = True
        self._dead_actions[s] += 1
        return True

    def state_max(self, s: int) -> XReal:
        """max over a of B(s, a)."""
        return NEG_INF if self._dead_actions[s] == self.n_actions else ZERO

    def state_dead(self, s: int) -> bool:
        return self._dead_actions[s] == self.n_actions

    def admissible(self, s: int) -> List[int]:
        return [a for a in range(self.n_actions) if not self.condemned[s, a]]

    def unsafe_pairs(self) -> Set[Pair]:
        return {(int(s), int(a)) for s, a in zip(*np.nonzero(self.condemned))}

    def dead_states(self) -> Set[int]:
        return {int(s) for s in np.nonzero(self._dead_actions == self.n_actions)[0]}

    def copy(self) -> "BarrierTable":
        return BarrierTable(self.n_states, self.n_actions, self.condemned)

    def to_rows(self) -> List[dict]:
        return [
            {"s": s, "a": a, "value": str(self.get(s, a))}
            for s, a in itertools.product(range(self.n_states), range(self.n_actions))
        ]

    def __eq__(self, other) -> bool:
        if not isinstance(other, BarrierTable):
            return NotImplemented
        return self.condemned.shape == other.condemned.shape and bool(np.array_equal(self.condemned, other.condemned))

    def __repr__(self) -> str:
        return f"<BarrierTable {self.n_states}x{self.n_actions} condemned={self.n_condemned}>"


@dataclass
class LagPartition:
    """Unsafe states split by how many steps damage can lag behind."""

    unsafe_levels: List[FrozenSet[int]]
    safe_remainder: FrozenSet[int]
    terminal: FrozenSet[int] = frozenset()

    @property
    def lag(self) -> int:
        return len(self.unsafe_levels)

    @property
    def unsafe_states(self) -> FrozenSet[int]:
        return frozenset().union(*self.unsafe_levels) if self.unsafe_levels else frozenset()


def barrier_update(B: BarrierTable, s: int, a: int, s_next: int, d: int) -> BarrierTable:
    """B(s, a) <- B(s, a) + log(1 - d) + max_a' B(s', a'), in place."""
    value = B.get(s, a) + barrier_index(d) + B.state_max(s_next)
    if value.is_neg_inf:
        B.condemn(s, a)
    return B


# Oracles ------------------------------------------------------------------------------


def bstar_oracle(mdp: TabularMDP) -> BarrierTable:
    """Exact optimal barrier by backward closure from the damaging pairs."""
    B = BarrierTable.zeros_like(mdp)
    for s, a in mdp.pairs():
        if mdp.damage_possible(s, a):
            B.condemn(s, a)
    changed = True
    sweeps = 0
    while changed:
        changed = False
        sweeps += 1
        for s, a in mdp.pairs():
            if B.is_condemned(s, a):
                continue
            if any(B.state_dead(b.next_state) for b in mdp.transitions[s][a]):
                B.condemn(s, a)
                changed = True
    logger.debug("B* closure of %r: %d unsafe pairs after %d sweeps", mdp, B.n_condemned, sweeps)
    return B


def is_bellman_fixed_point(B: BarrierTable, mdp: TabularMDP) -> bool:
    """B(s, a) is -inf exactly when a branch damages or enters an all -inf state."""
    for s, a in mdp.pairs():
        forced = any(b.damage == 1 or B.state_dead(b.next_state) for b in mdp.transitions[s][a])
        if forced != B.is_condemned(s, a):
            return False
    return True


def bellman_residual(B: BarrierTable, mdp: TabularMDP) -> bool:
    """True iff B is the greatest fixed point of the barrier Bellman equation.

    Any fixed point condemns at least the pairs B* condemns; tables that
    condemn more (e.g. all -inf on a damage-free MDP) are rejected.
    """
    if not is_bellman_fixed_point(B, mdp):
        return False
    return B.unsafe_pairs() <= bstar_oracle(mdp).unsafe_pairs()


def exhaustive_unsafe_pairs(mdp: TabularMDP) -> Set[Pair]:
    """Unsafe pairs by enumerating every deterministic stationary policy.

    (s, a) is safe iff some policy, after taking a at s, never reaches a
    damaging transition with positive probability. Exponential in |S|.
    """
    safe: Set[Pair] = set()
    states = range(mdp.n_states)
    for policy in itertools.product(range(mdp.n_actions), repeat=mdp.n_states):
        bad = {s for s in states if mdp.damage_possible(s, policy[s])}
        grew = True
        while grew:
            grew = False
            for s in states:
                if s not in bad and any(b.next_state in bad for b in mdp.transitions[s][policy[s]]):
                    bad.add(s)
                    grew = True
        for s, a in mdp.pairs():
            branches = mdp.transitions[s][a]
            if all(b.damage == 0 and b.next_state not in bad for b in branches):
                safe.add((s, a))
    return set(mdp.pairs()) - safe


def lag_partition(mdp: TabularMDP) -> LagPartition:
    """Level sets of unsafe states, from forced damage outward.

    Level 1 holds states where every action risks damage. A state joins the
    next level when every action risks damage or entering an earlier level.
    Terminal states are kept apart.
    """
    terminal = frozenset(mdp.terminal_states)
    pending = set(mdp.nonterminal_states())
    reached: Set[int] = set()
    levels: List[FrozenSet[int]] = []
    while pending:
        level = frozenset(
            s
            for s in pending
            if all(
                any(b.damage == 1 or b.next_state in reached for b in mdp.transitions[s][a])
                for a in range(mdp.n_actions)
            )
        )
        if not level:
            break
        levels.append(level)
        reached |= level
        pending -= level
    return LagPartition(unsafe_levels=levels, safe_remainder=frozenset(pending), terminal=terminal)


# Bounds ----------------------------------------------------------------------------------


def bound_barrier_time(mdp: TabularMDP, partition: Optional[LagPartition] = None) -> float:
    """Expected completion-time bound (L + 1) |S||A| H_{|S||A|} / mu."""
    partition = partition or lag_partition(mdp)
    n_pairs = mdp.n_pairs
    return (partition.lag + 1) * n_pairs / min_nonzero_prob(mdp) * harmonic_number(n_pairs)


def bound_barrier_time_tight(mdp: TabularMDP, partition: Optional[LagPartition] = None) -> float:
    """Per-level variant: |S||A| / mu times the sum of H_{|S_l||A|} over levels.

    The last level is the safe remainder together with the terminal states.
    """
    partition = partition or lag_partition(mdp)
    sizes = [len(level) for level in partition.unsafe_levels]
    sizes.append(len(partition.safe_remainder) + len(partition.terminal))
    total = sum(harmonic_number(n * mdp.n_actions) for n in sizes)
    return mdp.n_pairs / min_nonzero_prob(mdp) * total


def bound_pair_detection_time(mdp: TabularMDP) -> float:
    """|S|^2 |A| H_{|S||A|} / mu."""
    return mdp.n_states * mdp.n_pairs / min_nonzero_prob(mdp) * harmonic_number(mdp.n_pairs)


def high_probability_horizon(mdp: TabularMDP, delta: float) -> float:
    """Steps after which the learner is complete with probability >= 1 - delta."""
    if not 0.0 < delta <= 1.0:
        raise ParameterError(f"delta={delta} is not in (0, 1]")
    return bound_barrier_time(mdp) / delta


# Barrier learner ---------------------------------------------------------------------------


class TraceRow(NamedTuple):
    step: int
    s: int
    a: int
    s_next: int
    d: int
    newly_condemned: bool
    n_condemned: int


@dataclass
class BarrierLearnerResult:
    """Final table, per-step trace and detection steps of one learner run.

    Detection steps are -1 for pairs (states) that were never condemned.
    """

    table: BarrierTable
    trace: List[TraceRow]
    pair_detection: np.ndarray
    state_detection: np.ndarray
    steps: int
    complete: bool
    oracle_unsafe: int = 0
    completion_step: Optional[int] = None
    history: List[int] = field(default_factory=list)

    def __iter__(self):
        return iter((self.table, self.trace))

    def trace_rows(self) -> List[dict]:
        return [row._asdict() for row in self.trace]

    def detection_rows(self) -> List[dict]:
        n_states, n_actions = self.pair_detection.shape
        return [
            {"s": s, "a": a, "detection_step": int(self.pair_detection[s, a])}
            for s, a in itertools.product(range(n_states), range(n_actions))
        ]


def barrier_learner(
    mdp: TabularMDP,
    rng: np.random.Generator,
    max_steps: int,
    oracle: Optional[BarrierTable] = None,
    stop_at_oracle: bool = True,
    keep_trace: bool = True,
) -> BarrierLearnerResult:
    """Learn the barrier from uniform generative draws over live pairs.

    Each step draws (s, a) uniformly among pairs still at 0, samples one
    transition and applies ``barrier_update``. The oracle only decides when
    the run counts as complete; the learner never reads it.
    """
    if max_steps <= 0:
        raise ParameterError(f"max_steps must be positive, got {max_steps}")
    oracle = oracle if oracle is not None else bstar_oracle(mdp)
    target = oracle.n_condemned

    B = BarrierTable.zeros_like(mdp)
    live: List[Pair] = list(mdp.pairs())
    pair_detection = np.full((mdp.n_states, mdp.n_actions), -1, dtype=np.int64)
    state_detection = np.full(mdp.n_states, -1, dtype=np.int64)
    trace: List[TraceRow] = []
    history: List[int] = []

    t = 0
    complete = stop_at_oracle and target == 0
    while not complete and live and t < max_steps:
        t += 1
        idx = int(rng.integers(len(live)))
        s, a = live[idx]
        outcome = step(mdp, s, a, rng)
        barrier_update(B, s, a, outcome.next_state, outcome.damage)
        newly = bool(B.condemned[s, a])
        if newly:
            live[idx] = live[-1]
            live.pop()
            pair_detection[s, a] = t
            if B.state_dead(s):
                state_detection[s] = t
        n_condemned = B.n_condemned
        history.append(n_condemned)
        if keep_trace:
            trace.append(TraceRow(t, s, a, outcome.next_state, outcome.damage, newly, n_condemned))
        if stop_at_oracle and n_condemned == target:
            complete = True

    if not complete:
        complete = B == oracle
    completion_step = None
    if complete:
        completion_step = history.index(target) + 1 if target else 0
    else:
        logger.warning(
            "Barrier learner on %r stopped at step %d with %d/%d unsafe pairs found",
            mdp, t, B.n_condemned, target,
        )
    return BarrierLearnerResult(
        table=B,
        trace=trace,
        pair_detection=pair_detection,
        state_detection=state_detection,
        steps=t,
        complete=complete,
        oracle_unsafe=target,
        completion_step=completion_step,
        history=history,
    )
