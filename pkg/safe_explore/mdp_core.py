"""Finite MDPs with a damage signal on every transition.

The kernel is stored as ``transitions[s][a]``, a tuple of :class:`Branch`
entries ``(next_state, prob, reward, damage)``. Environments that end
episodes on damage route damage branches to an absorbing terminal state.
"""

import bisect
import functools
import itertools
import logging
import math
from typing import Iterable, Iterator, List, NamedTuple, Optional, Sequence, Set, Tuple, Union

import numpy as np

from safe_explore.errors import MDPValidationError, ParameterError, StateActionIndexError
from safe_explore.models import BranchModel, MDPFile, TransitionEntry

logger = logging.getLogger(__name__)

PROB_TOLERANCE = 1e-9


# Extended reals ------------------------------------------------------------------


@functools.total_ordering
class XReal:
    """A finite real or the absorbing element -inf.

    ``NEG_INF`` is a distinct singleton rather than a float infinity, so
    equality and serialization are exact.
    """

    __slots__ = ("_value",)

    def __init__(self, value: Union[float, int, "XReal"] = 0.0):
        if isinstance(value, XReal):
            value = value._value
            object.__setattr__(self, "_value", value)
            return
        value = float(value)
        if not math.isfinite(value):
            raise ParameterError(f"XReal holds finite reals only (use NEG_INF), got {value}")
        object.__setattr__(self, "_value", value)

    def __setattr__(self, name, value):
        raise AttributeError("XReal is immutable")

    @classmethod
    def _make_neg_inf(cls) -> "XReal":
        obj = object.__new__(cls)
        object.__setattr__(obj, "_value", None)
        return obj

    @property
    def is_neg_inf(self) -> bool:
        return self._value is None

    @property
    def is_finite(self) -> bool:
        return self._value is not None

    @property
    def value(self) -> float:
        """The finite value; raises for -inf."""
        if self._value is None:
            raise ParameterError("-inf has no finite value")
        return self._value

    def __float__(self) -> float:
        return -math.inf if self._value is None else self._value

    def __add__(self, other: Union["XReal", float, int]) -> "XReal":
        other = as_xreal(other)
        if self._value is None or other._value is None:
            return NEG_INF
        return XReal(self._value + other._value)

    __radd__ = __add__

    def scale(self, factor: float) -> "XReal":
        """Multiply by a nonnegative real; 0 * -inf is 0."""
        if factor < 0 or not math.isfinite(factor):
            raise ParameterError(f"scale factor must be a finite nonnegative real, got {factor}")
        if factor == 0:
            return ZERO
        if self._value is None:
            return NEG_INF
        return XReal(self._value * factor)

    def __mul__(self, factor: float) -> "XReal":
        return self.scale(factor)

    __rmul__ = __mul__

    def __eq__(self, other) -> bool:
        if isinstance(other, (int, float)) and not isinstance(other, bool):
            other = NEG_INF if other == -math.inf else XReal(other) if math.isfinite(other) else None
        if not isinstance(other, XReal):
            return NotImplemented
        return self._value == other._value

    def __lt__(self, other) -> bool:
        other = as_xreal(other)
        if self._value is None:
            return other._value is not None
        if other._value is None:
            return False
        return self._value < other._value

    def __hash__(self) -> int:
        return hash(("XReal", self._value))

    def __repr__(self) -> str:
        return "XReal(-inf)" if self._value is None else f"XReal({self._value!r})"

    def __str__(self) -> str:
        return "-inf" if self._value is None else repr(self._value)

    @classmethod
    def parse(cls, text: str) -> "XReal":
        text = text.strip()
        if text == "-inf":
            return NEG_INF
        return cls(float(text))


NEG_INF = XReal._make_neg_inf()
ZERO = XReal(0.0)


def as_xreal(value: Union[XReal, float, int]) -> XReal:
    if isinstance(value, XReal):
        return value
    if value == -math.inf:
        return NEG_INF
    return XReal(value)


def xmax(values: Iterable[Union[XReal, float, int]]) -> XReal:
    """Maximum under the extended order; finite whenever any element is."""
    best: Optional[XReal] = None
    for v in values:
        v = as_xreal(v)
        if best is None or best < v:
            best = v
    if best is None:
        raise ParameterError("xmax of an empty collection")
    return best


def barrier_index(d: int) -> XReal:
    """Hard barrier index log(1 - d): 0 without damage, -inf with damage."""
    if d == 0:
        return ZERO
    if d == 1:
        return NEG_INF
    raise ParameterError(f"damage must be 0 or 1, got {d}")


# Tabular MDPs ------------------------------------------------------------------------


class Branch(NamedTuple):
    next_state: int
    prob: float
    reward: float = 0.0
    damage: int = 0


class Transition(NamedTuple):
    next_state: int
    reward: float
    damage: int


class Violation(NamedTuple):
    s: Optional[int]
    a: Optional[int]
    message: str

    def __str__(self) -> str:
        where = "" if self.s is None else f"(s={self.s}, a={self.a}) " if self.a is not None else f"(s={self.s}) "
        return f"{where}{self.message}"


class TabularMDP:
    """Immutable finite MDP with kernel p(s', r, d | s, a)."""

    def __init__(
        self,
        n_states: int,
        n_actions: int,
        transitions: Sequence[Sequence[Sequence[Branch]]],
        terminal_states: Iterable[int] = (),
        start_state: int = 0,
        goal_states: Iterable[int] = (),
        name: str = "",
    ):
        self._n_states = int(n_states)
        self._n_actions = int(n_actions)
        self._transitions: Tuple[Tuple[Tuple[Branch, ...], ...], ...] = tuple(
            tuple(tuple(Branch(*b) for b in row_a) for row_a in row_s) for row_s in transitions
        )
        self._terminal = frozenset(int(s) for s in terminal_states)
        self._goals = frozenset(int(s) for s in goal_states)
        self._start = int(start_state)
        self.name = name
        self._cumulative: Optional[List[List[List[float]]]] = None

    @property
    def n_states(self) -> int:
        return self._n_states

    @property
    def n_actions(self) -> int:
        return self._n_actions

    @property
    def n_pairs(self) -> int:
        return self._n_states * self._n_actions

    @property
    def transitions(self) -> Tuple[Tuple[Tuple[Branch, ...], ...], ...]:
        return self._transitions

    @property
    def terminal_states(self) -> frozenset:
        return self._terminal

    @property
    def goal_states(self) -> frozenset:
        return self._goals

    @property
    def start_state(self) -> int:
        return self._start

    def is_terminal(self, s: int) -> bool:
        return s in self._terminal

    def branches(self, s: int, a: int) -> Tuple[Branch, ...]:
        self.check_pair(s, a)
        return self._transitions[s][a]

    def check_pair(self, s: int, a: int) -> None:
        if not 0 <= s < self._n_states:
            raise StateActionIndexError(f"state {s} outside 0..{self._n_states - 1}")
        if not 0 <= a < self._n_actions:
            raise StateActionIndexError(f"action {a} outside 0..{self._n_actions - 1}")

    def pairs(self) -> Iterator[Tuple[int, int]]:
        return itertools.product(range(self._n_states), range(self._n_actions))

    def nonterminal_states(self) -> List[int]:
        return [s for s in range(self._n_states) if s not in self._terminal]

    def successors(self, s: int, a: int) -> Set[int]:
        return {b.next_state for b in self.branches(s, a)}

    def damage_possible(self, s: int, a: int) -> bool:
        return any(b.damage == 1 for b in self.branches(s, a))

    def damage_probability(self, s: int, a: int) -> float:
        return math.fsum(b.prob for b in self.branches(s, a) if b.damage == 1)

    def expected_reward(self, s: int, a: int) -> float:
        return math.fsum(b.prob * b.reward for b in self.branches(s, a))

    def transition_matrix(self) -> np.ndarray:
        """P[s, a, s'] marginalised over reward and damage."""
        P = np.zeros((self._n_states, self._n_actions, self._n_states))
        for s, a in self.pairs():
            for b in self._transitions[s][a]:
                P[s, a, b.next_state] += b.prob
        return P

    def cumulative(self, s: int, a: int) -> List[float]:
        if self._cumulative is None:
            self._cumulative = [
                [list(itertools.accumulate(b.prob for b in row_a)) for row_a in row_s]
                for row_s in self._transitions
            ]
        return self._cumulative[s][a]

    # Serialization -----------------------------------------------------------------

    def to_file_model(self) -> MDPFile:
        return MDPFile(
            n_states=self._n_states,
            n_actions=self._n_actions,
            terminal=sorted(self._terminal),
            start=self._start,
            goals=sorted(self._goals),
            transitions=[
                TransitionEntry(
                    s=s,
                    a=a,
                    branches=[
                        BranchModel(sp=b.next_state, p=b.prob, r=b.reward, d=b.damage)
                        for b in self._transitions[s][a]
                    ],
                )
                for s, a in self.pairs()
            ],
        )

    @classmethod
    def from_file_model(cls, model: MDPFile, name: str = "") -> "TabularMDP":
        table: List[List[List[Branch]]] = [
            [[] for _ in range(model.n_actions)] for _ in range(model.n_states)
        ]
        stray: List[Violation] = []
        for entry in model.transitions:
            if not (0 <= entry.s < model.n_states and 0 <= entry.a < model.n_actions):
                stray.append(Violation(entry.s, entry.a, "transition entry outside the state-action space"))
                continue
            table[entry.s][entry.a].extend(
                Branch(b.sp, b.p, b.r, b.d) for b in entry.branches
            )
        if stray:
            raise MDPValidationError(stray)
        return cls(
            model.n_states,
            model.n_actions,
            table,
            terminal_states=model.terminal,
            start_state=model.start,
            goal_states=model.goals,
            name=name,
        )

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"<TabularMDP{label} |S|={self._n_states} |A|={self._n_actions} terminal={sorted(self._terminal)}>"


# Operations ------------------------------------------------------------------------------


def step(mdp: TabularMDP, s: int, a: int, rng: np.random.Generator) -> Transition:
    """Sample one transition from (s, a); consumes exactly one uniform draw."""
    branches = mdp.branches(s, a)
    u = rng.random()
    cum = mdp.cumulative(s, a)
    idx = min(bisect.bisect_right(cum, u), len(branches) - 1)
    b = branches[idx]
    return Transition(b.next_state, b.reward, b.damage)


def min_nonzero_prob(mdp: TabularMDP) -> float:
    """Smallest branch probability in the kernel."""
    return min(b.prob for row_s in mdp.transitions for row_a in row_s for b in row_a)


def validate(mdp: TabularMDP) -> List[Violation]:
    """Check every kernel invariant; an empty list means the MDP is valid."""
    violations: List[Violation] = []
    if mdp.n_states <= 0 or mdp.n_actions <= 0:
        return [Violation(None, None, f"need positive sizes, got |S|={mdp.n_states}, |A|={mdp.n_actions}")]
    if len(mdp.transitions) != mdp.n_states:
        violations.append(
            Violation(None, None, f"transition table has {len(mdp.transitions)} states, expected {mdp.n_states}")
        )
    for s, row_s in enumerate(mdp.transitions):
        if len(row_s) != mdp.n_actions:
            violations.append(Violation(s, None, f"{len(row_s)} actions, expected {mdp.n_actions}"))
        for a, row_a in enumerate(row_s):
            if not row_a:
                violations.append(Violation(s, a, "no branches"))
                continue
            total = 0.0
            for b in row_a:
                if not 0 <= b.next_state < mdp.n_states:
                    violations.append(Violation(s, a, f"next state {b.next_state} out of range"))
                if not (math.isfinite(b.prob) and b.prob > 0.0):
                    violations.append(Violation(s, a, f"branch probability {b.prob} is not positive"))
                if not math.isfinite(b.reward):
                    violations.append(Violation(s, a, f"reward {b.reward} is not finite"))
                if b.damage not in (0, 1):
                    violations.append(Violation(s, a, f"damage {b.damage} is not 0 or 1"))
                total += b.prob if math.isfinite(b.prob) else 0.0
            if abs(total - 1.0) > PROB_TOLERANCE:
                violations.append(Violation(s, a, f"probabilities sum to {total!r}, not 1"))
            if s in mdp.terminal_states:
                for b in row_a:
                    if b.next_state != s or b.reward != 0 or b.damage != 0:
                        violations.append(
                            Violation(s, a, "terminal state must self-loop with reward 0 and damage 0")
                        )
                        break
    for s in sorted(mdp.terminal_states | mdp.goal_states):
        if not 0 <= s < mdp.n_states:
            violations.append(Violation(s, None, "terminal or goal state out of range"))
    if not 0 <= mdp.start_state < mdp.n_states:
        violations.append(Violation(mdp.start_state, None, "start state out of range"))
    return violations


def ensure_valid(mdp: TabularMDP) -> TabularMDP:
    violations = validate(mdp)
    if violations:
        logger.error("MDP %r failed validation with %d violations", mdp.name, len(violations))
        raise MDPValidationError(violations)
    return mdp


def load_mdp(text: str, name: str = "") -> TabularMDP:
    """Parse the JSON MDP format and reject anything that fails validation."""
    model = MDPFile.model_validate_json(text)
    return ensure_valid(TabularMDP.from_file_model(model, name=name))


def dump_mdp(mdp: TabularMDP) -> str:
    return mdp.to_file_model().model_dump_json(indent=2)
