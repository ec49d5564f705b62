"""Environment builders: the unstable grid-world, the narrow corridor and
random MDPs for property tests.

Both hand-built environments share the action encoding below. Damage always
routes into an absorbing, damage-free sink state so that episodes end on it.
"""

import logging
from typing import Dict, List, Tuple

import numpy as np

from safe_explore.errors import BuildError, ParameterError
from safe_explore.mdp_core import Branch, TabularMDP, ensure_valid
from safe_explore.models import CellKind, GridSpec

logger = logging.getLogger(__name__)

UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3
ACTION_NAMES = ("up", "down", "left", "right")
MOVES = {UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1)}

CORRIDOR_GOAL_REWARD = 100.0


def _merge(branches: List[Branch]) -> List[Branch]:
    """Sum probabilities of branches sharing (next_state, reward, damage)."""
    merged: Dict[Tuple[int, float, int], float] = {}
    for b in branches:
        key = (b.next_state, b.reward, b.damage)
        merged[key] = merged.get(key, 0.0) + b.prob
    return [Branch(sp, p, r, d) for (sp, r, d), p in merged.items()]


# Unstable grid-world ---------------------------------------------------------------


def grid_states(spec: GridSpec) -> List[Tuple[int, int]]:
    """(row, col) of each free cell, in state-index order (row-major)."""
    return [
        (row, col)
        for row in range(spec.height)
        for col in range(spec.width)
        if spec.cells[row][col] == CellKind.FREE
    ]


def build_unstable_grid(spec: GridSpec) -> TabularMDP:
    """Grid-world where the agent slips to a random direction.

    With probability ``p_intended`` the chosen move happens; otherwise a
    direction is drawn uniformly among all four, so the chosen one gets
    ``p + (1 - p) / 4`` and every other ``(1 - p) / 4``. Walls and the border
    keep the agent in place; holes send it to the damage sink.
    """
    cells = grid_states(spec)
    if not cells:
        raise BuildError("grid has no free cell")
    index = {cell: i for i, cell in enumerate(cells)}
    sink = len(cells)
    slip = (1.0 - spec.p_intended) / 4.0

    transitions: List[List[List[Branch]]] = []
    for s, (row, col) in enumerate(cells):
        row_s = []
        for a in range(4):
            raw = []
            for direction, (dr, dc) in MOVES.items():
                p = spec.p_intended + slip if direction == a else slip
                if p <= 0.0:
                    continue
                r2, c2 = row + dr, col + dc
                inside = 0 <= r2 < spec.height and 0 <= c2 < spec.width
                kind = spec.cells[r2][c2] if inside else CellKind.WALL
                if kind == CellKind.WALL:
                    raw.append(Branch(s, p, 0.0, 0))
                elif kind == CellKind.HOLE:
                    raw.append(Branch(sink, p, 0.0, 1))
                else:
                    raw.append(Branch(index[(r2, c2)], p, 0.0, 0))
            row_s.append(_merge(raw))
        transitions.append(row_s)
    transitions.append([[Branch(sink, 1.0, 0.0, 0)] for _ in range(4)])

    mdp = TabularMDP(
        len(cells) + 1,
        4,
        transitions,
        terminal_states=[sink],
        start_state=0,
        name=f"unstable-grid-{spec.height}x{spec.width}",
    )
    logger.debug("Built %r with %d holes", mdp, sum(row.count(CellKind.HOLE) for row in spec.cells))
    return ensure_valid(mdp)


# Narrow corridor -------------------------------------------------------------------


def corridor_sinks(length: int) -> Tuple[int, int]:
    """(goal_sink, damage_sink) state indices of a corridor."""
    return length, length + 1


def build_corridor(length: int) -> TabularMDP:
    """Deterministic corridor s_1..s_length entered at s_1.

    Moving up or down, or left from s_1, hits the wall (damage). Stepping
    right from the second-to-last cell reaches the end: reward 100 and the
    goal sink.
    """
    if length < 2:
        raise ParameterError(f"corridor length must be at least 2, got {length}")
    goal, damage_sink = corridor_sinks(length)

    transitions: List[List[List[Branch]]] = []
    for s in range(length):
        bump = [Branch(damage_sink, 1.0, 0.0, 1)]
        left = bump if s == 0 else [Branch(s - 1, 1.0, 0.0, 0)]
        # right from length - 2 reaches the goal, so state length - 1 is never entered
        if s >= length - 2:
            right = [Branch(goal, 1.0, CORRIDOR_GOAL_REWARD, 0)]
        else:
            right = [Branch(s + 1, 1.0, 0.0, 0)]
        transitions.append([bump, bump, left, right])
    for sink in (goal, damage_sink):
        transitions.append([[Branch(sink, 1.0, 0.0, 0)] for _ in range(4)])

    return ensure_valid(
        TabularMDP(
            length + 2,
            4,
            transitions,
            terminal_states=[goal, damage_sink],
            start_state=0,
            goal_states=[goal],
            name=f"corridor-{length}",
        )
    )


# Random MDPs ------------------------------------------------------------------------


def gen_random_mdp(
    n_states: int,
    n_actions: int,
    branch_factor: int,
    damage_density: float,
    seed: int,
) -> TabularMDP:
    """Random connected MDP, fully determined by ``seed``.

    Action 0 of state s always has s+1 (mod n) among its successors, so every
    state reaches every other. Branch probabilities are at least
    ``1 / (2 * branch_factor)``; each branch carries damage with probability
    ``damage_density`` and a reward drawn from {0, 1, 2}.
    """
    if n_states <= 0 or n_actions <= 0 or branch_factor <= 0:
        raise ParameterError("n_states, n_actions and branch_factor must be positive")
    if not 0.0 <= damage_density <= 1.0:
        raise ParameterError(f"damage_density={damage_density} is not in [0, 1]")

    rng = np.random.default_rng(seed)
    k = min(branch_factor, n_states)
    transitions: List[List[List[Branch]]] = []
    for s in range(n_states):
        row_s = []
        for a in range(n_actions):
            successors = [int(x) for x in rng.choice(n_states, size=k, replace=False)]
            ring = (s + 1) % n_states
            if a == 0 and ring not in successors:
                successors[0] = ring
            weights = 1.0 + rng.random(k)
            probs = weights / weights.sum()
            damages = rng.random(k) < damage_density
            rewards = rng.integers(0, 3, size=k)
            row_s.append(
                [
                    Branch(sp, float(p), float(r), int(d))
                    for sp, p, r, d in zip(successors, probs, rewards, damages)
                ]
            )
        transitions.append(row_s)
    return ensure_valid(
        TabularMDP(n_states, n_actions, transitions, name=f"random-{n_states}x{n_actions}-{seed}")
    )
