from enum import Enum
from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class InspectorMode(str, Enum):
    FLAWLESS = "flawless"
    RELAXED = "relaxed"


class LearningMode(str, Enum):
    ASSURED = "assured"
    CLASSIC = "classic"


class TieBreak(str, Enum):
    LOWEST = "lowest"
    RANDOM = "random"


class StepSizeRule(str, Enum):
    CONSTANT = "constant"
    VISITS = "visits"


class CellKind(str, Enum):
    FREE = "free"
    WALL = "wall"
    HOLE = "hole"


class ExperimentKind(str, Enum):
    BANDIT_SWEEP = "bandit_sweep"
    GRID_BARRIER = "grid_barrier"
    CORRIDOR_COMPARE = "corridor_compare"


# Bandits ---------------------------------------------------------------------


class BanditInstance(BaseModel):
    """True arm parameters of a safe bandit problem."""

    model_config = ConfigDict(frozen=True)

    mus: List[float] = Field(..., min_length=1, description="Damage probability per arm")
    mu_spec: float = Field(..., ge=0.0, lt=1.0, description="Safety specification mu")

    @field_validator("mus")
    @classmethod
    def _mus_are_probabilities(cls, mus: List[float]) -> List[float]:
        for a, mu_a in enumerate(mus):
            if not 0.0 <= mu_a <= 1.0:
                raise ValueError(f"mus[{a}]={mu_a} is not in [0, 1]")
        return mus

    @property
    def n_arms(self) -> int:
        return len(self.mus)

    def is_unsafe(self, arm: int) -> bool:
        return self.mus[arm] > self.mu_spec

    @property
    def unsafe_arms(self) -> List[int]:
        return [a for a, mu_a in enumerate(self.mus) if mu_a > self.mu_spec]

    @property
    def n_unsafe(self) -> int:
        return len(self.unsafe_arms)

    @property
    def mu_low(self) -> Optional[float]:
        """Smallest damage probability among the unsafe arms."""
        unsafe = [self.mus[a] for a in self.unsafe_arms]
        return min(unsafe) if unsafe else None


class RelaxedParams(BaseModel):
    """Slack and failure tolerance of the one-sided SPRT."""

    model_config = ConfigDict(frozen=True)

    epsilon: float = Field(..., gt=0.0, description="Slack between null and alternative")
    alpha: float = Field(..., gt=0.0, le=1.0, description="Failure tolerance")


class BanditBounds(BaseModel):
    flawless_exposure_bound: float
    flawless_time_bound: float
    relaxed_conservation_lb: Optional[float] = None
    relaxed_exposure_bound: Optional[float] = None
    relaxed_time_bound: Optional[float] = None
    sprt_per_arm_bound: Optional[float] = None


# MDP files ---------------------------------------------------------------------


class BranchModel(BaseModel):
    sp: int
    p: float
    r: float = 0.0
    d: int = 0


class TransitionEntry(BaseModel):
    s: int
    a: int
    branches: List[BranchModel]


class MDPFile(BaseModel):
    """On-disk JSON form of a TabularMDP."""

    n_states: int = Field(..., gt=0)
    n_actions: int = Field(..., gt=0)
    terminal: List[int] = Field(default_factory=list)
    transitions: List[TransitionEntry]
    start: int = 0
    goals: List[int] = Field(default_factory=list)


# Environments --------------------------------------------------------------------


class GridSpec(BaseModel):
    """Unstable grid-world layout; ``cells[row][col]``, row 0 on top."""

    model_config = ConfigDict(frozen=True)

    width: int = Field(..., gt=0)
    height: int = Field(..., gt=0)
    cells: List[List[CellKind]]
    p_intended: float = Field(0.6, gt=0.0, le=1.0)

    @model_validator(mode="after")
    def _shape_matches(self) -> "GridSpec":
        if len(self.cells) != self.height:
            raise ValueError(f"expected {self.height} rows, got {len(self.cells)}")
        for row, line in enumerate(self.cells):
            if len(line) != self.width:
                raise ValueError(f"row {row} has {len(line)} cells, expected {self.width}")
        return self

    @classmethod
    def from_map(cls, text: str, p_intended: float = 0.6) -> "GridSpec":
        """Parse a map: '.' free, '#' wall, 'O' hole, one row per line."""
        symbols = {".": CellKind.FREE, "#": CellKind.WALL, "O": CellKind.HOLE}
        rows = [line.rstrip("\r\n") for line in text.splitlines() if line.strip()]
        if not rows:
            raise ValueError("empty grid map")
        cells = []
        for r, line in enumerate(rows):
            try:
                cells.append([symbols[ch] for ch in line])
            except KeyError as e:
                raise ValueError(f"unknown map symbol {e.args[0]!r} on line {r + 1}") from None
        return cls(width=len(cells[0]), height=len(cells), cells=cells, p_intended=p_intended)

    @classmethod
    def open_field(
        cls, size: int, holes: List[Tuple[int, int]], p_intended: float = 0.6
    ) -> "GridSpec":
        """A ``size`` x ``size`` field of free cells with holes at (row, col)."""
        cells = [[CellKind.FREE] * size for _ in range(size)]
        for row, col in holes:
            cells[row][col] = CellKind.HOLE
        return cls(width=size, height=size, cells=cells, p_intended=p_intended)


def default_holes(size: int) -> List[Tuple[int, int]]:
    """Hole layout used when none is configured."""
    if size < 3:
        return [(0, 0)]
    return sorted({(size // 2, size // 2), (size // 4, 3 * size // 4), (3 * size // 4, size // 4)})


# Learners --------------------------------------------------------------------------


class LearnerParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    eta: float = Field(0.1, gt=0.0, le=1.0, description="Learning rate (constant schedule)")
    gamma: float = Field(0.9, ge=0.0, lt=1.0, description="Discount factor")
    eps_explore: float = Field(0.1, ge=0.0, le=1.0, description="Exploration probability")
    episode_cap: int = Field(1000, gt=0, description="Steps before an episode is truncated")
    max_episodes: int = Field(100_000, gt=0, description="Episodes before an agent gives up")
    tie_break: TieBreak = TieBreak.LOWEST
    step_size: StepSizeRule = StepSizeRule.CONSTANT
    step_power: float = Field(
        0.6, gt=0.5, le=1.0, description="Exponent of the visit-count schedule 1/(1+visits)**power"
    )


# Experiments -----------------------------------------------------------------------


class SummaryStat(BaseModel):
    mean: float
    stderr: float = Field(..., ge=0.0)
    n: int = Field(..., ge=1)
    degenerate: bool = False


class ExperimentConfig(BaseModel):
    """Declarative description of one experiment sweep.

    Field names are the JSON config-file keys.
    """

    experiment: ExperimentKind
    base_seed: int = 0
    n_runs: int = Field(8, ge=1)
    seeds: Optional[List[int]] = None
    output_path: Optional[str] = None

    # bandit_sweep
    n_arms: int = Field(100, gt=0)
    mu_spec: float = Field(0.1, gt=0.0, lt=1.0)
    arm_low: float = Field(0.0, ge=0.0, le=1.0)
    arm_high: float = Field(0.2, ge=0.0, le=1.0)
    arms_file: Optional[str] = None
    epsilons: List[float] = Field(default_factory=lambda: [0.01, 0.025, 0.05, 0.075, 0.09])
    alphas: List[float] = Field(default_factory=lambda: [0.05, 0.1, 0.3])
    horizon_factor: float = Field(10.0, gt=0.0)

    # grid_barrier
    grid_size: int = Field(9, ge=2)
    grid_map: Optional[str] = None
    holes: Optional[List[Tuple[int, int]]] = None
    p_intended: float = Field(0.6, gt=0.0, le=1.0)
    max_steps_factor: float = Field(20.0, gt=0.0)

    # corridor_compare
    corridor_length: int = Field(15, ge=2)
    eta: float = Field(0.1, gt=0.0, le=1.0)
    gamma: float = Field(0.9, ge=0.0, lt=1.0)
    eps_explore: float = Field(0.1, ge=0.0, le=1.0)
    episode_cap: int = Field(1000, gt=0)
    max_episodes: int = Field(100_000, gt=0)
    tie_break: TieBreak = TieBreak.RANDOM

    @model_validator(mode="after")
    def _check_ranges(self) -> "ExperimentConfig":
        if self.seeds is not None and len(self.seeds) == 0:
            raise ValueError("seeds must not be empty")
        if self.arm_low > self.arm_high:
            raise ValueError(f"arm_low={self.arm_low} exceeds arm_high={self.arm_high}")
        for eps in self.epsilons:
            if not 0.0 < eps <= self.mu_spec:
                raise ValueError(f"epsilon={eps} is not in (0, mu_spec={self.mu_spec}]")
        for alpha in self.alphas:
            if not 0.0 < alpha <= 1.0:
                raise ValueError(f"alpha={alpha} is not in (0, 1]")
        if self.holes is not None:
            for row, col in self.holes:
                if not (0 <= row < self.grid_size and 0 <= col < self.grid_size):
                    raise ValueError(f"hole ({row}, {col}) outside a {self.grid_size}x{self.grid_size} grid")
        return self

    @property
    def replication_count(self) -> int:
        return len(self.seeds) if self.seeds is not None else self.n_runs

    def learner_params(self) -> LearnerParams:
        return LearnerParams(
            eta=self.eta,
            gamma=self.gamma,
            eps_explore=self.eps_explore,
            episode_cap=self.episode_cap,
            max_episodes=self.max_episodes,
            tie_break=self.tie_break,
        )

    @classmethod
    def desk_scale(cls, experiment: ExperimentKind, **overrides) -> "ExperimentConfig":
        defaults = {
            ExperimentKind.BANDIT_SWEEP: {"n_arms": 100, "n_runs": 8},
            ExperimentKind.GRID_BARRIER: {"grid_size": 9, "n_runs": 8},
            ExperimentKind.CORRIDOR_COMPARE: {"corridor_length": 15, "n_runs": 200},
        }[experiment]
        return cls(experiment=experiment, **{**defaults, **overrides})

    @classmethod
    def paper_scale(cls, experiment: ExperimentKind, **overrides) -> "ExperimentConfig":
        defaults = {
            ExperimentKind.BANDIT_SWEEP: {"n_arms": 1000, "n_runs": 16},
            ExperimentKind.GRID_BARRIER: {"grid_size": 15, "n_runs": 1},
            ExperimentKind.CORRIDOR_COMPARE: {"corridor_length": 15, "n_runs": 1000},
        }[experiment]
        return cls(experiment=experiment, **{**defaults, **overrides})
