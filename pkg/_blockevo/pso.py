"""
Inertia-weight particle swarm optimiser over fixed-length real vectors.

Fitness is maximised. All random draws for movement happen serially in particle order before any fitness is
evaluated, so evaluations may run concurrently without changing the trajectory.
"""

import csv
import enum
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from _blockevo.utils import InvariantViolation, UserError, describe

_logger = logging.getLogger(__name__)


class FitnessEvaluationError(UserError):
    def __init__(self, generation: int, cause: BaseException):
        self.generation = generation
        self.cause = cause
        super().__init__(f"fitness evaluation failed in generation {generation}: {describe(cause)}")


@dataclass(frozen=True)
class PsoConfig:
    w: float = 0.7298
    c1: float = 1.49618
    c2: float = 1.49618
    v_clamp: float = 12.5
    position_bounds: Tuple[float, float] = (1.0, 32.0)
    population_size: int = 30
    generations: int = 50
    seed: int = 0

    def __post_init__(self) -> None:
        if self.w < 0:
            raise InvariantViolation("pso.w", "must be >= 0")
        if self.c1 < 0:
            raise InvariantViolation("pso.c1", "must be >= 0")
        if self.c2 < 0:
            raise InvariantViolation("pso.c2", "must be >= 0")
        if self.v_clamp <= 0:
            raise InvariantViolation("pso.v_clamp", "must be > 0")
        lo, hi = self.position_bounds
        if not lo < hi:
            raise InvariantViolation("pso.position_bounds", f"lower bound {lo} must be < upper bound {hi}")
        if self.population_size < 1:
            raise InvariantViolation("pso.population_size", "must be >= 1")
        if self.generations < 1:
            raise InvariantViolation("pso.generations", "must be >= 1")
        object.__setattr__(self, "position_bounds", (float(lo), float(hi)))


class EvalStatus(enum.Enum):
    FULL = "full"
    GATED = "gated"
    DECODE_FAILED = "decode_failed"


@dataclass(frozen=True)
class Evaluation:
    """Outcome of one fitness evaluation. Only FULL outcomes may install personal or global bests."""

    fitness: float
    status: EvalStatus = EvalStatus.FULL

    @property
    def gated(self) -> bool:
        return self.status is EvalStatus.GATED

    @property
    def counts_for_best(self) -> bool:
        return self.status is EvalStatus.FULL


Outcome = Union[float, Evaluation]
FitnessFunction = Callable[[np.ndarray], Outcome]
BatchFitnessFunction = Callable[[int, List[np.ndarray]], Sequence[Outcome]]


@dataclass
class Particle:
    position: np.ndarray
    velocity: np.ndarray
    best_position: np.ndarray
    best_fitness: float = -math.inf
    current_fitness: float = -math.inf
    improved: bool = False


@dataclass
class Swarm:
    particles: List[Particle]
    global_best_position: Optional[np.ndarray] = None
    global_best_fitness: float = -math.inf
    generation: int = 0


@dataclass(frozen=True)
class GenerationRecord:
    generation: int
    global_best_fitness: float
    evaluations_performed: int
    evaluations_gated: int
    evaluations_decode_failed: int = 0


class PsoResult(NamedTuple):
    global_best_position: Optional[np.ndarray]
    global_best_fitness: float
    history: List[GenerationRecord]


def init_swarm(config: PsoConfig, dim: int, rng: Optional[np.random.Generator] = None) -> Swarm:
    if dim < 1:
        raise InvariantViolation("dim", "must be >= 1")
    if rng is None:
        rng = np.random.default_rng(config.seed)

    lo, hi = config.position_bounds
    particles = []
    for _ in range(config.population_size):
        position = rng.uniform(lo, hi, size=dim)
        velocity = rng.uniform(-config.v_clamp, config.v_clamp, size=dim)
        particles.append(Particle(position=position, velocity=velocity, best_position=position.copy()))

    return Swarm(particles=particles)


def update_particle(p: Particle, gbest: np.ndarray, config: PsoConfig, rng) -> Particle:
    dim = p.position.shape[0]
    if p.velocity.shape[0] != dim or p.best_position.shape[0] != dim or gbest.shape[0] != dim:
        raise InvariantViolation("particle", "position, velocity and best vectors must have the same length")

    r1 = rng.random(dim)
    r2 = rng.random(dim)
    velocity = (
        config.w * p.velocity
        + config.c1 * r1 * (p.best_position - p.position)
        + config.c2 * r2 * (gbest - p.position)
    )
    velocity = np.clip(velocity, -config.v_clamp, config.v_clamp)
    position = np.clip(p.position + velocity, *config.position_bounds)

    return replace(p, position=position, velocity=velocity, improved=False)


def _as_evaluation(outcome: Outcome) -> Evaluation:
    if isinstance(outcome, Evaluation):
        return outcome
    return Evaluation(float(outcome))


def step_generation(
    swarm: Swarm,
    config: PsoConfig,
    fitness: Optional[FitnessFunction],
    rng,
    *,
    batch_fitness: Optional[BatchFitnessFunction] = None,
) -> Tuple[Swarm, GenerationRecord]:
    """
    Move every particle, evaluate the new positions and apply best updates at the generation barrier.

    Returns a new swarm; the input swarm is never modified, so a failing fitness callback leaves it intact.
    """
    generation = swarm.generation + 1

    moved = []
    for p in swarm.particles:
        # Before the first evaluation there is no global best; the social term then pulls towards the particle's own
        # best, which is its current position.
        gbest = swarm.global_best_position if swarm.global_best_position is not None else p.best_position
        moved.append(update_particle(p, gbest, config, rng))

    positions = [p.position.copy() for p in moved]
    if batch_fitness is not None:
        raw = list(batch_fitness(generation, positions))
        if len(raw) != len(positions):
            raise UserError(f"batch fitness returned {len(raw)} outcomes for {len(positions)} particles")
    else:
        raw = [fitness(position) for position in positions]
    outcomes = [_as_evaluation(o) for o in raw]

    particles = []
    for p, outcome in zip(moved, outcomes):
        p = replace(p, current_fitness=outcome.fitness)
        if outcome.counts_for_best and outcome.fitness > p.best_fitness:
            p = replace(p, best_position=p.position.copy(), best_fitness=outcome.fitness, improved=True)
        particles.append(p)

    gbest_position, gbest_fitness = swarm.global_best_position, swarm.global_best_fitness
    for p in particles:
        if p.improved and p.best_fitness > gbest_fitness:
            gbest_position, gbest_fitness = p.best_position.copy(), p.best_fitness

    new_swarm = Swarm(
        particles=particles,
        global_best_position=gbest_position,
        global_best_fitness=gbest_fitness,
        generation=generation,
    )
    record = GenerationRecord(
        generation=generation,
        global_best_fitness=gbest_fitness,
        evaluations_performed=sum(o.status is EvalStatus.FULL for o in outcomes),
        evaluations_gated=sum(o.status is EvalStatus.GATED for o in outcomes),
        evaluations_decode_failed=sum(o.status is EvalStatus.DECODE_FAILED for o in outcomes),
    )
    return new_swarm, record


def run_pso(
    config: PsoConfig,
    dim: int,
    fitness: Optional[FitnessFunction] = None,
    *,
    batch_fitness: Optional[BatchFitnessFunction] = None,
    on_generation: Optional[Callable[[Swarm, GenerationRecord], None]] = None,
) -> PsoResult:
    if fitness is None and batch_fitness is None:
        raise UserError("run_pso needs a fitness or a batch_fitness callback")

    rng = np.random.default_rng(config.seed)
    swarm = init_swarm(config, dim, rng)
    history: List[GenerationRecord] = []

    for _ in range(config.generations):
        try:
            swarm, record = step_generation(swarm, config, fitness, rng, batch_fitness=batch_fitness)
        except FitnessEvaluationError:
            raise
        except Exception as e:
            raise FitnessEvaluationError(swarm.generation + 1, e) from e

        history.append(record)
        _logger.debug(
            "generation %d: gbest %.6g (%d full, %d gated)",
            record.generation,
            record.global_best_fitness,
            record.evaluations_performed,
            record.evaluations_gated,
        )
        if on_generation is not None:
            on_generation(swarm, record)

    return PsoResult(swarm.global_best_position, swarm.global_best_fitness, history)


HISTORY_COLUMNS = ("generation", "global_best_fitness", "evaluations_performed", "evaluations_gated")


def write_history_csv(history: Sequence[GenerationRecord], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for record in history:
            writer.writerow(
                [
                    record.generation,
                    repr(float(record.global_best_fitness)),
                    record.evaluations_performed,
                    record.evaluations_gated,
                ]
            )


def read_history_csv(path: Path) -> List[GenerationRecord]:
    with open(path, newline="") as f:
        return [
            GenerationRecord(
                generation=int(row["generation"]),
                global_best_fitness=float(row["global_best_fitness"]),
                evaluations_performed=int(row["evaluations_performed"]),
                evaluations_gated=int(row["evaluations_gated"]),
            )
            for row in csv.DictReader(f)
        ]
