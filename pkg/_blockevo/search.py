"""
The two-stage search: evolve a dense block with PSO on small source datasets (multi-source weighted fitness, surrogate
gating), then transfer it to a target dataset by grid search over widening and deepening factors.
"""

import csv
import itertools
import logging
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from _blockevo.arch import (
    DEFAULT_GROWTH_CAP,
    AllLayersDisabled,
    BlockSpec,
    CapExceeded,
    CodecConfig,
    NetworkSpec,
    SpatialUnderflow,
    StemSpec,
    build_network,
    count_parameters,
    decode_block,
)
from _blockevo.data import LabeledImageSet, split_train_test
from _blockevo.nn import AdamHyper, train_and_curve
from _blockevo.pso import (
    EvalStatus,
    Evaluation,
    GenerationRecord,
    PsoConfig,
    Swarm,
    run_pso,
    write_history_csv,
)
from _blockevo.surrogate import (
    CurveArchive,
    EmptyDataset,
    GateOutcome,
    PairwiseSurrogateModel,
    SingleClass,
    TooFewCurves,
    TrainingCurve,
    fit_per_source,
    gate_and_evaluate,
)
from _blockevo.utils import InvariantViolation, UserError, derive_seed, describe, write_json

_logger = logging.getLogger(__name__)

Trainer = Callable[..., TrainingCurve]


class SearchError(UserError):
    pass


class AllCellsInfeasible(SearchError):
    pass


class EvolutionFailed(SearchError):
    pass


class SourceEvaluationError(SearchError):
    def __init__(self, source: str, detail: str):
        self.source = source
        self.detail = detail
        super().__init__(f"evaluation on source '{source}' failed: {detail}")

    def __reduce__(self):
        return self.__class__, (self.source, self.detail)


class CandidateEvaluationError(SearchError):
    def __init__(self, generation: int, particle: int, detail: str):
        self.generation = generation
        self.particle = particle
        self.detail = detail
        super().__init__(f"generation {generation}, particle {particle}: {detail}")

    def __reduce__(self):
        return self.__class__, (self.generation, self.particle, self.detail)


@dataclass(frozen=True)
class TrainSettings:
    hyper: AdamHyper = AdamHyper()
    batch_size: int = 32
    dtype: str = "float64"

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise InvariantViolation("train.batch_size", "must be >= 1")
        if self.dtype not in ("float64", "float32"):
            raise InvariantViolation("train.dtype", "must be 'float64' or 'float32'")


@dataclass(frozen=True)
class AdamTrainer:
    """Default trainer: minibatch Adam from nn. Picklable, so it can be shipped to worker processes."""

    settings: TrainSettings = TrainSettings()

    def __call__(
        self, spec: NetworkSpec, train_set: LabeledImageSet, test_set: LabeledImageSet, epochs: int, seed: int
    ) -> TrainingCurve:
        return train_and_curve(
            spec,
            train_set,
            test_set,
            epochs,
            hyper=self.settings.hyper,
            batch_size=self.settings.batch_size,
            seed=seed,
            dtype=np.dtype(self.settings.dtype),
        )


@dataclass(frozen=True)
class Source:
    dataset: LabeledImageSet
    weight: float = 1.0

    def __post_init__(self) -> None:
        if not self.weight > 0:
            raise InvariantViolation(f"sources.{self.dataset.name}.weight", "must be > 0")

    @property
    def name(self) -> str:
        return self.dataset.name


@dataclass(frozen=True)
class SourceConfig:
    sources: Tuple[Source, ...]
    codec: CodecConfig = CodecConfig()
    pso: PsoConfig = PsoConfig()
    full_epochs: int = 50
    window: int = 10
    seed: int = 0
    train_fraction: float = 0.8
    surrogate_reg: float = 1e-3
    surrogate_iterations: int = 10_000
    stem: StemSpec = StemSpec()
    growth_cap: int = DEFAULT_GROWTH_CAP
    parallelism: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "sources", tuple(self.sources))
        if not self.sources:
            raise InvariantViolation("sources", "at least one source dataset is required")
        names = [source.name for source in self.sources]
        if len(set(names)) != len(names):
            raise InvariantViolation("sources", f"source names must be unique, got {names}")
        if self.full_epochs < 1:
            raise InvariantViolation("evolution.full_epochs", "must be >= 1")
        if self.window < 1:
            raise InvariantViolation("evolution.window", "must be >= 1")
        if self.window > self.full_epochs:
            warnings.warn(
                f"surrogate window {self.window} exceeds the {self.full_epochs}-epoch budget, "
                f"using {self.full_epochs}"
            )
            object.__setattr__(self, "window", self.full_epochs)
        if self.surrogate_reg <= 0:
            raise InvariantViolation("surrogate.reg", "must be > 0")
        if self.surrogate_iterations < 1:
            raise InvariantViolation("surrogate.iterations", "must be >= 1")
        if self.parallelism < 1:
            raise InvariantViolation("run.parallelism", "must be >= 1")


@dataclass(frozen=True)
class GridConfig:
    target: LabeledImageSet
    widen_range: Tuple[int, int] = (1, 3)
    deepen_range: Tuple[int, int] = (2, 5)
    eval_epochs: int = 50
    seed: int = 0
    target_test: Optional[LabeledImageSet] = None
    train_fraction: float = 0.8
    stem: StemSpec = StemSpec()
    growth_cap: int = DEFAULT_GROWTH_CAP
    parallelism: int = 1
    record_timings: bool = False

    def __post_init__(self) -> None:
        for key, (lo, hi) in (("grid.widen", self.widen_range), ("grid.deepen", self.deepen_range)):
            if lo < 1:
                raise InvariantViolation(key, "lower bound must be >= 1")
            if hi < lo:
                raise InvariantViolation(key, f"empty range [{lo}, {hi}]")
        if self.eval_epochs < 1:
            raise InvariantViolation("grid.eval_epochs", "must be >= 1")
        if self.parallelism < 1:
            raise InvariantViolation("run.parallelism", "must be >= 1")

    def cells(self) -> List[Tuple[int, int]]:
        return list(
            itertools.product(
                range(self.widen_range[0], self.widen_range[1] + 1),
                range(self.deepen_range[0], self.deepen_range[1] + 1),
            )
        )

    def target_split(self) -> Tuple[LabeledImageSet, LabeledImageSet]:
        if self.target_test is not None:
            return self.target, self.target_test
        return split_train_test(self.target, self.train_fraction, derive_seed(self.seed, "target-split"))


def _parallel_map(fn, tasks: Sequence, parallelism: int) -> list:
    if parallelism > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(parallelism, len(tasks))) as pool:
            return list(pool.map(fn, tasks))
    return [fn(task) for task in tasks]


# Source domain


def source_curves(
    block: BlockSpec,
    sources: Sequence[Source],
    trainer: Trainer,
    *,
    epochs: int,
    seed: int,
    train_seed: int,
    train_fraction: float = 0.8,
    stem: StemSpec = StemSpec(),
    growth_cap: int = DEFAULT_GROWTH_CAP,
) -> Tuple[TrainingCurve, ...]:
    """
    Fitness evaluation of one block on every source: split 80/20 (same split for every candidate), train, record the
    curve. Training with the same train_seed and fewer epochs yields a prefix of the longer curve.
    """
    curves = []
    for source in sources:
        try:
            train_set, test_set = split_train_test(
                source.dataset, train_fraction, derive_seed(seed, "source-split", source.name)
            )
            spec = build_network(
                block, 1, 1, source.dataset.input_shape, source.dataset.num_classes, stem, growth_cap
            )
            curves.append(
                trainer(spec, train_set, test_set, epochs, seed=derive_seed(train_seed, "source", source.name))
            )
        except SourceEvaluationError:
            raise
        except Exception as e:
            raise SourceEvaluationError(source.name, describe(e)) from e
    return tuple(curves)


def combine_fitness(fitnesses: Sequence[float], weights: Sequence[float]) -> float:
    weights = np.asarray(weights, dtype=np.float64)
    return float(np.dot(weights, fitnesses) / weights.sum())


def weighted_fitness(
    block: BlockSpec,
    sources: Sequence[Source],
    trainer: Trainer,
    *,
    epochs: int,
    seed: int = 0,
    train_seed: Optional[int] = None,
    train_fraction: float = 0.8,
    stem: StemSpec = StemSpec(),
    growth_cap: int = DEFAULT_GROWTH_CAP,
) -> Tuple[float, Tuple[TrainingCurve, ...]]:
    if not sources:
        raise SearchError("weighted fitness needs at least one source")
    curves = source_curves(
        block,
        sources,
        trainer,
        epochs=epochs,
        seed=seed,
        train_seed=seed if train_seed is None else train_seed,
        train_fraction=train_fraction,
        stem=stem,
        growth_cap=growth_cap,
    )
    fitness = combine_fitness([curve.best_accuracy for curve in curves], [source.weight for source in sources])
    return fitness, curves


@dataclass(frozen=True)
class _CandidateTask:
    generation: int
    particle: int
    block: BlockSpec
    config: SourceConfig
    trainer: Trainer
    models: Optional[Tuple[PairwiseSurrogateModel, ...]]
    incumbents: Optional[Tuple[TrainingCurve, ...]]


def _evaluate_candidate(task: _CandidateTask) -> GateOutcome:
    config = task.config
    train_seed = derive_seed(config.seed, "train", task.generation, task.particle)
    common = dict(
        seed=config.seed,
        train_seed=train_seed,
        train_fraction=config.train_fraction,
        stem=config.stem,
        growth_cap=config.growth_cap,
    )

    def train_prefix():
        return source_curves(task.block, config.sources, task.trainer, epochs=config.window, **common)

    def full_evaluation():
        return weighted_fitness(task.block, config.sources, task.trainer, epochs=config.full_epochs, **common)

    try:
        return gate_and_evaluate(task.models, task.incumbents, train_prefix, full_evaluation)
    except Exception as e:
        raise CandidateEvaluationError(task.generation, task.particle, describe(e)) from e


@dataclass
class Ledger:
    population_size: int
    generations: int
    full: int = 0
    gated: int = 0
    decode_failed: int = 0
    gate_passed: int = 0
    gate_confirmed: int = 0
    surrogate_train_accuracy: List[Dict] = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.full + self.gated + self.decode_failed

    @property
    def gating_rate(self) -> float:
        return self.gated / self.total if self.total else 0.0

    @property
    def surrogate_precision(self) -> Optional[float]:
        return self.gate_confirmed / self.gate_passed if self.gate_passed else None

    def to_dict(self) -> Dict:
        return {
            "population_size": self.population_size,
            "generations": self.generations,
            "evaluations_full": self.full,
            "evaluations_gated": self.gated,
            "evaluations_decode_failed": self.decode_failed,
            "gating_rate": self.gating_rate,
            "gate_passed": self.gate_passed,
            "gate_confirmed": self.gate_confirmed,
            "surrogate_precision": self.surrogate_precision,
            "surrogate_train_accuracy": self.surrogate_train_accuracy,
        }


@dataclass
class EvolutionResult:
    best_block: BlockSpec
    best_fitness: float
    best_position: np.ndarray
    history: List[GenerationRecord]
    ledger: Ledger
    archive: CurveArchive
    models: Optional[Tuple[PairwiseSurrogateModel, ...]] = None


class SourceEvolution:
    """
    Coordinator for one source-domain run. It is the single writer of the curve archive, the personal-best curves and
    the ledger; candidate evaluations only return values.
    """

    def __init__(self, config: SourceConfig, trainer: Trainer, run_id: str = "run"):
        self.config = config
        self.trainer = trainer
        self.archive = CurveArchive(run_id, tuple(source.name for source in config.sources))
        self.ledger = Ledger(config.pso.population_size, config.pso.generations)
        self.models: Optional[Tuple[PairwiseSurrogateModel, ...]] = None
        self.pbest_curves: Dict[int, Tuple[TrainingCurve, ...]] = {}
        self.pbest_fitness: Dict[int, float] = {}
        self._outcomes: Dict[int, GateOutcome] = {}

    def _refit(self, generation: int) -> Optional[Tuple[PairwiseSurrogateModel, ...]]:
        seeds = [derive_seed(self.config.seed, "surrogate", generation, name) for name in self.archive.sources]
        try:
            models = fit_per_source(
                self.archive,
                self.config.window,
                self.config.surrogate_reg,
                self.config.surrogate_iterations,
                seeds,
            )
        except (TooFewCurves, EmptyDataset, SingleClass) as e:
            warnings.warn(
                f"surrogate not fitted for generation {generation} ({describe(e)}); evaluating every candidate"
            )
            return None

        self.ledger.surrogate_train_accuracy.append(
            {"generation": generation, **{name: m.train_accuracy for name, m in zip(self.archive.sources, models)}}
        )
        return models

    def evaluate_generation(self, generation: int, positions: List[np.ndarray]) -> List[Evaluation]:
        self.models = self._refit(generation) if generation >= 2 else None

        results: List[Optional[Evaluation]] = [None] * len(positions)
        tasks = []
        for particle, position in enumerate(positions):
            try:
                block = decode_block(position, self.config.codec)
            except AllLayersDisabled:
                results[particle] = Evaluation(0.0, EvalStatus.DECODE_FAILED)
                continue
            incumbents = self.pbest_curves.get(particle) if self.models is not None else None
            tasks.append(
                _CandidateTask(
                    generation=generation,
                    particle=particle,
                    block=block,
                    config=self.config,
                    trainer=self.trainer,
                    models=self.models if incumbents is not None else None,
                    incumbents=incumbents,
                )
            )

        outcomes = _parallel_map(_evaluate_candidate, tasks, self.config.parallelism)

        self._outcomes = {}
        for task, outcome in zip(tasks, outcomes):
            self._outcomes[task.particle] = outcome
            if outcome.gated:
                results[task.particle] = Evaluation(0.0, EvalStatus.GATED)
                continue
            results[task.particle] = Evaluation(outcome.fitness, EvalStatus.FULL)
            self.archive.add(task.particle, generation, outcome.curves)
            if outcome.prefixes is not None:
                self.ledger.gate_passed += 1
                if outcome.fitness > self.pbest_fitness.get(task.particle, -np.inf):
                    self.ledger.gate_confirmed += 1

        for result in results:
            if result.status is EvalStatus.FULL:
                self.ledger.full += 1
            elif result.status is EvalStatus.GATED:
                self.ledger.gated += 1
            else:
                self.ledger.decode_failed += 1
        return results

    def after_generation(self, swarm: Swarm, record: GenerationRecord) -> None:
        for particle, p in enumerate(swarm.particles):
            if p.improved:
                self.pbest_curves[particle] = self._outcomes[particle].curves
                self.pbest_fitness[particle] = p.best_fitness
        self._outcomes = {}
        _logger.info(
            "generation %d: best fitness %.4f, %d full / %d gated / %d undecodable",
            record.generation,
            record.global_best_fitness,
            record.evaluations_performed,
            record.evaluations_gated,
            record.evaluations_decode_failed,
        )


def evolve_source(config: SourceConfig, trainer: Optional[Trainer] = None, run_id: str = "run") -> EvolutionResult:
    evolution = SourceEvolution(config, trainer or AdamTrainer(), run_id)
    result = run_pso(
        config.pso,
        config.codec.max_layers,
        batch_fitness=evolution.evaluate_generation,
        on_generation=evolution.after_generation,
    )
    if result.global_best_position is None:
        raise EvolutionFailed("no particle was ever fully evaluated; every position decoded to an empty block")

    return EvolutionResult(
        best_block=decode_block(result.global_best_position, config.codec),
        best_fitness=result.global_best_fitness,
        best_position=result.global_best_position,
        history=result.history,
        ledger=evolution.ledger,
        archive=evolution.archive,
        models=evolution.models,
    )


# Target domain


@dataclass(frozen=True)
class GridRow:
    widen: int
    deepen: int
    accuracy: Optional[float]
    params: Optional[int]
    seconds: Optional[float] = None
    note: str = ""

    @property
    def feasible(self) -> bool:
        return self.accuracy is not None


class GridResult(NamedTuple):
    best_widen: int
    best_deepen: int
    best_accuracy: float
    table: List[GridRow]
    best_network: NetworkSpec


@dataclass(frozen=True)
class _GridTask:
    spec: NetworkSpec
    train_set: LabeledImageSet
    test_set: LabeledImageSet
    epochs: int
    seed: int
    trainer: Trainer


def _evaluate_cell(task: _GridTask) -> Tuple[TrainingCurve, float]:
    start = time.perf_counter()
    curve = task.trainer(task.spec, task.train_set, task.test_set, task.epochs, seed=task.seed)
    return curve, time.perf_counter() - start


def grid_search_target(block: BlockSpec, grid: GridConfig, trainer: Optional[Trainer] = None) -> GridResult:
    trainer = trainer or AdamTrainer()
    train_set, test_set = grid.target_split()

    specs: Dict[Tuple[int, int], NetworkSpec] = {}
    notes: Dict[Tuple[int, int], str] = {}
    for widen, deepen in grid.cells():
        try:
            specs[widen, deepen] = build_network(
                block,
                widen,
                deepen,
                grid.target.input_shape,
                grid.target.num_classes,
                grid.stem,
                grid.growth_cap,
            )
        except (SpatialUnderflow, CapExceeded) as e:
            notes[widen, deepen] = type(e).__name__
            _logger.info("grid cell widen=%d deepen=%d is infeasible: %s", widen, deepen, e)

    if not specs:
        raise AllCellsInfeasible(f"none of the {len(grid.cells())} grid cells can be built for the target")

    feasible = [cell for cell in grid.cells() if cell in specs]
    tasks = [
        _GridTask(specs[cell], train_set, test_set, grid.eval_epochs, derive_seed(grid.seed, "grid", *cell), trainer)
        for cell in feasible
    ]
    outcomes = dict(zip(feasible, _parallel_map(_evaluate_cell, tasks, grid.parallelism)))

    table = []
    for widen, deepen in grid.cells():
        if (widen, deepen) in outcomes:
            curve, seconds = outcomes[widen, deepen]
            table.append(
                GridRow(
                    widen,
                    deepen,
                    curve.best_accuracy,
                    count_parameters(specs[widen, deepen]),
                    seconds if grid.record_timings else None,
                )
            )
        else:
            table.append(GridRow(widen, deepen, None, None, note=notes[widen, deepen]))

    # Ties: fewer parameters, then smaller widen, then smaller deepen.
    best = min(
        (row for row in table if row.feasible),
        key=lambda row: (-row.accuracy, row.params, row.widen, row.deepen),
    )
    _logger.info(
        "grid argmax widen=%d deepen=%d accuracy %.4f (%d parameters)", best.widen, best.deepen, best.accuracy, best.params
    )
    return GridResult(best.widen, best.deepen, best.accuracy, table, specs[best.widen, best.deepen])


# Pipeline and artifacts


@dataclass
class PipelineResult:
    network: NetworkSpec
    evolution: EvolutionResult
    transfers: List[GridResult]
    wall_clock_seconds: float


def run_pipeline(
    source_config: SourceConfig,
    grid_configs: Union[GridConfig, Sequence[GridConfig]],
    trainer: Optional[Trainer] = None,
    out_dir: Optional[Path] = None,
    run_id: str = "run",
) -> PipelineResult:
    """
    Source-domain evolution followed by target-domain grid search. The block is evolved once and transferred to every
    given target.
    """
    if isinstance(grid_configs, GridConfig):
        grid_configs = [grid_configs]
    if not grid_configs:
        raise SearchError("the pipeline needs at least one target")

    start = time.perf_counter()
    _logger.info("source domain: evolving on %s", ", ".join(s.name for s in source_config.sources))
    evolution = evolve_source(source_config, trainer, run_id)
    _logger.info("evolved block %s (fitness %.4f)", list(evolution.best_block.growth_rates), evolution.best_fitness)

    transfers = []
    for grid in grid_configs:
        _logger.info("target domain: grid search on %s", grid.target.name)
        transfers.append(grid_search_target(evolution.best_block, grid, trainer))
    wall_clock = time.perf_counter() - start

    result = PipelineResult(transfers[0].best_network, evolution, transfers, wall_clock)
    if out_dir is not None:
        write_pipeline_bundle(Path(out_dir), result)
    return result


GRID_COLUMNS = ("widen", "deepen", "accuracy", "params", "seconds")


def write_grid_table_csv(table: Sequence[GridRow], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(GRID_COLUMNS)
        for row in table:
            writer.writerow(
                [
                    row.widen,
                    row.deepen,
                    "" if row.accuracy is None else repr(float(row.accuracy)),
                    "" if row.params is None else row.params,
                    "" if row.seconds is None else f"{row.seconds:.3f}",
                ]
            )


def read_grid_table_csv(path: Path) -> List[GridRow]:
    with open(path, newline="") as f:
        return [
            GridRow(
                widen=int(row["widen"]),
                deepen=int(row["deepen"]),
                accuracy=float(row["accuracy"]) if row["accuracy"] else None,
                params=int(row["params"]) if row["params"] else None,
                seconds=float(row["seconds"]) if row["seconds"] else None,
            )
            for row in csv.DictReader(f)
        ]


def write_evolution_bundle(out_dir: Path, evolution: EvolutionResult, extra: Optional[Dict] = None) -> None:
    out_dir = Path(out_dir)
    write_json(out_dir / "block.json", evolution.best_block.to_dict())
    write_history_csv(evolution.history, out_dir / "evolution_history.csv")
    for source in evolution.archive.sources:
        evolution.archive.write_csv(source, out_dir / f"curves_{source}.csv")
    if evolution.models is not None:
        for source, model in zip(evolution.archive.sources, evolution.models):
            model.save(out_dir / f"surrogate_{source}.json")
    write_json(
        out_dir / "ledger.json",
        {"best_fitness": evolution.best_fitness, **evolution.ledger.to_dict(), **(extra or {})},
    )


def write_grid_bundle(out_dir: Path, grid: GridResult) -> None:
    out_dir = Path(out_dir)
    write_json(out_dir / "network.json", grid.best_network.to_dict())
    write_grid_table_csv(grid.table, out_dir / "grid_table.csv")


def grid_summary(grid: GridResult) -> Dict:
    return {
        "widen": grid.best_widen,
        "deepen": grid.best_deepen,
        "accuracy": grid.best_accuracy,
        "params": count_parameters(grid.best_network),
    }


def write_pipeline_bundle(out_dir: Path, result: PipelineResult) -> None:
    # The first target's artifacts live at the top of the bundle, further targets in target-<index>/.
    write_grid_bundle(out_dir, result.transfers[0])
    for index, grid in enumerate(result.transfers[1:], start=1):
        write_grid_bundle(out_dir / f"target-{index}", grid)
    write_evolution_bundle(
        out_dir,
        result.evolution,
        extra={
            "grid_argmax": [grid_summary(grid) for grid in result.transfers],
            "wall_clock_seconds": result.wall_clock_seconds,
        },
    )
