"""
Pairwise learning-curve surrogate.

Two architectures' first W epochs (training loss and test accuracy per epoch) form one feature vector; a linear
max-margin classifier predicts whether the first will end up with the better best accuracy. During evolution the
surrogate gates the expensive full evaluation: a candidate is fully trained only if it is predicted to beat its
particle's personal best.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from _blockevo.utils import UserError, read_json, write_json

_logger = logging.getLogger(__name__)

DEFAULT_WINDOW = 10
STD_FLOOR = 1e-8


class SurrogateError(UserError):
    pass


class TooFewCurves(SurrogateError):
    pass


class ShortCurve(SurrogateError):
    def __init__(self, index: int, length: int, window: int):
        self.index = index
        super().__init__(f"curve {index} has {length} epochs, the surrogate window needs {window}")


class EmptyDataset(SurrogateError):
    pass


class SingleClass(SurrogateError):
    pass


@dataclass(frozen=True)
class TrainingCurve:
    losses: Tuple[float, ...]
    accuracies: Tuple[float, ...]

    def __post_init__(self) -> None:
        losses = tuple(float(v) for v in self.losses)
        accuracies = tuple(float(v) for v in self.accuracies)
        if not losses or len(losses) != len(accuracies):
            raise SurrogateError(
                f"a curve needs matching, non-empty loss and accuracy lists ({len(losses)} vs {len(accuracies)})"
            )
        if any(not math.isfinite(v) or v < 0 for v in losses):
            raise SurrogateError("training losses must be finite and non-negative")
        if any(not 0.0 <= v <= 1.0 for v in accuracies):
            raise SurrogateError("accuracies must be fractions in [0, 1]")
        object.__setattr__(self, "losses", losses)
        object.__setattr__(self, "accuracies", accuracies)

    @property
    def best_accuracy(self) -> float:
        return max(self.accuracies)

    @property
    def epochs(self) -> int:
        return len(self.losses)

    def prefix(self, window: int) -> "TrainingCurve":
        return TrainingCurve(self.losses[:window], self.accuracies[:window])


@dataclass(frozen=True)
class PairExample:
    features: np.ndarray
    label: int


def pair_features(a: TrainingCurve, b: TrainingCurve, window: int) -> np.ndarray:
    return np.concatenate(
        [a.losses[:window], a.accuracies[:window], b.losses[:window], b.accuracies[:window]]
    ).astype(np.float64)


def build_pair_dataset(curves: Sequence[TrainingCurve], window: int = DEFAULT_WINDOW) -> List[PairExample]:
    if len(curves) < 2:
        raise TooFewCurves(f"need at least 2 curves to build pairs, got {len(curves)}")
    for index, curve in enumerate(curves):
        if curve.epochs < window:
            raise ShortCurve(index, curve.epochs, window)

    dataset = []
    for i in range(len(curves)):
        for j in range(i + 1, len(curves)):
            a, b = curves[i], curves[j]
            if a.best_accuracy == b.best_accuracy:
                continue
            label = 1 if a.best_accuracy > b.best_accuracy else -1
            dataset.append(PairExample(pair_features(a, b, window), label))
            dataset.append(PairExample(pair_features(b, a, window), -label))
    return dataset


@dataclass(frozen=True)
class PairwiseSurrogateModel:
    weights: np.ndarray
    bias: float
    feature_means: np.ndarray
    feature_stds: np.ndarray
    train_accuracy: float = 0.0
    window: int = DEFAULT_WINDOW

    def __post_init__(self) -> None:
        shapes = {np.shape(self.weights), np.shape(self.feature_means), np.shape(self.feature_stds)}
        if len(shapes) != 1:
            raise SurrogateError("weights and standardization vectors must have the same length")

    def decision_function(self, features: np.ndarray) -> np.ndarray:
        standardized = (np.asarray(features, dtype=np.float64) - self.feature_means) / self.feature_stds
        return standardized @ self.weights + self.bias

    def to_dict(self) -> Dict:
        return {
            "weights": [float(v) for v in self.weights],
            "bias": float(self.bias),
            "means": [float(v) for v in self.feature_means],
            "stds": [float(v) for v in self.feature_stds],
            "window": self.window,
            "train_accuracy": float(self.train_accuracy),
        }

    @classmethod
    def from_dict(cls, document: Dict) -> "PairwiseSurrogateModel":
        return cls(
            weights=np.asarray(document["weights"], dtype=np.float64),
            bias=float(document["bias"]),
            feature_means=np.asarray(document["means"], dtype=np.float64),
            feature_stds=np.asarray(document["stds"], dtype=np.float64),
            train_accuracy=float(document.get("train_accuracy", 0.0)),
            window=int(document["window"]),
        )

    def save(self, path: Path) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path: Path) -> "PairwiseSurrogateModel":
        return cls.from_dict(read_json(path))


def fit(
    dataset: Sequence[PairExample],
    reg: float = 1e-3,
    iterations: int = 10_000,
    seed: int = 0,
) -> PairwiseSurrogateModel:
    """
    Fit a linear SVM with Pegasos: step 1/(reg*t) on the hinge-loss subgradient, then projection onto the ball of
    radius 1/sqrt(reg). A constant feature is appended so the bias is learned with the weights.
    """
    if not dataset:
        raise EmptyDataset("cannot fit a surrogate on an empty dataset")

    X = np.stack([example.features for example in dataset]).astype(np.float64)
    y = np.asarray([example.label for example in dataset], dtype=np.float64)
    if np.all(y == y[0]):
        raise SingleClass(f"all {len(y)} examples carry label {int(y[0])}")

    means = X.mean(axis=0)
    stds = np.maximum(X.std(axis=0), STD_FLOOR)
    Z = np.hstack([(X - means) / stds, np.ones((len(X), 1))])

    rng = np.random.default_rng(seed)
    picks = rng.integers(0, len(Z), size=iterations)
    radius = 1.0 / math.sqrt(reg)
    w = np.zeros(Z.shape[1])

    for t, i in enumerate(picks, start=1):
        eta = 1.0 / (reg * t)
        margin = y[i] * (Z[i] @ w)
        w *= 1.0 - eta * reg
        if margin < 1.0:
            w += eta * y[i] * Z[i]
        norm = np.linalg.norm(w)
        if norm > radius:
            w *= radius / norm

    predictions = np.where(Z @ w > 0.0, 1.0, -1.0)
    train_accuracy = float(np.mean(predictions == y))
    window = X.shape[1] // 4

    return PairwiseSurrogateModel(
        weights=w[:-1].copy(),
        bias=float(w[-1]),
        feature_means=means,
        feature_stds=stds,
        train_accuracy=train_accuracy,
        window=window,
    )


def predict_better(
    model: PairwiseSurrogateModel, candidate: TrainingCurve, incumbent: TrainingCurve
) -> bool:
    for index, curve in enumerate((candidate, incumbent)):
        if curve.epochs < model.window:
            raise ShortCurve(index, curve.epochs, model.window)
    score = model.decision_function(pair_features(candidate, incumbent, model.window))
    return bool(score > 0.0)


@dataclass(frozen=True)
class GateOutcome:
    fitness: float
    gated: bool
    curves: Optional[Tuple[TrainingCurve, ...]] = None
    prefixes: Optional[Tuple[TrainingCurve, ...]] = None


def gate_and_evaluate(
    models: Optional[Sequence[PairwiseSurrogateModel]],
    incumbents: Optional[Sequence[TrainingCurve]],
    train_prefix: Callable[[], Sequence[TrainingCurve]],
    full_evaluator: Callable[[], Tuple[float, Sequence[TrainingCurve]]],
) -> GateOutcome:
    """
    Surrogate-assisted fitness evaluation for one candidate.

    models and incumbents hold one entry per source dataset. Without a model or without a personal-best curve on
    record the candidate is always fully evaluated. Otherwise the candidate is trained for the surrogate window and
    fully evaluated only if every per-source model predicts it beats the incumbent; if not its fitness is exactly 0.
    """
    if models is None or incumbents is None:
        fitness, curves = full_evaluator()
        return GateOutcome(float(fitness), False, tuple(curves))

    if len(models) != len(incumbents):
        raise SurrogateError(f"{len(models)} surrogate models for {len(incumbents)} incumbent curves")

    prefixes = tuple(train_prefix())
    if len(prefixes) != len(models):
        raise SurrogateError(f"{len(prefixes)} prefix curves for {len(models)} surrogate models")

    if all(
        predict_better(model, candidate, incumbent.prefix(model.window))
        for model, candidate, incumbent in zip(models, prefixes, incumbents)
    ):
        fitness, curves = full_evaluator()
        return GateOutcome(float(fitness), False, tuple(curves), prefixes)

    return GateOutcome(0.0, True, None, prefixes)


@dataclass(frozen=True)
class ArchivedCurve:
    particle_id: int
    generation: int
    curve: TrainingCurve


@dataclass
class CurveArchive:
    """Full training curves collected at generation barriers, one list per source dataset."""

    run_id: str
    sources: Tuple[str, ...]
    entries: Dict[str, List[ArchivedCurve]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for source in self.sources:
            self.entries.setdefault(source, [])

    def add(self, particle_id: int, generation: int, curves: Sequence[TrainingCurve]) -> None:
        if len(curves) != len(self.sources):
            raise SurrogateError(f"{len(curves)} curves for {len(self.sources)} sources")
        for source, curve in zip(self.sources, curves):
            self.entries[source].append(ArchivedCurve(particle_id, generation, curve))

    def curves(self, source: str) -> List[TrainingCurve]:
        return [entry.curve for entry in self.entries[source]]

    def __len__(self) -> int:
        return len(self.entries[self.sources[0]]) if self.sources else 0

    def write_csv(self, source: str, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["run_id", "particle_id", "generation", "epoch", "loss", "accuracy"])
            for entry in self.entries[source]:
                for epoch, (loss, accuracy) in enumerate(zip(entry.curve.losses, entry.curve.accuracies)):
                    writer.writerow(
                        [self.run_id, entry.particle_id, entry.generation, epoch, repr(loss), repr(accuracy)]
                    )


def read_curves_csv(path: Path) -> List[ArchivedCurve]:
    grouped: Dict[Tuple[int, int], List[Tuple[int, float, float]]] = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            key = (int(row["generation"]), int(row["particle_id"]))
            grouped.setdefault(key, []).append((int(row["epoch"]), float(row["loss"]), float(row["accuracy"])))

    archived = []
    for (generation, particle_id), rows in grouped.items():
        rows.sort()
        curve = TrainingCurve(tuple(r[1] for r in rows), tuple(r[2] for r in rows))
        archived.append(ArchivedCurve(particle_id, generation, curve))
    return archived


def fit_per_source(
    archive: CurveArchive, window: int, reg: float, iterations: int, seeds: Iterable[int]
) -> Tuple[PairwiseSurrogateModel, ...]:
    """Refit one surrogate per source on every archived full curve."""
    models = []
    for source, seed in zip(archive.sources, seeds):
        dataset = build_pair_dataset(archive.curves(source), window)
        model = fit(dataset, reg=reg, iterations=iterations, seed=seed)
        _logger.info(
            "surrogate for %s: %d pairs, train accuracy %.3f", source, len(dataset), model.train_accuracy
        )
        models.append(model)
    return tuple(models)
