"""
Run configuration: a TOML (or resolved JSON) document merged over the default parameter settings, with strict keys.

    [run]        seed, out, parallelism, record_timings
    [codec]      max_layers, disable_sentinel, growth_min, growth_max
    [pso]        w, c1, c2, v_clamp, population_size, generations
    [evolution]  full_epochs, window, train_fraction
    [surrogate]  reg, iterations
    [train]      lr, beta1, beta2, eps, batch_size, dtype
    [stem]       kernel_size, out_channels
    [grid]       widen, deepen, eval_epochs, growth_cap
    [[sources]]  one table per source dataset
    [target]     the target dataset

Datasets are either IDX files (kind = "idx") or seeded synthetic blobs (kind = "blobs").
"""

import copy
import json
import logging
import os
import re
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from _blockevo.arch import CodecConfig, StemSpec
from _blockevo.data import LabeledImageSet, blobs_manifest, downsample, from_manifest, load_idx, stratified_subset
from _blockevo.nn import AdamHyper
from _blockevo.pso import PsoConfig
from _blockevo.search import AdamTrainer, GridConfig, Source, SourceConfig, TrainSettings
from _blockevo.utils import InvariantViolation, ParseError, UnknownKey, UserError, derive_seed, write_json

_logger = logging.getLogger(__name__)

OUT_ENV = "BLOCKEVO_OUT"
DEFAULT_OUT_ROOT = "runs"
ECHO_NAME = "config.json"

DEFAULTS: Dict[str, Dict[str, Any]] = {
    "run": {"seed": 0, "out": None, "parallelism": 0, "record_timings": False},
    "codec": {"max_layers": 16, "disable_sentinel": 7, "growth_min": 1, "growth_max": 32},
    "pso": {
        "w": 0.7298,
        "c1": 1.49618,
        "c2": 1.49618,
        "v_clamp": 12.5,
        "population_size": 30,
        "generations": 50,
    },
    "evolution": {"full_epochs": 50, "window": 10, "train_fraction": 0.8},
    "surrogate": {"reg": 1e-3, "iterations": 10_000},
    "train": {"lr": 1e-3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "batch_size": 32, "dtype": "float64"},
    "stem": {"kernel_size": 3, "out_channels": 16},
    "grid": {"widen": [1, 3], "deepen": [2, 5], "eval_epochs": None, "growth_cap": 512},
}

# (type, required for kind)
DATASET_KEYS: Dict[str, Tuple[type, Optional[str]]] = {
    "name": (str, None),
    "kind": (str, None),
    "weight": (float, None),
    "downsample": (int, None),
    "per_class": (int, None),
    "num_classes": (int, "blobs"),
    "images": (str, "idx"),
    "labels": (str, "idx"),
    "test_images": (str, None),
    "test_labels": (str, None),
    "samples_per_class": (int, "blobs"),
    "image_size": (int, "blobs"),
    "noise_std": (float, "blobs"),
    "channels": (int, None),
    "seed": (int, None),
}

_TOML_LINE = re.compile(r"line (\d+)")


def _check_type(key: str, value: Any, expected: type) -> Any:
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if expected is int and isinstance(value, bool):
        raise InvariantViolation(key, f"expected an integer, got {value!r}")
    if not isinstance(value, expected):
        raise InvariantViolation(key, f"expected {expected.__name__}, got {value!r}")
    return value


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    kind: str
    weight: float = 1.0
    downsample: int = 1
    per_class: Optional[int] = None
    num_classes: Optional[int] = None
    images: Optional[Path] = None
    labels: Optional[Path] = None
    test_images: Optional[Path] = None
    test_labels: Optional[Path] = None
    samples_per_class: Optional[int] = None
    image_size: Optional[int] = None
    noise_std: Optional[float] = None
    channels: int = 1
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        key = f"dataset '{self.name}'"
        if self.kind not in ("idx", "blobs"):
            raise InvariantViolation(f"{key}.kind", f"must be 'idx' or 'blobs', got {self.kind!r}")
        for field_name, (_, required_for) in DATASET_KEYS.items():
            if required_for == self.kind and getattr(self, field_name) is None:
                raise InvariantViolation(f"{key}.{field_name}", f"is required for kind = '{self.kind}'")
        if not self.weight > 0:
            raise InvariantViolation(f"{key}.weight", "must be > 0")
        if self.downsample < 1:
            raise InvariantViolation(f"{key}.downsample", "must be >= 1")
        if self.per_class is not None and self.per_class < 1:
            raise InvariantViolation(f"{key}.per_class", "must be >= 1")
        if (self.test_images is None) != (self.test_labels is None):
            raise InvariantViolation(f"{key}.test_images", "test_images and test_labels go together")
        for field_name in ("images", "labels", "test_images", "test_labels"):
            path = getattr(self, field_name)
            if path is not None and not Path(path).exists():
                raise InvariantViolation(f"{key}.{field_name}", f"{path} does not exist")

    @classmethod
    def from_document(cls, document: Dict[str, Any], where: str, default_name: str, base_dir: Path) -> "DatasetSpec":
        values: Dict[str, Any] = {}
        for key, value in document.items():
            if key not in DATASET_KEYS:
                raise UnknownKey(f"{where}.{key}")
            if value is None:
                continue
            values[key] = _check_type(f"{where}.{key}", value, DATASET_KEYS[key][0])
        if "kind" not in values:
            raise InvariantViolation(f"{where}.kind", "is required")
        for key in ("images", "labels", "test_images", "test_labels"):
            if key in values:
                values[key] = (base_dir / Path(values[key]).expanduser()).resolve()
        values.setdefault("name", default_name)
        return cls(**values)

    def to_document(self) -> Dict[str, Any]:
        document = {}
        for key in DATASET_KEYS:
            value = getattr(self, key)
            if value is not None:
                document[key] = str(value) if isinstance(value, Path) else value
        return document

    def manifest(self, run_seed: int) -> Optional[Dict[str, Any]]:
        """Generator parameters and seed of a blobs dataset, before downsampling and subsetting."""
        if self.kind != "blobs":
            return None
        seed = self.seed if self.seed is not None else derive_seed(run_seed, "blobs", self.name)
        return blobs_manifest(
            self.num_classes, self.samples_per_class, self.image_size, self.noise_std, seed, channels=self.channels
        )

    def load(self, run_seed: int) -> Tuple[LabeledImageSet, Optional[LabeledImageSet]]:
        """The dataset, and its own test split when one is given."""
        if self.kind == "idx":
            dataset = load_idx(self.images, self.labels, self.num_classes, self.name)
            test = None
            if self.test_images is not None:
                test = load_idx(self.test_images, self.test_labels, dataset.num_classes, f"{self.name}/test")
        else:
            dataset = from_manifest(self.manifest(run_seed), self.name)
            test = None

        if self.downsample > 1:
            dataset = downsample(dataset, self.downsample)
            test = downsample(test, self.downsample) if test is not None else None
        if self.per_class is not None:
            dataset = stratified_subset(dataset, self.per_class, derive_seed(run_seed, "subset", self.name))
        _logger.info("loaded %s: %d images of shape %s", self.name, len(dataset), dataset.input_shape)
        return dataset, test


@dataclass(frozen=True)
class RunConfig:
    seed: int
    out: Path
    parallelism: int
    record_timings: bool
    codec: CodecConfig
    pso: PsoConfig
    full_epochs: int
    window: int
    train_fraction: float
    surrogate_reg: float
    surrogate_iterations: int
    train: TrainSettings
    stem: StemSpec
    widen_range: Tuple[int, int]
    deepen_range: Tuple[int, int]
    eval_epochs: int
    growth_cap: int
    sources: Tuple[DatasetSpec, ...] = ()
    target: Optional[DatasetSpec] = None

    def __post_init__(self) -> None:
        if self.seed < 0:
            raise InvariantViolation("run.seed", "must be a non-negative integer")
        if self.parallelism < 1:
            raise InvariantViolation("run.parallelism", "must be >= 0 (0 uses every core)")
        if not 0.0 < self.train_fraction < 1.0:
            raise InvariantViolation("evolution.train_fraction", "must lie in (0, 1)")
        names = [source.name for source in self.sources]
        if len(set(names)) != len(names):
            raise InvariantViolation("sources", f"source names must be unique, got {names}")

    def resolved(self) -> Dict[str, Any]:
        document: Dict[str, Any] = {
            "run": {
                "seed": self.seed,
                "out": str(self.out),
                "parallelism": self.parallelism,
                "record_timings": self.record_timings,
            },
            "codec": {
                "max_layers": self.codec.max_layers,
                "disable_sentinel": self.codec.disable_sentinel,
                "growth_min": self.codec.growth_min,
                "growth_max": self.codec.growth_max,
            },
            "pso": {
                "w": self.pso.w,
                "c1": self.pso.c1,
                "c2": self.pso.c2,
                "v_clamp": self.pso.v_clamp,
                "population_size": self.pso.population_size,
                "generations": self.pso.generations,
            },
            "evolution": {
                "full_epochs": self.full_epochs,
                "window": self.window,
                "train_fraction": self.train_fraction,
            },
            "surrogate": {"reg": self.surrogate_reg, "iterations": self.surrogate_iterations},
            "train": {
                "lr": self.train.hyper.lr,
                "beta1": self.train.hyper.beta1,
                "beta2": self.train.hyper.beta2,
                "eps": self.train.hyper.eps,
                "batch_size": self.train.batch_size,
                "dtype": self.train.dtype,
            },
            "stem": self.stem.to_dict(),
            "grid": {
                "widen": list(self.widen_range),
                "deepen": list(self.deepen_range),
                "eval_epochs": self.eval_epochs,
                "growth_cap": self.growth_cap,
            },
            "sources": [source.to_document() for source in self.sources],
        }
        if self.target is not None:
            document["target"] = self.target.to_document()
        return document

    def write_echo(self, out_dir: Optional[Path] = None) -> Path:
        path = Path(out_dir or self.out) / ECHO_NAME
        write_json(path, self.resolved())
        datasets = self.sources if self.target is None else (*self.sources, self.target)
        for spec in datasets:
            manifest = spec.manifest(self.seed)
            if manifest is not None:
                write_json(path.parent / f"blobs-{spec.name}.json", manifest)
        return path

    def trainer(self) -> AdamTrainer:
        return AdamTrainer(self.train)

    def source_config(self) -> SourceConfig:
        sources = []
        for spec in self.sources:
            dataset, _ = spec.load(self.seed)
            sources.append(Source(dataset, spec.weight))
        return SourceConfig(
            sources=tuple(sources),
            codec=self.codec,
            pso=self.pso,
            full_epochs=self.full_epochs,
            window=self.window,
            seed=derive_seed(self.seed, "evolution"),
            train_fraction=self.train_fraction,
            surrogate_reg=self.surrogate_reg,
            surrogate_iterations=self.surrogate_iterations,
            stem=self.stem,
            growth_cap=self.growth_cap,
            parallelism=self.parallelism,
        )

    def grid_config(self) -> GridConfig:
        if self.target is None:
            raise InvariantViolation("target", "a [target] dataset is required for grid search")
        target, target_test = self.target.load(self.seed)
        return GridConfig(
            target=target,
            widen_range=self.widen_range,
            deepen_range=self.deepen_range,
            eval_epochs=self.eval_epochs,
            seed=derive_seed(self.seed, "grid"),
            target_test=target_test,
            train_fraction=self.train_fraction,
            stem=self.stem,
            growth_cap=self.growth_cap,
            parallelism=self.parallelism,
            record_timings=self.record_timings,
        )


def _read_document(path: Path) -> Dict[str, Any]:
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise UserError(f"config file {path} does not exist")

    if Path(path).suffix == ".json":
        try:
            document = json.loads(text)
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}: {e.msg}", line=e.lineno)
        if not isinstance(document, dict):
            raise ParseError(f"{path}: top level must be an object", line=1)
        return document

    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        match = _TOML_LINE.search(str(e))
        raise ParseError(f"{path}: {e}", line=int(match.group(1)) if match else None)


def _merge(document: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(DEFAULTS)
    for section, values in document.items():
        if section in ("sources", "target"):
            continue
        if section not in DEFAULTS:
            raise UnknownKey(section)
        if not isinstance(values, dict):
            raise InvariantViolation(section, "must be a table")
        for key, value in values.items():
            if key not in DEFAULTS[section]:
                raise UnknownKey(f"{section}.{key}")
            if value is None:
                continue
            default = DEFAULTS[section][key]
            if isinstance(default, list):
                if not (isinstance(value, list) and len(value) == 2 and all(type(v) is int for v in value)):
                    raise InvariantViolation(f"{section}.{key}", f"expected [low, high] integers, got {value!r}")
            elif default is not None:
                value = _check_type(f"{section}.{key}", value, type(default))
            elif key == "out":
                value = _check_type(f"{section}.{key}", value, str)
            else:
                value = _check_type(f"{section}.{key}", value, int)
            merged[section][key] = value
    return merged


def _apply_overrides(document: Dict[str, Any], overrides: Dict[str, Any]) -> None:
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        document.setdefault(section, {})[key] = value


def _default_out(path: Optional[Path], seed: int) -> Path:
    root = Path(os.environ.get(OUT_ENV) or DEFAULT_OUT_ROOT)
    stem = Path(path).stem if path is not None else "defaults"
    return root / f"{stem}-seed{seed}"


def parse_config(
    path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None, *, echo: bool = True
) -> RunConfig:
    """
    Load a run configuration. `overrides` maps dotted keys ("run.seed") to values that take precedence over the file;
    None values are ignored. With `echo` the fully resolved configuration is written to the run directory as JSON,
    which parse_config accepts back unchanged.
    """
    document = _read_document(path) if path is not None else {}
    if overrides:
        _apply_overrides(document, overrides)
    merged = _merge(document)
    base_dir = Path(path).resolve().parent if path is not None else Path.cwd()

    raw_sources = document.get("sources", [])
    if isinstance(raw_sources, dict):
        raw_sources = [raw_sources]
    if not isinstance(raw_sources, list) or not all(isinstance(s, dict) for s in raw_sources):
        raise InvariantViolation("sources", "must be an array of tables")
    sources = tuple(
        DatasetSpec.from_document(s, f"sources[{i}]", f"source{i}", base_dir) for i, s in enumerate(raw_sources)
    )

    target = None
    if document.get("target") is not None:
        if not isinstance(document["target"], dict):
            raise InvariantViolation("target", "must be a table")
        target = DatasetSpec.from_document(document["target"], "target", "target", base_dir)

    run = merged["run"]
    if run["seed"] < 0:
        raise InvariantViolation("run.seed", "must be a non-negative integer")
    if run["parallelism"] < 0:
        raise InvariantViolation("run.parallelism", "must be >= 0 (0 uses every core)")
    parallelism = run["parallelism"] or os.cpu_count() or 1
    out = Path(run["out"]) if run["out"] else _default_out(path, run["seed"])

    codec = CodecConfig(**merged["codec"])
    evolution = merged["evolution"]
    window = evolution["window"]
    if window > evolution["full_epochs"] >= 1:
        warnings.warn(f"evolution.window = {window} exceeds full_epochs, using {evolution['full_epochs']}")
        window = evolution["full_epochs"]
    grid = merged["grid"]
    config = RunConfig(
        seed=run["seed"],
        out=out,
        parallelism=parallelism,
        record_timings=run["record_timings"],
        codec=codec,
        pso=PsoConfig(
            **merged["pso"],
            position_bounds=codec.bounds,
            seed=derive_seed(run["seed"], "pso"),
        ),
        full_epochs=evolution["full_epochs"],
        window=window,
        train_fraction=evolution["train_fraction"],
        surrogate_reg=merged["surrogate"]["reg"],
        surrogate_iterations=merged["surrogate"]["iterations"],
        train=TrainSettings(
            hyper=AdamHyper(**{k: merged["train"][k] for k in ("lr", "beta1", "beta2", "eps")}),
            batch_size=merged["train"]["batch_size"],
            dtype=merged["train"]["dtype"],
        ),
        stem=StemSpec(**merged["stem"]),
        widen_range=tuple(grid["widen"]),
        deepen_range=tuple(grid["deepen"]),
        eval_epochs=grid["eval_epochs"] if grid["eval_epochs"] is not None else evolution["full_epochs"],
        growth_cap=grid["growth_cap"],
        sources=sources,
        target=target,
    )

    # The sub-configs check their own invariants, and the ones for stages that are not run must hold too.
    if evolution["full_epochs"] < 1:
        raise InvariantViolation("evolution.full_epochs", "must be >= 1")
    if evolution["window"] < 1:
        raise InvariantViolation("evolution.window", "must be >= 1")
    if merged["surrogate"]["reg"] <= 0:
        raise InvariantViolation("surrogate.reg", "must be > 0")
    if merged["surrogate"]["iterations"] < 1:
        raise InvariantViolation("surrogate.iterations", "must be >= 1")
    for key, (lo, hi) in (("grid.widen", config.widen_range), ("grid.deepen", config.deepen_range)):
        if lo < 1:
            raise InvariantViolation(key, "lower bound must be >= 1")
        if hi < lo:
            raise InvariantViolation(key, f"empty range [{lo}, {hi}]")
    if config.eval_epochs < 1:
        raise InvariantViolation("grid.eval_epochs", "must be >= 1")
    if config.growth_cap < 1:
        raise InvariantViolation("grid.growth_cap", "must be >= 1")

    if echo:
        config.write_echo()
    return config
