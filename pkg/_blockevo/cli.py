import logging
import sys
import time
from pathlib import Path
from typing import Any, Dict, List, Optional

from docopt import ParsedOptions

from _blockevo.arch import BlockSpec, NetworkSpec
from _blockevo.config import RunConfig, parse_config
from _blockevo.nn import save_checkpoint, train
from _blockevo.report import report
from _blockevo.search import (
    evolve_source,
    grid_search_target,
    run_pipeline,
    write_evolution_bundle,
    write_grid_bundle,
)
from _blockevo.utils import (
    COMMANDS,
    ConfigError,
    ExtendedCommand,
    UsageError,
    UserError,
    describe,
    docopt,
    read_json,
    register_command,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_FAILURE = 3

USAGE = """
Evolve a dense block on small source datasets, then widen and deepen it for a target dataset.

Usage:
    blockevo <command> [<args>...]
    blockevo (-h | --help)

Commands:
    evolve       Evolve a dense block on the source datasets
    gridsearch   Grid search widening and deepening of an evolved block on the target
    pipeline     Both stages in one run
    train        Train one serialized network on the target and print its curve
    report       Summarize finished run directories
    shell        Inspect a run directory in ptpython (if installed)
"""


def configure_logging(quiet: bool = False) -> None:
    logging.basicConfig(
        level=logging.WARNING if quiet else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    logging.captureWarnings(True)


def _int_option(opts: ParsedOptions, name: str, minimum: int = 0) -> Optional[int]:
    value = opts.get(name)
    if value is None:
        return None
    try:
        number = int(value)
    except ValueError:
        raise UsageError(f"{name} expects an integer, got '{value}'")
    if number < minimum:
        raise UsageError(f"{name} must be >= {minimum}")
    if name == "--seed" and number >= 2**64:
        raise UsageError("--seed must fit in 64 bits")
    return number


class RunCommand(ExtendedCommand):
    """Shared handling of --config, --seed, --out, --parallelism and --quiet."""

    write_echo = True

    def load_config(self, opts: ParsedOptions) -> RunConfig:
        overrides: Dict[str, Any] = {
            "run.seed": _int_option(opts, "--seed"),
            "run.out": opts.get("--out"),
            "run.parallelism": _int_option(opts, "--parallelism"),
        }
        config_path = Path(opts["--config"]) if opts.get("--config") else None
        return parse_config(config_path, overrides, echo=self.write_echo)

    def invoke_with_options(self, opts: ParsedOptions) -> int:
        configure_logging(opts.get("--quiet", False))
        config = self.load_config(opts)
        return self.run(config, opts)

    def run(self, config: RunConfig, opts: ParsedOptions) -> int:
        raise NotImplementedError


@register_command
class EvolveCommand(RunCommand):
    """
    Evolve a dense block with PSO on the source datasets and write block.json, evolution_history.csv, ledger.json and
    the learning-curve archive to the output directory.

    Usage: blockevo evolve [options]

    Options:
        --config PATH      Run configuration (TOML)
        --seed U64         Top-level seed, overrides run.seed
        --out DIR          Output directory, overrides run.out and $BLOCKEVO_OUT
        --parallelism N    Worker processes, 0 for every core
        --quiet            Only log warnings
    """

    name = "evolve"

    def run(self, config: RunConfig, opts: ParsedOptions) -> int:
        start = time.perf_counter()
        result = evolve_source(config.source_config(), config.trainer(), run_id=config.out.name)
        wall_clock = time.perf_counter() - start
        write_evolution_bundle(config.out, result, extra={"wall_clock_seconds": wall_clock})
        print(f"evolved block {list(result.best_block.growth_rates)} (fitness {result.best_fitness:.4f})")
        print(f"artifacts in {config.out}")
        return EXIT_OK


@register_command
class GridSearchCommand(RunCommand):
    """
    Widen and deepen an evolved block on the target dataset, evaluating every cell of the grid. Writes network.json and
    grid_table.csv to the output directory.

    Usage: blockevo gridsearch --block PATH [options]

    Options:
        --block PATH       block.json written by evolve
        --config PATH      Run configuration (TOML)
        --seed U64         Top-level seed, overrides run.seed
        --out DIR          Output directory, overrides run.out and $BLOCKEVO_OUT
        --parallelism N    Worker processes, 0 for every core
        --quiet            Only log warnings
    """

    name = "gridsearch"

    def run(self, config: RunConfig, opts: ParsedOptions) -> int:
        block = BlockSpec.from_dict(read_json(Path(opts["--block"])))
        result = grid_search_target(block, config.grid_config(), config.trainer())
        write_grid_bundle(config.out, result)
        print(
            f"best cell widen={result.best_widen} deepen={result.best_deepen} "
            f"accuracy {result.best_accuracy:.4f}"
        )
        print(f"artifacts in {config.out}")
        return EXIT_OK


@register_command
class PipelineCommand(RunCommand):
    """
    Run both stages: evolve a block on the source datasets, then grid search its widening and deepening on the target.

    Usage: blockevo pipeline [options]

    Options:
        --config PATH      Run configuration (TOML)
        --seed U64         Top-level seed, overrides run.seed
        --out DIR          Output directory, overrides run.out and $BLOCKEVO_OUT
        --parallelism N    Worker processes, 0 for every core
        --quiet            Only log warnings
    """

    name = "pipeline"

    def run(self, config: RunConfig, opts: ParsedOptions) -> int:
        grid = config.grid_config()
        result = run_pipeline(
            config.source_config(), grid, config.trainer(), out_dir=config.out, run_id=config.out.name
        )
        transfer = result.transfers[0]
        print(
            f"evolved block {list(result.evolution.best_block.growth_rates)}, "
            f"best cell widen={transfer.best_widen} deepen={transfer.best_deepen} "
            f"accuracy {transfer.best_accuracy:.4f}"
        )
        print(f"artifacts in {config.out}")
        return EXIT_OK


@register_command
class TrainCommand(RunCommand):
    """
    Train one serialized network on the target dataset and print its learning curve as CSV.

    Usage: blockevo train --network PATH [--epochs N] [--checkpoint PATH] [options]

    Options:
        --network PATH     network.json written by gridsearch or pipeline
        --epochs N         Training epochs, grid.eval_epochs when omitted
        --checkpoint PATH  Write the trained parameters to PATH
        --config PATH      Run configuration (TOML)
        --seed U64         Top-level seed, overrides run.seed
        --quiet            Only log warnings
    """

    name = "train"
    write_echo = False

    def run(self, config: RunConfig, opts: ParsedOptions) -> int:
        spec = NetworkSpec.from_dict(read_json(Path(opts["--network"])), growth_cap=config.growth_cap)
        grid = config.grid_config()
        train_set, test_set = grid.target_split()
        if spec.input_shape != train_set.input_shape or spec.num_classes != train_set.num_classes:
            raise UsageError(
                f"network expects {spec.input_shape} inputs and {spec.num_classes} classes, the target has "
                f"{train_set.input_shape} and {train_set.num_classes}"
            )

        epochs = _int_option(opts, "--epochs", minimum=1) or config.eval_epochs

        curve, params = train(
            spec,
            train_set,
            test_set,
            epochs,
            hyper=config.train.hyper,
            batch_size=config.train.batch_size,
            seed=grid.seed,
        )
        print("epoch,loss,accuracy")
        for epoch, (loss, acc) in enumerate(zip(curve.losses, curve.accuracies)):
            print(f"{epoch},{loss!r},{acc!r}")
        if opts["--checkpoint"]:
            save_checkpoint(params, Path(opts["--checkpoint"]))
        return EXIT_OK


@register_command
class ReportCommand(ExtendedCommand):
    """
    Summarize finished runs: gating rate, best fitness per generation and the grid argmax. With several run
    directories an aggregate over the runs follows. Run directories are only read.

    Usage: blockevo report <run_dir>... [--csv PATH]

    Options:
        --csv PATH    Also write the per-generation fitness of every run as CSV, for plotting
    """

    name = "report"

    def invoke_with_options(self, opts: ParsedOptions) -> int:
        csv_path = Path(opts["--csv"]) if opts["--csv"] else None
        print(report([Path(d) for d in opts["<run_dir>"]], csv_path), end="")
        return EXIT_OK


try:
    import _blockevo.repl  # noqa: F401
except ImportError:
    pass


def main(argv: Optional[List[str]] = None) -> int:
    opts = docopt(USAGE, argv, options_first=True)
    if opts is None:
        return EXIT_USAGE

    name = opts["<command>"]
    command = COMMANDS.get(name)
    if command is None:
        print(f"Error: unknown command '{name}'", file=sys.stderr)
        print(USAGE.strip(), file=sys.stderr)
        return EXIT_USAGE

    try:
        return command.invoke_with_argv([name, *opts["<args>"]])
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(e, file=sys.stderr)
        return EXIT_CONFIG
    except UserError as e:
        print(e, file=sys.stderr)
        return EXIT_FAILURE
    except Exception as e:
        print(f"Error: {name} failed: {describe(e)}", file=sys.stderr)
        return EXIT_FAILURE
