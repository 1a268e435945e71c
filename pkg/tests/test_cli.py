import logging

import pytest

from _blockevo.cli import EXIT_CONFIG, EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main
from _blockevo.data import synth_blobs
from _blockevo.search import GridConfig, run_pipeline
from test_search import source_config

TINY_RUN = """
[run]
record_timings = false

[codec]
max_layers = 3
disable_sentinel = 4
growth_max = 4

[pso]
population_size = 3
generations = 2
v_clamp = 1.5

[evolution]
full_epochs = 3
window = 2

[surrogate]
iterations = 200

[train]
lr = 0.01
batch_size = 8

[stem]
out_channels = 4

[grid]
widen = [1, 1]
deepen = [1, 2]
eval_epochs = 2

[[sources]]
name = "small"
kind = "blobs"
num_classes = 2
samples_per_class = 6
image_size = 8
noise_std = 0.1

[target]
name = "target"
kind = "blobs"
num_classes = 2
samples_per_class = 8
image_size = 8
noise_std = 0.1
"""


@pytest.fixture(autouse=True)
def release_warnings():
    yield
    logging.captureWarnings(False)


def snapshot(directory):
    return {str(p.relative_to(directory)): p.read_bytes() for p in sorted(directory.rglob("*")) if p.is_file()}


@pytest.fixture
def finished_run(tmp_path, curve_trainer):
    out = tmp_path / "finished"
    grid = GridConfig(target=synth_blobs(2, 10, 16, 0.05, seed=3, name="t"), widen_range=(1, 2), deepen_range=(2, 3))
    run_pipeline(source_config(), grid, curve_trainer, out_dir=out)
    return out


class TestUsage:
    def test_missing_block(self):
        assert main(["gridsearch"]) == EXIT_USAGE

    def test_unknown_command(self, capsys):
        assert main(["transmogrify"]) == EXIT_USAGE
        assert "unknown command" in capsys.readouterr().err

    def test_bad_integer(self):
        assert main(["evolve", "--seed", "minus-one"]) == EXIT_USAGE

    def test_seed_out_of_range(self):
        assert main(["evolve", "--seed", str(2**64)]) == EXIT_USAGE


class TestErrors:
    def test_unknown_config_key(self, tmp_path, capsys):
        config = tmp_path / "run.toml"
        config.write_text("[pso]\npopulation_sise = 4\n")
        assert main(["evolve", "--config", str(config), "--out", str(tmp_path / "out")]) == EXIT_CONFIG
        assert "pso.population_sise" in capsys.readouterr().err

    def test_missing_block_file(self, tmp_path, capsys):
        config = tmp_path / "run.toml"
        config.write_text(TINY_RUN)
        code = main(
            ["gridsearch", "--block", str(tmp_path / "absent.json"), "--config", str(config), "--out", str(tmp_path / "o")]
        )
        assert code == EXIT_FAILURE
        assert capsys.readouterr().err.startswith("Error:")

    def test_report_on_missing_directory(self, tmp_path):
        assert main(["report", str(tmp_path / "nothing")]) == EXIT_FAILURE


class TestReport:
    def test_summary(self, finished_run, capsys):
        before = snapshot(finished_run)
        assert main(["report", str(finished_run)]) == EXIT_OK
        out = capsys.readouterr().out
        assert "gating rate" in out
        assert "grid argmax" in out
        assert "wall clock" in out
        assert snapshot(finished_run) == before

    def test_several_runs_and_csv(self, finished_run, tmp_path, capsys):
        csv_path = tmp_path / "fitness.csv"
        assert main(["report", str(finished_run), str(finished_run), "--csv", str(csv_path)]) == EXIT_OK
        assert "over 2 runs" in capsys.readouterr().out
        lines = csv_path.read_text().splitlines()
        assert lines[0] == "run,generation,global_best_fitness,evaluations_performed,evaluations_gated"
        assert len(lines) == 1 + 2 * 3


@pytest.mark.slow
class TestEndToEnd:
    def test_pipeline_is_reproducible(self, tmp_path):
        config = tmp_path / "tiny.toml"
        config.write_text(TINY_RUN)
        for parent in ("first", "second"):
            argv = ["pipeline", "--config", str(config), "--seed", "1", "--out", str(tmp_path / parent / "run")]
            assert main(argv + ["--parallelism", "1", "--quiet"]) == EXIT_OK

        first, second = snapshot(tmp_path / "first" / "run"), snapshot(tmp_path / "second" / "run")
        for name in ("block.json", "network.json", "grid_table.csv", "evolution_history.csv"):
            assert first[name] == second[name]
        assert "config.json" in first

    def test_train_a_written_network(self, tmp_path, capsys):
        config = tmp_path / "tiny.toml"
        config.write_text(TINY_RUN)
        out = tmp_path / "run"
        assert main(["pipeline", "--config", str(config), "--out", str(out), "--quiet"]) == EXIT_OK
        capsys.readouterr()

        checkpoint = tmp_path / "weights.ckpt"
        code = main(
            ["train", "--network", str(out / "network.json"), "--epochs", "2", "--config", str(config),
             "--checkpoint", str(checkpoint)]
        )
        assert code == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "epoch,loss,accuracy"
        assert len(lines) == 3
        assert checkpoint.exists()
