import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import List

import numpy as np
import pytest

ROOT_DIR = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT_DIR))

from _blockevo.data import synth_blobs  # noqa: E402
from _blockevo.surrogate import TrainingCurve  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains real networks end to end")


@dataclass
class CurveTrainer:
    """
    Stand-in trainer: a smooth curve whose final accuracy depends only on the network's total growth, peaking at
    `target_width`. Deterministic, so a shorter run is a prefix of a longer one.
    """

    target_width: int = 40
    calls: List = field(default_factory=list)

    def __call__(self, spec, train_set, test_set, epochs, seed):
        self.calls.append((spec, epochs, seed))
        width = sum(spec.widened_block.growth_rates) * spec.deepen
        final = 0.5 + 0.4 * np.exp(-abs(width - self.target_width) / 20.0)
        t = np.arange(1, epochs + 1, dtype=np.float64)
        accuracies = final * (1.0 - np.exp(-t / 3.0))
        losses = 2.0 * np.exp(-t / 4.0) + (1.0 - final)
        return TrainingCurve(tuple(losses), tuple(accuracies))


@pytest.fixture
def curve_trainer():
    return CurveTrainer()


@pytest.fixture
def tiny_blobs():
    return synth_blobs(num_classes=2, per_class=10, image_size=8, noise_std=0.05, seed=0, name="tiny")
