"""Shared fixtures: the synthetic problem and trained ensembles.

Training is expensive relative to everything else, so the trained artifacts
are session-scoped and their wall-clock build time is recorded for the
runtime-budget assertions in the acceptance suite.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import pytest

from spikecp.experiments import SyntheticSpec, generate_batch
from spikecp.snn import Architecture
from spikecp.training import Ensemble, TrainConfig, VariationalPosterior, train_deep_ensemble, train_vi

CHECKPOINTS = (20, 40, 60, 80)
FIXTURE_ARCH = Architecture((40, 32, 4))
TRAIN_SPEC = SyntheticSpec(seed=21)
POOL_SPEC = SyntheticSpec(seed=22)
N_TRAIN = 400
N_POOL = 600

# pilot-tuned: reaches ~98% train-distribution accuracy at the horizon
DE_CONFIG = TrainConfig(epochs=30, batch_size=64, learning_rate=2e-3, seed=5)
VI_CONFIG = TrainConfig(epochs=80, batch_size=64, learning_rate=5e-3, seed=5)


@dataclass
class Problem:
    arch: Architecture
    train: tuple[np.ndarray, np.ndarray]
    pool: tuple[np.ndarray, np.ndarray]
    checkpoints: tuple[int, ...] = CHECKPOINTS

    @property
    def horizon(self) -> int:
        return self.train[0].shape[1]


@dataclass
class Trained:
    de: Ensemble
    vi: VariationalPosterior
    seconds: float
    vi_history: list = field(default_factory=list)


@pytest.fixture(scope="session")
def problem() -> Problem:
    return Problem(
        arch=FIXTURE_ARCH,
        train=generate_batch(TRAIN_SPEC, N_TRAIN),
        pool=generate_batch(POOL_SPEC, N_POOL),
    )


@pytest.fixture(scope="session")
def trained(problem: Problem) -> Trained:
    start = time.perf_counter()
    de = train_deep_ensemble(problem.train, problem.arch, DE_CONFIG, 6)
    history: list = []
    vi = train_vi(
        problem.train, problem.arch, VI_CONFIG, on_epoch=lambda e, l: history.append(l)
    )
    return Trained(de=de, vi=vi, seconds=time.perf_counter() - start, vi_history=history)
