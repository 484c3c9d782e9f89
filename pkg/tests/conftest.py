import time

import numpy as np
import pytest

from otfuse.harness.task import SyntheticTask, gen_splits
from otfuse.harness.train import TrainConfig, evaluate, train_model
from otfuse.linalg import Rng
from otfuse.model import ArchConfig, init_params

PAIR_SEEDS = ((1, 2), (3, 4), (5, 6), (7, 8), (9, 10))
PARENT_EPOCHS = 30
TIMINGS: dict[str, float] = {}
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def task():
    return SyntheticTask()


@pytest.fixture(scope="session")
def splits(task):
    return gen_splits(task)


@pytest.fixture(scope="session")
def arch(task):
    return task.arch()


@pytest.fixture(scope="session")
def parents(arch, splits):
    """Ten trained d=32 models keyed by seed, with their curves and test accuracy."""
    train, test = splits
    start = time.perf_counter()
    out = {}
    for seed in sorted({s for pair in PAIR_SEEDS for s in pair}):
        params, curve = train_model(arch, train, TrainConfig(seed=seed, epochs=PARENT_EPOCHS),
                                    eval_data=test)
        out[seed] = (params, curve, evaluate(params, arch, test).accuracy)
    TIMINGS["parents"] = time.perf_counter() - start
    return out


@pytest.fixture(scope="session")
def trained_model(parents):
    return parents[1][0]


def random_model(arch: ArchConfig, seed: int, std: float = 0.5, dtype=np.float32):
    """Model with every tensor drawn i.i.d. normal; less degenerate than the default init."""
    rng = Rng(seed, stream=3)
    params = init_params(arch, rng)
    return {k: (std * rng.normal(v.size)).reshape(v.shape).astype(dtype) for k, v in params.items()}


def random_batch(arch: ArchConfig, n: int, seed: int) -> np.ndarray:
    shape = (n, arch.grid_side ** 2, arch.patch_dim)
    return Rng(seed, stream=5).normal(int(np.prod(shape))).reshape(shape).astype(np.float32)
