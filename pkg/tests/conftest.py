import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from simplegrowth.data import load_cifar10_bin
from simplegrowth.model import SimpleGrowthConfig, SimpleGrowthModel
from simplegrowth.train import TrainConfig, train_loop

DATA = Path(__file__).parent / "data"
TRAIN_BIN = DATA / "cifar10_train_256.bin"  # first 256 records of data_batch_1
TEST_BIN = DATA / "cifar10_test_512.bin"  # first 512 records of test_batch

SMOKE_ITERATIONS = 300


def smoke_model_config(**overrides) -> SimpleGrowthConfig:
    opts = dict(channels=(3, 8, 16), latent_dim=32, seed=0)
    opts.update(overrides)
    return SimpleGrowthConfig(**opts)


def smoke_train_config(**overrides) -> TrainConfig:
    opts = dict(epochs=48, batch_size=16, lr=0.001, betas=(0.5, 0.999), seed=0,
                metric_interval=100, eval_sample_count=256, max_iterations=SMOKE_ITERATIONS)
    opts.update(overrides)
    return TrainConfig(**opts)


@dataclass
class SmokeRun:
    result: object
    out_dir: Path
    seconds: float

    @property
    def csv_bytes(self) -> bytes:
        return (self.out_dir / "metrics.csv").read_bytes()

    @property
    def checkpoint(self) -> Path:
        return self.out_dir / "final.ckpt"


def run_smoke(out_dir: Path) -> SmokeRun:
    start = time.perf_counter()
    model = SimpleGrowthModel(smoke_model_config())
    result = train_loop(model, load_cifar10_bin(TRAIN_BIN), smoke_train_config(),
                        eval_dataset=load_cifar10_bin(TEST_BIN), out_dir=out_dir)
    return SmokeRun(result, out_dir, time.perf_counter() - start)


@pytest.fixture(scope="session")
def train_set():
    return load_cifar10_bin(TRAIN_BIN)


@pytest.fixture(scope="session")
def test_set():
    return load_cifar10_bin(TEST_BIN)


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory) -> SmokeRun:
    """The smoke training run, shared by every test that needs a trained checkpoint."""
    return run_smoke(tmp_path_factory.mktemp("smoke"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance lines collected by tests/test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
