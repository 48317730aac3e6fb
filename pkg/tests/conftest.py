"""
Shared pytest fixtures.

Every test runs at float64 (autouse `float64_precision`) so gradient
checks and bitwise comparisons are meaningful. The micro model and the
micro dataset are small enough that a full training step takes well
under a second:

  micro_model     16x16 images, encoder (4, 8), 2 token layers,
                  4^3 volume with 2 channels, critic (4, 8)
  micro_config    TrainConfig over micro_model, batch 2, 6 + 3 steps
  micro_dataset   5 procedural objects (4 train / 1 test) rendered at
                  pose_grid(4, [0]) on an 8^3 grid, written once per
                  session; each test gets a freshly opened Dataset
  smoke_run       SMOKE_STEPS stage-1 steps of micro_model at lr 2e-3,
                  trained once per session
"""

from dataclasses import dataclass
from pathlib import Path

import pandas as pd
import pytest

from dataset import Dataset, build_dataset
from geometry import pose_grid
from model import ModelConfig, ModelParams
from tensor_core import get_precision, set_precision
from training import TrainConfig, TrainState, init_state, train_stage1

MICRO_POSES = pose_grid(4, [0.0])
MICRO_OBJECTS = 5
MICRO_SIZE = 16
MICRO_GRID = 8
SMOKE_STEPS = 200


@pytest.fixture(autouse=True)
def float64_precision():
    previous = get_precision()
    set_precision("float64")
    yield
    set_precision(previous)


def _micro_model() -> ModelConfig:
    return ModelConfig(
        image_size=16,
        encoder_channels=(4, 8),
        token_conv_layers=2,
        volume_size=4,
        volume_channels=2,
        discriminator_channels=(4, 8),
    )


@pytest.fixture
def micro_model():
    return _micro_model()


@pytest.fixture
def micro_config(micro_model, micro_dataset_dir):
    return TrainConfig(
        model=micro_model,
        batch_size=2,
        stage1_steps=6,
        stage2_steps=3,
        seed=3,
        dataset=str(micro_dataset_dir),
        log_interval=2,
        precision="float64",
    )


@pytest.fixture(scope="session")
def micro_dataset_dir(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("micro_dataset")
    build_dataset(MICRO_OBJECTS, MICRO_POSES, MICRO_SIZE, seed=11, out_dir=root, grid=MICRO_GRID)
    return root


@pytest.fixture
def micro_dataset(micro_dataset_dir) -> Dataset:
    return Dataset.open(micro_dataset_dir)


@dataclass
class SmokeRun:
    config: TrainConfig
    untrained: ModelParams
    state: TrainState
    history: pd.DataFrame


@pytest.fixture(scope="session")
def smoke_run(micro_dataset_dir) -> SmokeRun:
    """One longer stage-1 run on the micro dataset, shared by the training
    and probe checks that need a model that has actually learned something."""
    config = TrainConfig(
        model=_micro_model(),
        lr=2e-3,
        batch_size=4,
        stage1_steps=SMOKE_STEPS,
        seed=3,
        dataset=str(micro_dataset_dir),
        log_interval=SMOKE_STEPS,
        precision="float64",
    )
    untrained = init_state(config).params
    state, history = train_stage1(config, Dataset.open(micro_dataset_dir))
    return SmokeRun(config, untrained, state, history)
