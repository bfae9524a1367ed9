from __future__ import annotations

import pytest

from masked_supervision.data import DatasetConfig, LoadedDataset, class_names, generate_split
from masked_supervision.masking import MaskSubsets, build_subsets
from masked_supervision.model import Architecture

TINY_SIZE = 16
TINY_CLASSES = 3


@pytest.fixture(scope="session")
def tiny_dataset_config() -> DatasetConfig:
    return DatasetConfig(
        n=24,
        n_test=12,
        num_classes=TINY_CLASSES,
        height=TINY_SIZE,
        width=TINY_SIZE,
        size_range=(4, 8),
        objects_range=(1, 3),
        seed=0,
    )


def _split(config: DatasetConfig, split: str) -> LoadedDataset:
    samples = [s for s, _ in generate_split(config, split)]
    return LoadedDataset.from_samples(
        samples, class_names(config.num_classes), config.small_threshold, config.occlusion_threshold
    )


@pytest.fixture(scope="session")
def tiny_train(tiny_dataset_config: DatasetConfig) -> LoadedDataset:
    return _split(tiny_dataset_config, "train")


@pytest.fixture(scope="session")
def tiny_test(tiny_dataset_config: DatasetConfig) -> LoadedDataset:
    return _split(tiny_dataset_config, "test")


@pytest.fixture(scope="session")
def tiny_masks() -> MaskSubsets:
    return build_subsets(count=3, seed=0, height=TINY_SIZE, width=TINY_SIZE)


@pytest.fixture
def tiny_arch() -> Architecture:
    return Architecture(
        num_classes=TINY_CLASSES, input_size=(TINY_SIZE, TINY_SIZE), widths=(4, 8), strides=(1, 2)
    )
