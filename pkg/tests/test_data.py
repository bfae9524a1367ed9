from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from masked_supervision.data import (
    MAX_CLASSES,
    AugmentParams,
    DatasetConfig,
    DatasetManifest,
    LoadedDataset,
    ObjectMeta,
    apply_augmentation,
    augment,
    batch_iter,
    class_names,
    generate_dataset,
    generate_split,
    import_external,
    load_dataset,
    sample_augmentation,
    strata_flags,
)
from masked_supervision.errors import DatasetError


@pytest.fixture
def small_config() -> DatasetConfig:
    return DatasetConfig(n=12, n_test=6, num_classes=4, height=32, width=32, size_range=(4, 12), seed=5)


@pytest.fixture
def written(small_config: DatasetConfig, tmp_path: Path) -> Path:
    generate_dataset(small_config, tmp_path)
    return tmp_path


# ==================== Configuration ====================

@pytest.mark.parametrize(
    "kwargs",
    [
        {"n": 0},
        {"num_classes": MAX_CLASSES + 1},
        {"size_range": (2, 10)},
        {"size_range": (10, 80)},
        {"size_range": (12, 8)},
        {"objects_range": (0, 3)},
        {"overlap": "sometimes"},
        {"occlusion_threshold": 0.9, "max_occlusion": 0.8},
    ],
)
def test_unsatisfiable_config_is_rejected(kwargs: dict) -> None:
    with pytest.raises(ValueError):
        DatasetConfig(**kwargs)


def test_small_threshold_scales_with_width() -> None:
    assert DatasetConfig().small_threshold == 12
    assert DatasetConfig(height=32, width=32, size_range=(4, 12)).small_threshold == 6


def test_class_names_are_color_major() -> None:
    names = class_names(8)
    assert names[:2] == ["red_circle", "red_square"]
    assert names[6:] == ["blue_circle", "blue_square"]
    assert len(set(class_names(MAX_CLASSES))) == MAX_CLASSES


# ==================== Generation ====================

def test_generation_is_deterministic(small_config: DatasetConfig) -> None:
    a = generate_split(small_config, "train")
    b = generate_split(small_config, "train")
    assert [s.id for s, _ in a] == [s.id for s, _ in b]
    for (sa, pa), (sb, pb) in zip(a, b):
        assert np.array_equal(pa, pb)
        assert sa.objects == sb.objects


def test_labels_follow_objects(small_config: DatasetConfig) -> None:
    for sample, pixels in generate_split(small_config, "test"):
        assert pixels.shape == (32, 32, 3)
        assert sample.image.shape == (3, 32, 32)
        assert sample.labels.sum() >= 1
        present = {o.class_id for o in sample.objects}
        assert set(np.flatnonzero(sample.labels).tolist()) == present


def test_splits_use_different_streams(small_config: DatasetConfig) -> None:
    train = generate_split(small_config, "train", n=3)
    test = generate_split(small_config, "test", n=3)
    assert not np.array_equal(train[0][1], test[0][1])


def test_no_overlap_policy_keeps_objects_apart() -> None:
    cfg = DatasetConfig(n=20, n_test=0, height=48, width=48, size_range=(4, 10), overlap="none", seed=1)
    for sample, _ in generate_split(cfg, "train"):
        assert all(o.occlusion_fraction == 0.0 for o in sample.objects)


def test_controlled_overlap_tracks_target() -> None:
    cfg = DatasetConfig(n=1000, n_test=0, occlusion_target=0.25, seed=2)
    objects = [o for sample, _ in generate_split(cfg, "train") for o in sample.objects]
    fraction = np.mean([o.occlusion_fraction > cfg.occlusion_threshold for o in objects])
    assert abs(fraction - 0.25) <= 0.05


def test_small_fraction_controls_small_objects() -> None:
    cfg = DatasetConfig(n=300, n_test=0, overlap="random", small_fraction=0.5, seed=4)
    sizes = [o.size for sample, _ in generate_split(cfg, "train") for o in sample.objects]
    share = np.mean([s <= cfg.small_threshold for s in sizes])
    assert abs(share - 0.5) <= 0.08


def test_generate_dataset_writes_manifests(small_config: DatasetConfig, written: Path) -> None:
    header = json.loads((written / "train.jsonl").read_text().splitlines()[0])
    assert header["kind"] == "header"
    assert header["num_classes"] == 4
    assert header["class_names"] == class_names(4)
    assert header["params"]["seed"] == 5

    manifest = DatasetManifest.read(written / "test.jsonl")
    assert len(manifest) == 6
    assert all((written / r.path).is_file() for r in manifest.records)
    counts = manifest.strata_counts()
    assert counts["small"] + counts["non_small"] == 6


# ==================== Loading ====================

def test_load_matches_generated_pixels(small_config: DatasetConfig, written: Path) -> None:
    loaded = load_dataset(written / "train.jsonl")
    generated = generate_split(small_config, "train")
    assert len(loaded) == 12
    assert loaded.num_classes == 4
    for i, (sample, _) in enumerate(generated):
        assert np.array_equal(loaded.images[i], sample.image)
        assert np.array_equal(loaded.labels[i], sample.labels)


def test_load_rejects_missing_image(written: Path) -> None:
    manifest = DatasetManifest.read(written / "train.jsonl")
    (written / manifest.records[0].path).unlink()
    with pytest.raises(DatasetError, match="does not exist"):
        load_dataset(manifest)


def test_manifest_rejects_all_zero_labels(written: Path) -> None:
    path = written / "train.jsonl"
    lines = path.read_text().splitlines()
    record = json.loads(lines[1])
    record["labels"] = [0, 0, 0, 0]
    lines[1] = json.dumps(record)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError, match="no positive class"):
        DatasetManifest.read(path)


def test_manifest_rejects_wrong_label_length(written: Path) -> None:
    path = written / "train.jsonl"
    lines = path.read_text().splitlines()
    record = json.loads(lines[1])
    record["labels"] = [1, 0]
    lines[1] = json.dumps(record)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError, match="4 values"):
        DatasetManifest.read(path)


def test_import_external(tmp_path: Path) -> None:
    for name in ("a.png", "b.png"):
        Image.fromarray(np.zeros((16, 16, 3), dtype=np.uint8)).save(tmp_path / name)
    manifest = import_external(
        [{"path": "a.png", "labels": ["cat"]}, {"path": "b.png", "labels": [1, 1]}],
        ["cat", "dog"],
        "test",
        tmp_path,
        height=16,
        width=16,
    )
    assert [r.labels for r in manifest.records] == [(1, 0), (1, 1)]
    loaded = load_dataset(tmp_path / "test.jsonl")
    assert loaded.strata() == {}

    with pytest.raises(DatasetError, match="unknown class"):
        import_external([{"path": "a.png", "labels": ["bird"]}], ["cat", "dog"], "test", tmp_path)


def test_strata_flags() -> None:
    objs = [
        (ObjectMeta(0, 5, 0, 0, 0.0),),
        (ObjectMeta(1, 20, 0, 0, 0.5), ObjectMeta(2, 20, 0, 0, 0.0)),
    ]
    flags = strata_flags(objs, small_threshold=12, occlusion_threshold=0.3)
    assert flags["small"].tolist() == [True, False]
    assert flags["occluded"].tolist() == [False, True]
    assert flags["non_occluded"].tolist() == [True, False]
    assert strata_flags([None, objs[0]], 12, 0.3) == {}


# ==================== Augmentation and batching ====================

def test_augmentation_identity_and_flip() -> None:
    image = np.random.default_rng(0).uniform(size=(3, 8, 8))
    same = apply_augmentation(image, AugmentParams(False, 0, 0, 8, 8))
    assert np.array_equal(same, image)
    flipped = apply_augmentation(image, AugmentParams(True, 0, 0, 8, 8))
    assert np.array_equal(flipped, image[:, :, ::-1])


def test_augmentation_keeps_shape_and_labels() -> None:
    image = np.random.default_rng(1).uniform(size=(3, 16, 16))
    rng = np.random.default_rng(2)
    params = sample_augmentation(rng, 16, 16)
    assert 1 <= params.crop_height <= 16
    out = apply_augmentation(image, params)
    assert out.shape == (3, 16, 16)
    assert out.min() >= 0.0 and out.max() <= 1.0

    ds = LoadedDataset(["x"], image[None], np.array([[1, 0]], dtype=np.uint8), [None], ["a", "b"])
    sample = augment(ds.sample(0), np.random.default_rng(3))
    assert np.array_equal(sample.labels, ds.labels[0])
    assert sample.image.shape == (3, 16, 16)


def test_batch_iter_covers_every_sample_once() -> None:
    images = np.zeros((10, 3, 4, 4))
    labels = np.eye(10, 2, dtype=np.uint8)
    labels[:, 0] = 1
    ds = LoadedDataset([str(i) for i in range(10)], images, labels, [None] * 10, ["a", "b"])
    batches = list(batch_iter(ds, batch_size=4, seed=1, epoch=0))
    assert [len(b) for b in batches] == [4, 4, 2]
    seen = np.concatenate([b.indices for b in batches])
    assert sorted(seen.tolist()) == list(range(10))

    again = np.concatenate([b.indices for b in batch_iter(ds, batch_size=4, seed=1, epoch=0)])
    other = np.concatenate([b.indices for b in batch_iter(ds, batch_size=4, seed=1, epoch=1)])
    assert np.array_equal(seen, again)
    assert not np.array_equal(seen, other)


def test_batch_iter_rejects_bad_batch_size() -> None:
    ds = LoadedDataset(["0"], np.zeros((1, 3, 4, 4)), np.ones((1, 1), dtype=np.uint8), [None], ["a"])
    with pytest.raises(ValueError):
        list(batch_iter(ds, batch_size=0))
