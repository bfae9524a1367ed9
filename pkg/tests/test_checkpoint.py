from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from masked_supervision.checkpoint import (
    HEADER_PREFIX_BYTES,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from masked_supervision.errors import CheckpointError
from masked_supervision.model import Architecture, ModelParams, init_params, predict


@pytest.fixture
def params() -> ModelParams:
    arch = Architecture(num_classes=2, input_size=(8, 8), widths=(4, 6), strides=(1, 2))
    return init_params(arch, seed=21)


def test_save_load_is_bit_exact(params: ModelParams, tmp_path: Path) -> None:
    path = save_checkpoint(params, tmp_path / "model.ckpt")
    loaded = load_checkpoint(path)
    assert loaded.equals(params)
    assert loaded.fingerprint() == params.fingerprint()

    images = np.random.default_rng(0).uniform(size=(2, 3, 8, 8))
    assert predict(loaded, images).data.tobytes() == predict(params, images).data.tobytes()


def test_save_leaves_no_temp_file(params: ModelParams, tmp_path: Path) -> None:
    save_checkpoint(params, tmp_path / "nested" / "model.ckpt")
    assert [p.name for p in (tmp_path / "nested").iterdir()] == ["model.ckpt"]


def test_header_layout(params: ModelParams) -> None:
    blob = encode_checkpoint(params)
    prefix = blob[:HEADER_PREFIX_BYTES]
    assert prefix.isdigit()
    header_len = int(prefix)
    header = blob[HEADER_PREFIX_BYTES : HEADER_PREFIX_BYTES + header_len]
    assert b'"conv1.weight"' in header
    assert b'"<f8"' in header
    data = blob[HEADER_PREFIX_BYTES + header_len :]
    assert len(data) == params.num_parameters() * 8


def test_encoding_is_deterministic(params: ModelParams) -> None:
    assert encode_checkpoint(params) == encode_checkpoint(params.copy())


def test_truncated_data_is_rejected(params: ModelParams) -> None:
    blob = encode_checkpoint(params)
    with pytest.raises(CheckpointError, match="truncated"):
        decode_checkpoint(blob[:-8])


def test_truncated_header_is_rejected(params: ModelParams) -> None:
    blob = encode_checkpoint(params)
    with pytest.raises(CheckpointError, match="truncated"):
        decode_checkpoint(blob[: HEADER_PREFIX_BYTES + 10])
    with pytest.raises(CheckpointError):
        decode_checkpoint(blob[:4])


def test_corrupt_header_is_rejected(params: ModelParams) -> None:
    blob = bytearray(encode_checkpoint(params))
    blob[HEADER_PREFIX_BYTES] = ord("#")
    with pytest.raises(CheckpointError, match="corrupt"):
        decode_checkpoint(bytes(blob))
    with pytest.raises(CheckpointError, match="prefix"):
        decode_checkpoint(b"not-a-number-xx" + bytes(blob[HEADER_PREFIX_BYTES - 1 :]))


def test_mismatched_class_count_names_both_values(params: ModelParams, tmp_path: Path) -> None:
    path = save_checkpoint(params, tmp_path / "model.ckpt")
    expected = Architecture(num_classes=3, input_size=(8, 8), widths=(4, 6), strides=(1, 2))
    with pytest.raises(CheckpointError, match="num_classes: expected 3, found 2"):
        load_checkpoint(path, expected_arch=expected)


def test_missing_file(tmp_path: Path) -> None:
    with pytest.raises(CheckpointError, match="cannot read"):
        load_checkpoint(tmp_path / "absent.ckpt")
