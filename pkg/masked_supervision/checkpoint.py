"""Checkpoint file format.

Layout::

    [16 ASCII digits: header length L][L bytes UTF-8 JSON header][raw data]

The header lists every tensor as ``{name, shape, offset, dtype}`` with offsets
into the raw data section, which holds little-endian float64 values. Round trips
are bit-exact.
"""
from __future__ import annotations

import json
import logging
import os
from collections import OrderedDict
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from .errors import CheckpointError
from .model import Architecture, ModelParams
from .numerics import Tensor

logger = logging.getLogger(__name__)

FORMAT_NAME = "msl-checkpoint"
FORMAT_VERSION = 1
HEADER_PREFIX_BYTES = 16
DTYPE = "<f8"


def encode_checkpoint(params: ModelParams) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, t in params.items():
        raw = np.ascontiguousarray(t.data, dtype=DTYPE).tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "dtype": DTYPE})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "arch": params.arch.to_dict(),
        "tensors": entries,
        "data_bytes": offset,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    prefix = f"{len(header_bytes):0{HEADER_PREFIX_BYTES}d}".encode("ascii")
    return prefix + header_bytes + b"".join(chunks)


def decode_checkpoint(blob: bytes, expected_arch: Optional[Architecture] = None) -> ModelParams:
    if len(blob) < HEADER_PREFIX_BYTES:
        raise CheckpointError("truncated checkpoint: missing header length prefix")
    try:
        header_len = int(blob[:HEADER_PREFIX_BYTES].decode("ascii"))
    except (UnicodeDecodeError, ValueError) as e:
        raise CheckpointError(f"corrupt checkpoint header prefix: {e}") from e
    start = HEADER_PREFIX_BYTES
    if header_len <= 0 or len(blob) < start + header_len:
        raise CheckpointError("truncated checkpoint: header shorter than declared")
    try:
        header: Dict[str, Any] = json.loads(blob[start : start + header_len].decode("utf-8"))
        if header.get("format") != FORMAT_NAME:
            raise CheckpointError(f"not a checkpoint file (format={header.get('format')!r})")
        if header.get("version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}")
        arch = Architecture.from_dict(header["arch"])
        entries = header["tensors"]
        data_bytes = int(header["data_bytes"])
    except CheckpointError:
        raise
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from e

    data = blob[start + header_len :]
    if len(data) != data_bytes:
        raise CheckpointError(
            f"truncated checkpoint: expected {data_bytes} data bytes, found {len(data)}"
        )
    if expected_arch is not None:
        check_arch(expected_arch, arch)

    tensors: "OrderedDict[str, Tensor]" = OrderedDict()
    for entry in entries:
        if entry.get("dtype") != DTYPE:
            raise CheckpointError(f"{entry.get('name')}: unsupported dtype {entry.get('dtype')!r}")
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape))
        offset = int(entry["offset"])
        end = offset + count * 8
        if offset < 0 or end > len(data):
            raise CheckpointError(f"{entry['name']}: data range [{offset}, {end}) out of bounds")
        values = np.frombuffer(data[offset:end], dtype=DTYPE).astype(np.float64).reshape(shape)
        tensors[entry["name"]] = Tensor(values, requires_grad=True)
    try:
        return ModelParams(arch, tensors)
    except ValueError as e:
        raise CheckpointError(f"checkpoint tensors do not match its architecture: {e}") from e


def check_arch(expected: Architecture, found: Architecture) -> None:
    if expected == found:
        return
    diffs = [
        f"{key}: expected {value}, found {found.to_dict()[key]}"
        for key, value in expected.to_dict().items()
        if found.to_dict()[key] != value
    ]
    raise CheckpointError("architecture mismatch on load (" + "; ".join(diffs) + ")")


def save_checkpoint(params: ModelParams, path: Union[str, Path]) -> Path:
    """Write ``params`` atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(params))
    os.replace(tmp, path)
    logger.debug(f"Saved checkpoint {path}")
    return path


def load_checkpoint(
    path: Union[str, Path], expected_arch: Optional[Architecture] = None
) -> ModelParams:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return decode_checkpoint(blob, expected_arch)
