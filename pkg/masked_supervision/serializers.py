from __future__ import annotations

import gzip
import io
import logging
import zlib
from typing import Any, Dict, List

import msgpack
import numpy as np

from .errors import DatasetError
from .masking import SUBSETS, Mask, MaskSubsets

logger = logging.getLogger(__name__)

BUNDLE_FORMAT = "msl-masks"
BUNDLE_VERSION = 2

# Optional compression libraries
try:
    import lz4.frame
    HAS_LZ4 = True
except ImportError:
    HAS_LZ4 = False

try:
    import zstandard as zstd
    HAS_ZSTD = True
except ImportError:
    HAS_ZSTD = False


def _gzip_compress(data: bytes) -> bytes:
    buf = io.BytesIO()
    # mtime=0 keeps bundles byte-identical across runs
    with gzip.GzipFile(fileobj=buf, mode="wb", mtime=0) as gz:
        gz.write(data)
    return buf.getvalue()


def _gzip_decompress(data: bytes) -> bytes:
    with gzip.GzipFile(fileobj=io.BytesIO(data), mode="rb") as gz:
        return gz.read()


def _lz4_compress(data: bytes) -> bytes:
    if not HAS_LZ4:
        raise ImportError("lz4 not installed")
    return lz4.frame.compress(data)


def _lz4_decompress(data: bytes) -> bytes:
    if not HAS_LZ4:
        raise ImportError("lz4 not installed")
    return lz4.frame.decompress(data)


def _zstd_compress(data: bytes) -> bytes:
    if not HAS_ZSTD:
        raise ImportError("zstandard not installed")
    return zstd.ZstdCompressor().compress(data)


def _zstd_decompress(data: bytes) -> bytes:
    if not HAS_ZSTD:
        raise ImportError("zstandard not installed")
    return zstd.ZstdDecompressor().decompress(data)


COMPRESSORS = {
    "gzip": (_gzip_compress, _gzip_decompress),
    "lz4": (_lz4_compress, _lz4_decompress),
    "zstd": (_zstd_compress, _zstd_decompress),
    "none": (lambda x: x, lambda x: x),
}


def _encode_mask(mask: Mask) -> Dict[str, Any]:
    entry: Dict[str, Any] = {
        "p": mask.p,
        "bits": np.packbits(mask.grid.ravel()).tobytes(),
    }
    if mask.soft is not None:
        entry["soft"] = np.ascontiguousarray(mask.soft, dtype="<f8").tobytes()
    return entry


def _decode_mask(entry: Dict[str, Any], shape: List[int]) -> Mask:
    h, w = int(shape[0]), int(shape[1])
    bits = np.frombuffer(entry["bits"], dtype=np.uint8)
    grid = np.unpackbits(bits, count=h * w).reshape(h, w)
    soft = None
    if "soft" in entry:
        soft = np.frombuffer(entry["soft"], dtype="<f8").reshape(h, w)
    mask = Mask.from_grid(grid, soft=soft)
    if mask.p != float(entry["p"]):
        raise DatasetError(f"mask bundle entry p={entry['p']} disagrees with its grid ({mask.p})")
    return mask


def pack_subsets(subsets: MaskSubsets, compression: str = "gzip") -> bytes:
    """Serialize both mask subsets into one compact msgpack blob.

    Grids are bit-packed; the mask list is compressed as a whole.
    """
    if compression not in COMPRESSORS:
        raise ValueError(f"unknown compression {compression!r}, expected one of {sorted(COMPRESSORS)}")
    compress_fn = COMPRESSORS[compression][0]
    shape = subsets.shape or (0, 0)
    inner = {name: [_encode_mask(m) for m in subsets.get(name)] for name in SUBSETS}
    payload: Dict[str, Any] = {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "shape": list(shape),
        "counts": subsets.counts(),
        "compression": compression,
        "masks_compressed": compress_fn(msgpack.packb(inner, use_bin_type=True)),
    }
    return msgpack.packb(payload, use_bin_type=True)


def unpack_subsets(data: bytes) -> MaskSubsets:
    """Rebuild :class:`MaskSubsets` from :func:`pack_subsets` output, re-validating every mask."""
    try:
        payload: Dict[str, Any] = msgpack.unpackb(data, raw=False)
    except (msgpack.UnpackException, ValueError, TypeError) as e:
        raise DatasetError(f"corrupt mask bundle: {e}") from e
    if not isinstance(payload, dict) or payload.get("format") != BUNDLE_FORMAT:
        raise DatasetError("not a mask bundle")
    if payload.get("version") != BUNDLE_VERSION:
        raise DatasetError(f"unsupported mask bundle version {payload.get('version')}")

    compression = payload.get("compression", "gzip")
    if compression not in COMPRESSORS:
        raise DatasetError(f"mask bundle uses unknown compression {compression!r}")
    decompress_fn = COMPRESSORS[compression][1]
    try:
        inner = msgpack.unpackb(decompress_fn(payload["masks_compressed"]), raw=False)
    except (OSError, EOFError, zlib.error, msgpack.UnpackException, ValueError, KeyError) as e:
        raise DatasetError(f"corrupt mask bundle payload: {e}") from e

    shape = payload["shape"]
    pools = {name: tuple(_decode_mask(e, shape) for e in inner.get(name, [])) for name in SUBSETS}
    subsets = MaskSubsets(high=pools["high"], low=pools["low"])
    if subsets.counts() != payload.get("counts", subsets.counts()):
        raise DatasetError(f"mask bundle counts {payload['counts']} != decoded {subsets.counts()}")
    logger.debug(f"Unpacked mask bundle {subsets.counts()} ({compression})")
    return subsets
