import logging
import struct
import zlib
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from src.config.run_config import RunConfig
from src.services.encoders import ModelState, build_model
from src.services.numerics import Tensor

logger = logging.getLogger(__name__)

MAGIC = b"MVCK"
VERSION = 1
_PREAMBLE = struct.Struct("<4sH")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


class CheckpointError(ValueError):
    """Raised for unreadable checkpoints or a backbone/config mismatch."""

    pass


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def config_hash(config: RunConfig) -> int:
    return fnv1a_64(config.canonical_text().encode("utf-8"))


def checkpoint_bytes(state: ModelState) -> bytes:
    text = state.config.canonical_text().encode("utf-8")
    parts = [
        _PREAMBLE.pack(MAGIC, VERSION),
        _U64.pack(fnv1a_64(text)),
        _U32.pack(len(text)),
        text,
        _U32.pack(len(state.tunable)),
    ]
    for path in sorted(state.tunable):
        tensor = state.tunable[path]
        name = path.encode("utf-8")
        parts.append(_U16.pack(len(name)) + name)
        parts.append(bytes([tensor.ndim]) + struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        parts.append(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
    payload = b"".join(parts)
    return payload + _U32.pack(zlib.crc32(payload))


def save_checkpoint(state: ModelState, path: Path) -> Path:
    """Write the tunable set, tau and the config hash; the backbone is never stored."""
    path = Path(path)
    data = checkpoint_bytes(state)
    path.write_bytes(data)
    logger.info(f"Saved checkpoint with {len(state.tunable)} tensors ({len(data)} bytes) to {path}")
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointError(f"truncated checkpoint at byte {self.offset}: needs {size} more bytes")
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: struct.Struct):
        return fmt.unpack(self.take(fmt.size))


def read_checkpoint(path: Path) -> Tuple[RunConfig, Dict[str, np.ndarray]]:
    """Parse and verify a checkpoint file into its config and named arrays."""
    data = Path(path).read_bytes()
    if len(data) < _PREAMBLE.size + _U32.size:
        raise CheckpointError(f"truncated checkpoint: {len(data)} bytes")
    (stored_crc,) = _U32.unpack_from(data, len(data) - _U32.size)
    if zlib.crc32(data[: -_U32.size]) != stored_crc:
        raise CheckpointError(f"checksum mismatch at byte {len(data) - _U32.size}")

    reader = _Reader(data[: -_U32.size])
    magic, version = reader.unpack(_PREAMBLE)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (stored_hash,) = reader.unpack(_U64)
    (text_len,) = reader.unpack(_U32)
    text = reader.take(text_len)
    if fnv1a_64(text) != stored_hash:
        raise CheckpointError(f"config hash {stored_hash:#018x} does not match the stored config text")
    try:
        config = RunConfig.from_text(text.decode("utf-8"))
    except ValueError as e:
        raise CheckpointError(f"stored config is invalid: {e}") from None

    (count,) = reader.unpack(_U32)
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack(_U16)
        name = reader.take(name_len).decode("utf-8")
        ndim = reader.take(1)[0]
        shape = struct.unpack(f"<{ndim}I", reader.take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(reader.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if reader.offset != len(reader.data):
        raise CheckpointError(f"{len(reader.data) - reader.offset} unexpected bytes after the last block")
    return config, arrays


def load_checkpoint(
    path: Path,
    expected_config: Optional[RunConfig] = None,
    backbone: Optional[Dict[str, Tensor]] = None,
) -> ModelState:
    """
    Rebuild a model state: backbone regenerated (or shared), tunables from the file.

    Args:
        path: Checkpoint file
        expected_config: When given, its config hash must equal the stored one
        backbone: Optional shared frozen backbone for the stored encoder config

    Raises:
        CheckpointError: Corrupt file, hash mismatch, or parameter set mismatch
    """
    config, arrays = read_checkpoint(path)
    if expected_config is not None and config_hash(expected_config) != config_hash(config):
        raise CheckpointError(
            f"config hash mismatch: checkpoint {config_hash(config):#018x}, "
            f"expected {config_hash(expected_config):#018x}"
        )
    state = build_model(config, backbone=backbone)
    if set(arrays) != set(state.tunable):
        missing = sorted(set(state.tunable) - set(arrays))
        extra = sorted(set(arrays) - set(state.tunable))
        raise CheckpointError(f"tunable set mismatch: missing {missing}, unexpected {extra}")
    for name, array in arrays.items():
        target = state.tunable[name]
        if target.shape != array.shape:
            raise CheckpointError(f"{name}: stored shape {array.shape}, model expects {target.shape}")
        target.data[...] = array
    logger.info(f"Loaded checkpoint {path} ({len(arrays)} tensors)")
    return state
