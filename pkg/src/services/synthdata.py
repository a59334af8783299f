"""Synthetic video-text pairs whose order label is only visible in frame order."""

import logging
import struct
import zlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from src.config.run_config import DatasetSpec

logger = logging.getLogger(__name__)

PAD, BOS = 0, 1
SPECIAL_TOKENS = 3  # id 2 is reserved
FORWARD, REVERSED = 0, 1

MAGIC = b"MVAD"
VERSION = 1
_PREAMBLE = struct.Struct("<4sH")
_HEADER = struct.Struct("<10Id")
_LABELS = struct.Struct("<HH")
_CRC = struct.Struct("<I")


class DatasetFormatError(ValueError):
    """Raised for a malformed dataset file; ``offset`` is the byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True)
class VideoTextSample:
    frames: np.ndarray  # (|v|, N_P, patch_dim)
    tokens: np.ndarray  # (text_len,) uint16
    appearance: int
    order: int

    @property
    def labels(self) -> Tuple[int, int]:
        return self.appearance, self.order


@dataclass
class SyntheticDataset:
    spec: DatasetSpec
    samples: List[VideoTextSample]

    def split(self) -> Tuple[List[VideoTextSample], List[VideoTextSample]]:
        """(train, test): the first ``n_test`` indices of a seed-stable shuffle are the test set."""
        perm = np.random.default_rng(np.random.SeedSequence([self.spec.seed, 2])).permutation(len(self.samples))
        n_test = min(self.spec.n_test, len(self.samples))
        test = [self.samples[i] for i in perm[:n_test]]
        train = [self.samples[i] for i in perm[n_test:]]
        return train, test


def check_spec(spec: DatasetSpec) -> None:
    needed = spec.appearance_classes + spec.order_classes + SPECIAL_TOKENS
    if spec.vocab_size < needed:
        raise ValueError(
            f"vocab_size={spec.vocab_size} too small for {spec.appearance_classes} appearance and "
            f"{spec.order_classes} order tokens plus {SPECIAL_TOKENS} specials (need {needed})"
        )
    if spec.vocab_size > 0xFFFF:
        raise ValueError(f"vocab_size={spec.vocab_size} does not fit u16 token ids")


def temporal_coefficients(frames: int) -> np.ndarray:
    """Forward ramp c_k = 2k/(|v|-1) - 1, zero for a single frame."""
    if frames == 1:
        return np.zeros(1)
    return 2.0 * np.arange(frames) / (frames - 1) - 1.0


def text_tokens(spec: DatasetSpec, appearance: int, order: int) -> np.ndarray:
    tokens = np.full(spec.text_len, PAD, dtype=np.uint16)
    tokens[0] = BOS
    tokens[1] = SPECIAL_TOKENS + appearance
    tokens[2] = SPECIAL_TOKENS + spec.appearance_classes + order
    return tokens


def generate_dataset(spec: DatasetSpec) -> SyntheticDataset:
    """
    Build every sample deterministically from ``spec.seed``.

    Frame k of sample i is ``P_a + c_k * R + noise`` (forward) or
    ``P_a + c_{|v|-1-k} * R + noise`` (reversed). Sample i has appearance
    ``(i mod A*O) // O`` and order ``i mod O`` so every class appears.

    Raises:
        ValueError: If the vocabulary cannot hold the label tokens
    """
    check_spec(spec)
    shape = (spec.n_patches, spec.patch_dim)
    base = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    prototypes = base.standard_normal((spec.appearance_classes, *shape))
    signature = base.standard_normal(shape)
    ramp = temporal_coefficients(spec.frames)
    classes = spec.appearance_classes * spec.order_classes

    samples = []
    for i in range(spec.n_pairs):
        appearance = (i % classes) // spec.order_classes
        order = i % spec.order_classes
        coeffs = ramp if order == FORWARD else ramp[::-1]
        clean = prototypes[appearance][None] + coeffs[:, None, None] * signature[None]
        noise = np.random.default_rng(np.random.SeedSequence([spec.seed, 1, i])).standard_normal(clean.shape)
        frames = clean + spec.noise_std * noise
        samples.append(VideoTextSample(frames, text_tokens(spec, appearance, order), appearance, order))
    logger.info(f"Generated {len(samples)} synthetic pairs ({classes} classes, seed {spec.seed})")
    return SyntheticDataset(spec, samples)


def _header_values(spec: DatasetSpec) -> Tuple:
    return (
        spec.n_pairs,
        spec.appearance_classes,
        spec.order_classes,
        spec.frames,
        spec.n_patches,
        spec.patch_dim,
        spec.text_len,
        spec.vocab_size,
        spec.n_test,
        spec.seed,
        spec.noise_std,
    )


def dataset_bytes(dataset: SyntheticDataset) -> bytes:
    spec = dataset.spec
    parts = [_PREAMBLE.pack(MAGIC, VERSION), _HEADER.pack(*_header_values(spec))]
    for sample in dataset.samples:
        parts.append(_LABELS.pack(sample.appearance, sample.order))
        parts.append(np.ascontiguousarray(sample.frames, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(sample.tokens, dtype="<u2").tobytes())
    payload = b"".join(parts)
    return payload + _CRC.pack(zlib.crc32(payload))


def save_dataset(dataset: SyntheticDataset, path: Path) -> Path:
    path = Path(path)
    path.write_bytes(dataset_bytes(dataset))
    logger.info(f"Wrote dataset with {len(dataset.samples)} pairs to {path}")
    return path


def write_dataset(spec: DatasetSpec, path: Path) -> Path:
    """Generate and save in one step."""
    return save_dataset(generate_dataset(spec), path)


def load_dataset(path: Path) -> SyntheticDataset:
    """
    Read an MVAD file.

    Raises:
        DatasetFormatError: Bad magic or version, truncated file, trailing
            bytes, or checksum mismatch; the message names the byte offset
    """
    data = Path(path).read_bytes()
    if len(data) < _PREAMBLE.size + _HEADER.size + _CRC.size:
        raise DatasetFormatError(
            f"truncated header: expected at least {_PREAMBLE.size + _HEADER.size + _CRC.size} bytes, got {len(data)}",
            len(data),
        )
    magic, version = _PREAMBLE.unpack_from(data, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}, expected {VERSION}", 4)

    values = _HEADER.unpack_from(data, _PREAMBLE.size)
    fields = ("n_pairs", "appearance_classes", "order_classes", "frames", "n_patches", "patch_dim",
              "text_len", "vocab_size", "n_test", "seed", "noise_std")
    try:
        spec = DatasetSpec(**dict(zip(fields, values)))
    except ValueError as e:
        raise DatasetFormatError(f"invalid header: {e}", _PREAMBLE.size) from None

    frame_count = spec.frames * spec.n_patches * spec.patch_dim
    record = _LABELS.size + 8 * frame_count + 2 * spec.text_len
    body = _PREAMBLE.size + _HEADER.size
    expected = body + spec.n_pairs * record + _CRC.size
    if len(data) != expected:
        raise DatasetFormatError(f"expected {expected} bytes, got {len(data)}", min(len(data), expected))

    crc_offset = expected - _CRC.size
    (stored,) = _CRC.unpack_from(data, crc_offset)
    actual = zlib.crc32(data[:crc_offset])
    if stored != actual:
        raise DatasetFormatError(f"checksum mismatch: stored {stored:#010x}, computed {actual:#010x}", crc_offset)

    frame_shape = (spec.frames, spec.n_patches, spec.patch_dim)
    samples = []
    offset = body
    for _ in range(spec.n_pairs):
        appearance, order = _LABELS.unpack_from(data, offset)
        offset += _LABELS.size
        frames = np.frombuffer(data, dtype="<f8", count=frame_count, offset=offset).reshape(frame_shape)
        offset += 8 * frame_count
        tokens = np.frombuffer(data, dtype="<u2", count=spec.text_len, offset=offset)
        offset += 2 * spec.text_len
        samples.append(VideoTextSample(frames.astype(np.float64), tokens.astype(np.uint16), appearance, order))
    logger.info(f"Loaded {len(samples)} pairs from {path}")
    return SyntheticDataset(spec, samples)


def permute_frames(sample: VideoTextSample, permutation: Sequence[int]) -> VideoTextSample:
    """
    Reorder (or uniformly subsample) frames; labels and text are unchanged.

    Raises:
        ValueError: If indices repeat or fall outside the frame range, or a
            full-length index list is not a permutation
    """
    count = sample.frames.shape[0]
    index = np.asarray(permutation, dtype=np.int64)
    if index.ndim != 1 or index.size == 0 or index.size > count:
        raise ValueError(f"invalid frame permutation {list(index)} for {count} frames")
    if index.min() < 0 or index.max() >= count or np.unique(index).size != index.size:
        raise ValueError(f"invalid frame permutation {list(index)} for {count} frames")
    return replace(sample, frames=sample.frames[index].copy())


def uniform_frame_indices(total: int, max_frames: int) -> List[int]:
    """``floor(k * total / max_frames)`` for k < max_frames, or every index when total fits."""
    if total <= max_frames:
        return list(range(total))
    return [k * total // max_frames for k in range(max_frames)]


def subsample_frames(sample: VideoTextSample, max_frames: int) -> VideoTextSample:
    return permute_frames(sample, uniform_frame_indices(sample.frames.shape[0], max_frames))


def stack_batch(samples: Sequence[VideoTextSample]) -> Tuple[np.ndarray, np.ndarray]:
    """(B, |v|, N_P, patch_dim) frames and (B, text_len) token ids."""
    frames = np.stack([s.frames for s in samples])
    tokens = np.stack([s.tokens for s in samples]).astype(np.int64)
    return frames, tokens


def label_matrix(queries: Sequence[VideoTextSample], gallery: Sequence[VideoTextSample]) -> np.ndarray:
    """Boolean (Q, G) mask of gallery items sharing the query's (appearance, order)."""
    q = np.array([s.labels for s in queries])
    g = np.array([s.labels for s in gallery])
    return (q[:, None, :] == g[None, :, :]).all(axis=-1)
