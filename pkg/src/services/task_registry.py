import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.config.run_config import EncoderConfig
from src.services.checkpoint import config_hash, load_checkpoint, read_checkpoint
from src.services.encoders import ModelState, embed_text, embed_video, generate_backbone
from src.services.numerics import Tensor, l2_normalize, no_grad
from src.services.synthdata import VideoTextSample, load_dataset
from src.services.trainer import extract_features

logger = logging.getLogger(__name__)

CHECKPOINT_SUFFIX = ".mvck"


class UnknownTaskError(KeyError):
    """Raised when a request names a task that is not loaded."""

    def __init__(self, task: str):
        super().__init__(task)
        self.task = task

    def __str__(self) -> str:
        return f"Unknown task '{self.task}'"


@dataclass
class TaskEntry:
    """One task: its adapter state over a shared backbone plus offline gallery features."""

    name: str
    state: ModelState
    gallery: List[VideoTextSample]
    video_features: np.ndarray  # (G, embed_dim), unit rows
    text_features: np.ndarray
    config_hash: int

    @property
    def tunable_params(self) -> int:
        return sum(t.data.size for t in self.state.tunable.values())


class TaskRegistry:
    """
    Many task checkpoints served over shared frozen backbones.

    Backbones are regenerated once per encoder configuration and handed to
    every checkpoint that uses it; each task keeps only its adapters and
    precomputed gallery embeddings.
    """

    def __init__(self):
        self._backbones: Dict[EncoderConfig, Dict[str, Tensor]] = {}
        self._tasks: Dict[str, TaskEntry] = {}

    def backbone_for(self, encoder: EncoderConfig) -> Dict[str, Tensor]:
        if encoder not in self._backbones:
            self._backbones[encoder] = generate_backbone(encoder)
            logger.info(f"Generated shared backbone #{len(self._backbones)} (seed {encoder.seed})")
        return self._backbones[encoder]

    @property
    def shared_backbones(self) -> int:
        return len(self._backbones)

    def load_task(self, name: str, checkpoint: Path, gallery: Sequence[VideoTextSample]) -> TaskEntry:
        """Load a checkpoint over the shared backbone and index its gallery."""
        config, _ = read_checkpoint(checkpoint)
        state = load_checkpoint(checkpoint, backbone=self.backbone_for(config.encoder))
        return self.add_task(name, state, gallery)

    def add_task(self, name: str, state: ModelState, gallery: Sequence[VideoTextSample]) -> TaskEntry:
        gallery = list(gallery)
        if not gallery:
            raise ValueError(f"Task '{name}' needs a non-empty gallery")
        videos, texts = extract_features(state, gallery)
        with no_grad():
            entry = TaskEntry(
                name=name,
                state=state,
                gallery=gallery,
                video_features=l2_normalize(videos).data,
                text_features=l2_normalize(texts).data,
                config_hash=config_hash(state.config),
            )
        self._tasks[name] = entry
        logger.info(f"Task '{name}' ready: {entry.tunable_params} tunable params, gallery of {len(gallery)}")
        return entry

    def get(self, name: str) -> TaskEntry:
        try:
            return self._tasks[name]
        except KeyError:
            raise UnknownTaskError(name) from None

    def tasks(self) -> List[TaskEntry]:
        return [self._tasks[name] for name in sorted(self._tasks)]

    def __len__(self) -> int:
        return len(self._tasks)

    def search_text(self, name: str, tokens: Sequence[int], k: int) -> List[Tuple[int, float]]:
        """Top-k gallery videos for a text query: (index, cosine) pairs."""
        entry = self.get(name)
        with no_grad():
            query = l2_normalize(embed_text(np.asarray([tokens], dtype=np.int64), entry.state)).data[0]
        return _top_k(entry.video_features @ query, k)

    def search_video(self, name: str, frames: np.ndarray, k: int) -> List[Tuple[int, float]]:
        """Top-k gallery texts for a video query of shape (|v|, N_P, patch_dim)."""
        entry = self.get(name)
        with no_grad():
            query = l2_normalize(embed_video(np.asarray(frames, dtype=np.float64)[None], entry.state)).data[0]
        return _top_k(entry.text_features @ query, k)

    @classmethod
    def from_directory(cls, checkpoint_dir: Path, data_path: Path, test_split: bool = True) -> "TaskRegistry":
        """Load every ``*.mvck`` in a directory as a task named after the file stem."""
        registry = cls()
        dataset = load_dataset(data_path)
        gallery = dataset.split()[1] if test_split else dataset.samples
        for path in sorted(Path(checkpoint_dir).glob(f"*{CHECKPOINT_SUFFIX}")):
            registry.load_task(path.stem, path, gallery)
        logger.info(f"Loaded {len(registry)} tasks over {registry.shared_backbones} shared backbone(s)")
        return registry


def _top_k(scores: np.ndarray, k: int) -> List[Tuple[int, float]]:
    order = np.argsort(-scores, kind="stable")[: max(0, k)]
    return [(int(i), float(scores[i])) for i in order]


def open_registry(checkpoint_dir: Optional[str], data_path: Optional[str]) -> TaskRegistry:
    """Registry from settings paths, or an empty one when they are unset or missing."""
    if checkpoint_dir and data_path and Path(checkpoint_dir).is_dir() and Path(data_path).is_file():
        return TaskRegistry.from_directory(Path(checkpoint_dir), Path(data_path))
    logger.warning("No checkpoint directory or dataset configured; serving an empty registry")
    return TaskRegistry()
