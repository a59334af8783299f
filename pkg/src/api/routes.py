from fastapi import APIRouter, HTTPException, Query
from typing import List, Optional
import logging

import numpy as np

from src.api.models import (
    HealthCheckResponse,
    SearchHit,
    SearchResponse,
    StorageResponse,
    TaskInfo,
    TextQuery,
    VideoQuery,
)
from src.services.accounting import full_finetune_storage, storage_report
from src.services.task_registry import TaskEntry, TaskRegistry
from src.config.settings import settings

logger = logging.getLogger(__name__)

router = APIRouter()

# Shared registry (set on startup)
registry: Optional[TaskRegistry] = None


def get_registry() -> TaskRegistry:
    """Get the task registry, creating an empty one if startup did not."""
    global registry

    if registry is None:
        registry = TaskRegistry()
    return registry


def _hits(entry: TaskEntry, ranked) -> List[SearchHit]:
    return [
        SearchHit(
            index=index,
            score=score,
            appearance=entry.gallery[index].appearance,
            order=entry.gallery[index].order,
        )
        for index, score in ranked
    ]


@router.get("/health", response_model=HealthCheckResponse)
async def health_check():
    """Health check endpoint."""
    tasks = get_registry()
    return HealthCheckResponse(
        status="healthy" if len(tasks) else "idle",
        tasks=len(tasks),
        shared_backbones=tasks.shared_backbones,
    )


@router.get("/api/tasks", response_model=List[TaskInfo])
async def list_tasks():
    """List loaded tasks."""
    return [
        TaskInfo(
            name=entry.name,
            tunable_params=entry.tunable_params,
            gallery_size=len(entry.gallery),
            config_hash=f"{entry.config_hash:#018x}",
        )
        for entry in get_registry().tasks()
    ]


@router.post("/api/tasks/{task}/search/text", response_model=SearchResponse)
def search_text(task: str, query: TextQuery):
    """
    Rank the task's gallery videos for a text query.

    Gallery embeddings are precomputed; only the query is encoded.
    """
    tasks = get_registry()
    entry = tasks.get(task)
    k = min(query.k, settings.SERVE_MAX_K)
    ranked = tasks.search_text(task, query.tokens, k)
    logger.info(f"Text search on '{task}': top index {ranked[0][0] if ranked else None}")
    return SearchResponse(task=task, query="text", results=_hits(entry, ranked))


@router.post("/api/tasks/{task}/search/video", response_model=SearchResponse)
def search_video(task: str, query: VideoQuery):
    """Rank the task's gallery texts for a video query."""
    tasks = get_registry()
    entry = tasks.get(task)
    try:
        frames = np.asarray(query.frames, dtype=np.float64)
    except ValueError:
        raise HTTPException(status_code=400, detail="Frames must form a regular (|v|, N_P, patch_dim) grid")
    k = min(query.k, settings.SERVE_MAX_K)
    ranked = tasks.search_video(task, frames, k)
    logger.info(f"Video search on '{task}': top index {ranked[0][0] if ranked else None}")
    return SearchResponse(task=task, query="video", results=_hits(entry, ranked))


@router.get("/api/storage", response_model=StorageResponse)
async def get_storage(
    tasks: int = Query(..., ge=0, description="Number of deployed tasks"),
    ratio: float = Query(..., ge=0.0, le=1.0, description="Tunable fraction per task"),
):
    """Storage units for one shared backbone plus per-task adapters."""
    return StorageResponse(
        tasks=tasks,
        ratio=ratio,
        units=storage_report(tasks, ratio),
        full_finetune_units=full_finetune_storage(tasks),
    )
