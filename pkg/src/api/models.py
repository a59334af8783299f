from pydantic import BaseModel, Field
from datetime import datetime, timezone
from typing import List

from src.services.accounting import ParamReport
from src.services.retrieval import MetricsReport

__all__ = [
    "TextQuery",
    "VideoQuery",
    "SearchHit",
    "SearchResponse",
    "TaskInfo",
    "StorageResponse",
    "ErrorResponse",
    "HealthCheckResponse",
    "MetricsReport",
    "ParamReport",
]


class TextQuery(BaseModel):
    """
    Text-to-video search request.

    - tokens: Token ids of the query text (BOS first, PAD-free or right-padded)
    - k: Number of gallery videos to return

    Example JSON:
        {
            "tokens": [1, 3, 7],
            "k": 5
        }
    """

    tokens: List[int] = Field(..., min_length=1, description="Query token ids")
    k: int = Field(5, ge=1, le=100, description="Number of results")

    class Config:
        json_schema_extra = {"example": {"tokens": [1, 3, 7], "k": 5}}


class VideoQuery(BaseModel):
    """Video-to-text search request; frames are (|v|, N_P, patch_dim) patch vectors."""

    frames: List[List[List[float]]] = Field(..., min_length=1, description="Per-frame patch vectors")
    k: int = Field(5, ge=1, le=100, description="Number of results")


class SearchHit(BaseModel):
    """One ranked gallery item."""

    index: int = Field(description="Gallery position")
    score: float = Field(description="Cosine similarity to the query")
    appearance: int
    order: int


class SearchResponse(BaseModel):
    task: str
    query: str = Field(description="text or video")
    results: List[SearchHit]


class TaskInfo(BaseModel):
    """A loaded task: adapter size and gallery size."""

    name: str
    tunable_params: int
    gallery_size: int
    config_hash: str

    class Config:
        json_schema_extra = {
            "example": {
                "name": "msrvtt_toy",
                "tunable_params": 4605,
                "gallery_size": 64,
                "config_hash": "0x1f2e3d4c5b6a7988",
            }
        }


class StorageResponse(BaseModel):
    """Storage units of adapter deployment vs. full fine-tuning."""

    tasks: int
    ratio: float
    units: float
    full_finetune_units: float


class ErrorResponse(BaseModel):
    """Standard error response."""

    code: str = Field(description="Error code")
    message: str = Field(description="Error message")
    timestamp: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))

    class Config:
        json_schema_extra = {
            "example": {
                "code": "UNKNOWN_TASK",
                "message": "Unknown task 'msrvtt'",
                "timestamp": "2026-02-19T12:00:00Z",
            }
        }


class HealthCheckResponse(BaseModel):
    """Health check response."""

    status: str
    tasks: int
    shared_backbones: int
    timestamp: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))
