import logging
from collections import Counter
from typing import Dict, List

from pydantic import BaseModel, Field

from src.config.run_config import RunConfig
from src.services.encoders import parameter_specs

logger = logging.getLogger(__name__)

REFERENCE_RATIO = 2.56
GROUPS = ("down", "trm", "up", "calibration", "temporal", "cmi", "tau")


class ParamReport(BaseModel):
    """Tunable-vs-total parameter counts with a per-group breakdown."""

    total: int = Field(description="backbone + tunable")
    backbone: int
    tunable: int
    ratio: float = Field(description="tunable / total * 100")
    breakdown: Dict[str, int] = Field(description="tunable count per group; sums to tunable")
    video_ratio: float = Field(description="video adapters + CMI over vision encoder + its adapters, in %")
    text_ratio: float = Field(description="text adapters + CMI over text encoder + its adapters, in %")
    reference_ratio: float = REFERENCE_RATIO
    gap: float = Field(description="ratio - reference_ratio, in percentage points")

    def to_lines(self) -> List[str]:
        lines = [
            f"total {self.total}",
            f"backbone {self.backbone}",
            f"tunable {self.tunable}",
            f"ratio {self.ratio:.4f}",
        ]
        lines += [f"tunable.{group} {self.breakdown.get(group, 0)}" for group in GROUPS]
        lines += [
            f"video_ratio {self.video_ratio:.4f}",
            f"text_ratio {self.text_ratio:.4f}",
            f"reference_ratio {self.reference_ratio:.2f}",
            f"gap {self.gap:+.4f}",
        ]
        return lines


def _percent(part: int, whole: int) -> float:
    return 100.0 * part / whole if whole else 0.0


def count_params(config: RunConfig) -> ParamReport:
    """
    Exact enumeration of every parameter tensor of the configured model.

    Works from shapes only, so real-dimension presets cost nothing.

    Example:
        count_params(RunConfig.clip_b16()).ratio  # ~1.80
    """
    specs = parameter_specs(config)
    backbone = sum(s.size for s in specs if not s.tunable)
    tunable = sum(s.size for s in specs if s.tunable)
    breakdown = Counter()
    for spec in specs:
        if spec.tunable:
            breakdown[spec.group] += spec.size

    per_encoder = {}
    for modality, encoder in (("video", "vision."), ("text", "text.")):
        frozen = sum(s.size for s in specs if s.path.startswith(encoder))
        own = sum(
            s.size
            for s in specs
            if s.tunable and (s.path.startswith(f"adapters.{modality}.") or s.path.startswith("cmi.") and (
                s.path.endswith(".m_c") or s.path.endswith(f".m_d_{modality}")))
        )
        per_encoder[modality] = _percent(own, frozen + own)

    ratio = _percent(tunable, backbone + tunable)
    report = ParamReport(
        total=backbone + tunable,
        backbone=backbone,
        tunable=tunable,
        ratio=ratio,
        breakdown={group: breakdown.get(group, 0) for group in GROUPS},
        video_ratio=per_encoder["video"],
        text_ratio=per_encoder["text"],
        gap=ratio - REFERENCE_RATIO,
    )
    logger.debug(f"Parameter report: {tunable} tunable of {backbone + tunable} ({ratio:.4f}%)")
    return report


def storage_report(n_tasks: int, tunable_ratio: float) -> float:
    """
    Storage units for one shared backbone plus ``n_tasks`` adapter sets.

    Raises:
        ValueError: If n_tasks is negative or the ratio is outside [0, 1]
    """
    if n_tasks < 0:
        raise ValueError(f"n_tasks must be non-negative, got {n_tasks}")
    if not 0.0 <= tunable_ratio <= 1.0:
        raise ValueError(f"tunable_ratio must be within [0, 1], got {tunable_ratio}")
    return 1.0 + n_tasks * tunable_ratio


def full_finetune_storage(n_tasks: int) -> float:
    """One full model copy per task."""
    if n_tasks < 0:
        raise ValueError(f"n_tasks must be non-negative, got {n_tasks}")
    return n_tasks * 1.0


def format_units(units: float) -> str:
    return repr(round(units, 12))
