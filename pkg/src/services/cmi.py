"""Cross-modal interaction: downsample weights generated from a shared matrix by Kronecker product."""

import logging
from typing import List, Mapping, Sequence, Tuple

from src.config.run_config import RunConfig
from src.services.layers import ParamSpec
from src.services.numerics import Tensor, kron

logger = logging.getLogger(__name__)

MODALITIES = ("video", "text")

__all__ = ["MODALITIES", "kron", "materialize_down", "cmi_param_savings", "cmi_param_specs", "CmiFactorError"]


class CmiFactorError(ValueError):
    """Raised when a modality has no factor matrix at an equipped layer."""

    pass


def materialize_down(
    layer: int,
    modality: str,
    params: Mapping[str, Tensor],
    cmi_layers: Sequence[int],
) -> Tensor:
    """
    Downsample weight of one adapter.

    Equipped layers return ``kron(M_C, M_D)`` built from the layer's shared
    ``cmi.{layer}.m_c`` and the modality factor, so gradients from both
    branches reach the same M_C. Other layers return the adapter's dense
    ``w_down`` unchanged.

    Raises:
        CmiFactorError: If the layer is equipped but the modality has no factor
    """
    if layer not in cmi_layers:
        return params[f"adapters.{modality}.{layer}.w_down"]
    factor = params.get(f"cmi.{layer}.m_d_{modality}")
    if factor is None:
        raise CmiFactorError(f"layer {layer} has no CMI factor for modality '{modality}'")
    return kron(params[f"cmi.{layer}.m_c"], factor)


def cmi_param_savings(d: int, d_prime: int, m: int, n: int) -> Tuple[int, int, int]:
    """(dense d*d', factored (d/m)*(d'/n) per modality, shared m*n counted once)."""
    if m <= 0 or n <= 0 or d % m or d_prime % n:
        raise ValueError(f"m={m} must divide d={d} and n={n} must divide d'={d_prime}")
    return d * d_prime, (d // m) * (d_prime // n), m * n


def cmi_param_specs(config: RunConfig) -> List[ParamSpec]:
    enc, cmi = config.encoder, config.cmi
    d_prime = config.adapter.bottleneck
    specs: List[ParamSpec] = []
    for layer in config.cmi_layers():
        prefix = f"cmi.{layer}"
        specs.append(ParamSpec(f"{prefix}.m_c", (cmi.m, cmi.n), "scaled-normal", True, "cmi", fan_in=cmi.m))
        for modality, d in (("video", enc.d_v), ("text", enc.d_t)):
            if not _branch_enabled(config, modality):
                continue
            p = d // cmi.m
            specs.append(
                ParamSpec(f"{prefix}.m_d_{modality}", (p, d_prime // cmi.n), "scaled-normal", True, "cmi", fan_in=p)
            )
    return specs


def _branch_enabled(config: RunConfig, modality: str) -> bool:
    mode = config.adapter.video_mode if modality == "video" else config.adapter.text_mode
    return mode != "none"
