import logging
from typing import List, Optional, Tuple

import numpy as np

from src.config.run_config import RunConfig
from src.services.layers import ParamScope, ParamSpec, block_specs, linear, linear_specs, transformer_layer
from src.services.numerics import (
    Tensor,
    ShapeError,
    add,
    broadcast_to,
    concat,
    matmul,
    mul,
    relu,
    reshape,
    scale,
    slice_,
)

logger = logging.getLogger(__name__)

ADAPTMLP_FORMS = ("parallel", "sequential")
TEMPORAL_MODES = ("full", "cls_temporal")


def adapter_param_specs(config: RunConfig) -> List[ParamSpec]:
    """Every adapter parameter for the configured modes and layers."""
    enc, ad = config.encoder, config.adapter
    d_prime = ad.bottleneck
    cmi_layers = set(config.cmi_layers())
    specs: List[ParamSpec] = []
    for layer in config.adapter_layers():
        for modality, d, mode in (("video", enc.d_v, ad.video_mode), ("text", enc.d_t, ad.text_mode)):
            if mode == "none":
                continue
            prefix = f"adapters.{modality}.{layer}"
            if layer not in cmi_layers:
                specs.append(ParamSpec(f"{prefix}.w_down", (d, d_prime), "scaled-normal", True, "down", fan_in=d))
            specs.append(ParamSpec(f"{prefix}.w_up", (d_prime, d), "zeros", True, "up"))
            if not mode.startswith("adaptmlp"):
                specs.extend(block_specs(f"{prefix}.trm", d_prime, ad.trm_ffn_mult, True, "trm"))
            if modality == "video" and mode in TEMPORAL_MODES:
                specs.append(ParamSpec(f"{prefix}.cc", (d_prime,), "scaled-normal", True, "temporal", fan_in=d_prime))
                if ad.temporal_pos:
                    specs.append(
                        ParamSpec(
                            f"{prefix}.temporal_pos",
                            (enc.max_frames, d_prime),
                            "scaled-normal",
                            True,
                            "temporal",
                            fan_in=d_prime,
                        )
                    )
            if modality == "video" and mode == "full":
                hidden = d_prime // ad.sigma
                specs.extend(linear_specs(f"{prefix}.fc1", 2 * d_prime, hidden, True, "calibration"))
                specs.append(ParamSpec(f"{prefix}.fc2.w", (hidden, d_prime), "zeros", True, "calibration"))
                specs.append(ParamSpec(f"{prefix}.fc2.b", (d_prime,), "ones", True, "calibration"))
    return specs


def trm_forward(tokens: Tensor, params: ParamScope, heads: int, key_mask: Optional[np.ndarray] = None) -> Tensor:
    """Lightweight one-layer transformer over the second-to-last axis; shape preserved."""
    if tokens.ndim < 2 or tokens.shape[-2] < 1:
        raise ShapeError(f"trm_forward: expected (..., M, d') tokens, got {tokens.shape}")
    return transformer_layer(tokens, params, heads, key_mask)


def text_branch_forward(
    x: Tensor,
    params: ParamScope,
    s: float,
    heads: int,
    w_down: Optional[Tensor] = None,
    key_mask: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Basic bottleneck branch: ``s * TRM(x @ W_down) @ W_up``.

    ``w_down`` overrides the dense downsample (CMI-equipped layers). The
    caller adds the result to the FFN output.
    """
    w_down = w_down if w_down is not None else params["w_down"]
    z = trm_forward(matmul(x, w_down), params.scope("trm"), heads, key_mask)
    return scale(matmul(z, params["w_up"]), s)


def temporal_cls_adapt(
    cls_tokens: Tensor,
    cc_embedding: Tensor,
    trm: ParamScope,
    heads: int,
    temporal_pos: Optional[Tensor] = None,
) -> Tuple[Tensor, Tensor]:
    """
    Contextualize per-frame [CLS] tokens across time.

    The [CC] token is appended after the frame tokens, the sequence goes
    through the TRM, and [CC] is split off again.

    Args:
        cls_tokens: (..., V, d') downsampled frame [CLS] tokens
        cc_embedding: (d',) learnable [CC] token
        trm: TRM parameter scope
        heads: TRM heads
        temporal_pos: Optional (max_frames, d') positions added to frame tokens only

    Returns:
        (adapted_cls (..., V, d'), hat_cc (..., d'))
    """
    *lead, frames, d_prime = cls_tokens.shape
    if frames < 1:
        raise ShapeError("temporal_cls_adapt: at least one frame is required")
    if temporal_pos is not None:
        if frames > temporal_pos.shape[0]:
            raise ShapeError(f"temporal_cls_adapt: {frames} frames exceed {temporal_pos.shape[0]} positions")
        cls_tokens = add(cls_tokens, slice_(temporal_pos, 0, 0, frames))
    cc = broadcast_to(reshape(cc_embedding, (1, d_prime)), (*lead, 1, d_prime))
    out = trm_forward(concat([cls_tokens, cc], axis=-2), trm, heads)
    adapted = slice_(out, -2, 0, frames)
    hat_cc = reshape(slice_(out, -2, frames, frames + 1), (*lead, d_prime))
    return adapted, hat_cc


def calibration_weights(hat_cc: Tensor, hat_cls: Tensor, params: ParamScope) -> Tensor:
    """
    ``alpha_cal = FC2(ReLU(FC1(concat(hat_cc, hat_cls))))``.

    ``hat_cc`` may omit the frame axis of ``hat_cls``; it is then shared by
    every frame. Single (d',) vectors give a (d',) result. No output
    nonlinearity: values may be negative.
    """
    if hat_cls.ndim == 1:
        if hat_cc.ndim != 1:
            raise ShapeError(f"calibration_weights: hat_cc {hat_cc.shape} vs hat_cls {hat_cls.shape}")
        d_prime = hat_cls.shape[0]
        out = calibration_weights(reshape(hat_cc, (1, d_prime)), reshape(hat_cls, (1, d_prime)), params)
        return reshape(out, (out.shape[-1],))
    if hat_cc.ndim < hat_cls.ndim:
        hat_cc = broadcast_to(reshape(hat_cc, (*hat_cc.shape[:-1], 1, hat_cc.shape[-1])), hat_cls.shape)
    alpha = concat([hat_cc, hat_cls], axis=-1)
    hidden = relu(linear(alpha, params["fc1.w"], params["fc1.b"]))
    return linear(hidden, params["fc2.w"], params["fc2.b"])


def calibrate_upsample(w_up: Tensor, alpha_cal: Tensor) -> Tensor:
    """Row r of the result is ``alpha_cal[r] * w_up[r]``; leading axes of alpha_cal are kept."""
    if alpha_cal.shape[-1] != w_up.shape[0]:
        raise ShapeError(f"calibrate_upsample: alpha_cal {alpha_cal.shape} vs W_up {w_up.shape}")
    return mul(reshape(alpha_cal, (*alpha_cal.shape, 1)), w_up)


def video_branch_forward(
    frames_ffn_out: Tensor,
    params: ParamScope,
    s: float,
    heads: int,
    w_down: Optional[Tensor] = None,
    calibrate: bool = True,
) -> Tensor:
    """
    Video adapter with temporal adaptation.

    Args:
        frames_ffn_out: (..., V, T, d) FFN output, token 0 of each frame is [CLS]
        params: Adapter scope (w_down, w_up, trm, cc, temporal_pos, fc1, fc2)
        s: Output scalar
        heads: TRM heads
        w_down: Optional materialized downsample (CMI)
        calibrate: False keeps the plain W_up on the patch path

    Returns:
        Tensor of the input shape, to be added to the FFN output
    """
    *lead, frames, tokens, _ = frames_ffn_out.shape
    w_down = w_down if w_down is not None else params["w_down"]
    w_up = params["w_up"]
    z = matmul(frames_ffn_out, w_down)
    d_prime = z.shape[-1]
    cls = reshape(slice_(z, -2, 0, 1), (*lead, frames, d_prime))
    adapted, hat_cc = temporal_cls_adapt(cls, params["cc"], params.scope("trm"), heads, params.get("temporal_pos"))

    cls_out = scale(matmul(adapted, w_up), s)
    cls_out = reshape(cls_out, (*lead, frames, 1, w_up.shape[1]))
    if tokens == 1:
        return cls_out

    patches = slice_(z, -2, 1, tokens)
    if calibrate:
        alpha_cal = calibration_weights(hat_cc, adapted, params)
        patch_out = scale(matmul(patches, calibrate_upsample(w_up, alpha_cal)), s)
    else:
        patch_out = scale(matmul(patches, w_up), s)
    return concat([cls_out, patch_out], axis=-2)


def adaptmlp_forward(
    x: Tensor, params: ParamScope, s: float, form: str, w_down: Optional[Tensor] = None
) -> Tensor:
    """
    AdaptMLP baseline ``s * ReLU(x @ W_down) @ W_up``.

    For ``parallel`` the caller passes the block's FFN input, for
    ``sequential`` the FFN output; both are added after the FFN.

    Raises:
        ValueError: If form is not parallel or sequential
    """
    if form not in ADAPTMLP_FORMS:
        raise ValueError(f"Unknown AdaptMLP form '{form}', expected one of {ADAPTMLP_FORMS}")
    w_down = w_down if w_down is not None else params["w_down"]
    return scale(matmul(relu(matmul(x, w_down)), params["w_up"]), s)


def apply_video_adapter(
    mode: str,
    ffn_input: Tensor,
    ffn_out: Tensor,
    params: ParamScope,
    s: float,
    heads: int,
    w_down: Optional[Tensor] = None,
) -> Tensor:
    """Dispatch on ``adapter.video_mode`` for (..., V, T, d) tensors."""
    if mode == "full":
        return video_branch_forward(ffn_out, params, s, heads, w_down, calibrate=True)
    if mode == "cls_temporal":
        return video_branch_forward(ffn_out, params, s, heads, w_down, calibrate=False)
    if mode == "basic":
        return text_branch_forward(ffn_out, params, s, heads, w_down)
    if mode == "adaptmlp_parallel":
        return adaptmlp_forward(ffn_input, params, s, "parallel", w_down)
    if mode == "adaptmlp_sequential":
        return adaptmlp_forward(ffn_out, params, s, "sequential", w_down)
    raise ValueError(f"Unknown video adapter mode '{mode}'")


def apply_text_adapter(
    mode: str,
    ffn_input: Tensor,
    ffn_out: Tensor,
    params: ParamScope,
    s: float,
    heads: int,
    w_down: Optional[Tensor] = None,
    key_mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Dispatch on ``adapter.text_mode`` for (..., N, d) tensors."""
    if mode == "basic":
        return text_branch_forward(ffn_out, params, s, heads, w_down, key_mask)
    if mode == "adaptmlp_parallel":
        return adaptmlp_forward(ffn_input, params, s, "parallel", w_down)
    if mode == "adaptmlp_sequential":
        return adaptmlp_forward(ffn_out, params, s, "sequential", w_down)
    raise ValueError(f"Unknown text adapter mode '{mode}'")
