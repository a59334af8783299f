import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set

import numpy as np

from src.config.run_config import EncoderConfig, RunConfig
from src.services.adapters import adapter_param_specs, apply_text_adapter, apply_video_adapter
from src.services.cmi import cmi_param_specs, materialize_down
from src.services.layers import (
    ParamScope,
    ParamSpec,
    block_specs,
    collect,
    feed_forward,
    layer_norm_affine,
    layer_norm_specs,
    multi_head_attention,
)
from src.services.numerics import (
    Tensor,
    ShapeError,
    add,
    broadcast_to,
    concat,
    constant,
    matmul,
    reshape,
    slice_,
)
from src.services.retrieval import pool_video
from src.services.synthdata import PAD, VideoTextSample

logger = logging.getLogger(__name__)


class VocabularyError(ValueError):
    """Raised for token ids outside the configured vocabulary."""

    pass


def backbone_specs(enc: EncoderConfig) -> List[ParamSpec]:
    """Frozen dual-encoder parameters, CLIP layout."""
    dv, dt = enc.d_v, enc.d_t
    specs = [
        ParamSpec("vision.patch_proj", (enc.patch_dim, dv), "scaled-normal", False, "backbone", fan_in=enc.patch_dim),
        ParamSpec("vision.cls", (dv,), "scaled-normal", False, "backbone", fan_in=dv),
        ParamSpec("vision.pos", (enc.n_patches + 1, dv), "scaled-normal", False, "backbone", fan_in=dv),
    ]
    specs += layer_norm_specs("vision.ln_pre", dv, False, "backbone")
    for layer in range(enc.layers):
        specs += block_specs(f"vision.blocks.{layer}", dv, enc.ffn_mult, False, "backbone")
    specs += layer_norm_specs("vision.ln_post", dv, False, "backbone")
    specs.append(ParamSpec("vision.proj", (dv, enc.embed_dim), "scaled-normal", False, "backbone", fan_in=dv))

    specs += [
        ParamSpec("text.token_emb", (enc.vocab_size, dt), "scaled-normal", False, "backbone", fan_in=1),
        ParamSpec("text.pos", (enc.max_text_len, dt), "scaled-normal", False, "backbone", fan_in=dt),
    ]
    for layer in range(enc.layers):
        specs += block_specs(f"text.blocks.{layer}", dt, enc.ffn_mult, False, "backbone")
    specs += layer_norm_specs("text.ln_final", dt, False, "backbone")
    specs.append(ParamSpec("text.proj", (dt, enc.embed_dim), "scaled-normal", False, "backbone", fan_in=dt))
    return specs


def tau_spec(config: RunConfig) -> ParamSpec:
    return ParamSpec("tau", (1,), "ones", True, "tau", fill=config.tau.init)


def tunable_specs(config: RunConfig) -> List[ParamSpec]:
    return adapter_param_specs(config) + cmi_param_specs(config) + [tau_spec(config)]


def parameter_specs(config: RunConfig) -> List[ParamSpec]:
    """Every parameter of the model, frozen ones first. Nothing is allocated."""
    return backbone_specs(config.encoder) + tunable_specs(config)


def generate_backbone(enc: EncoderConfig) -> Dict[str, Tensor]:
    """Regenerate the frozen backbone from ``encoder.seed``; buffers are read-only."""
    params = collect(backbone_specs(enc), enc.seed)
    logger.debug(f"Generated backbone: {len(params)} tensors, seed {enc.seed}")
    return params


@dataclass
class ModelState:
    """
    Frozen backbone plus tunable adapters and tau.

    ``params`` is the union view used by the forward pass; tunable tensors
    are updated in place so the view stays current.
    """

    config: RunConfig
    backbone: Dict[str, Tensor]
    tunable: Dict[str, Tensor]
    params: Dict[str, Tensor] = field(init=False, repr=False)

    def __post_init__(self):
        overlap = set(self.backbone) & set(self.tunable)
        if overlap:
            raise ValueError(f"Parameters both frozen and tunable: {sorted(overlap)}")
        self.params = {**self.backbone, **self.tunable}

    @property
    def tau(self) -> Tensor:
        return self.tunable["tau"]

    def scope(self, prefix: str) -> ParamScope:
        return ParamScope(self.params, prefix)


def build_model(config: RunConfig, backbone: Optional[Dict[str, Tensor]] = None) -> ModelState:
    """
    Build a model state: backbone from ``encoder.seed`` (or a shared one),
    adapters and tau from ``train.seed``.

    Raises:
        ValueError: If a supplied backbone does not match the encoder config
    """
    if backbone is None:
        backbone = generate_backbone(config.encoder)
    else:
        expected = {spec.path: spec.shape for spec in backbone_specs(config.encoder)}
        actual = {path: tensor.shape for path, tensor in backbone.items()}
        if expected != actual:
            raise ValueError("Shared backbone does not match the encoder configuration")
    tunable = collect(tunable_specs(config), config.train.seed)
    return ModelState(config=config, backbone=backbone, tunable=tunable)


def build_freeze_mask(state: ModelState) -> Set[str]:
    """Tunable parameter paths: every adapter parameter plus tau."""
    mask = set(state.tunable)
    assert not mask & set(state.backbone)
    return mask


def _run_blocks(
    x: Tensor,
    state: ModelState,
    modality: str,
    adapters_enabled: bool,
    key_mask: Optional[np.ndarray] = None,
    frames: Optional[int] = None,
) -> Tensor:
    config = state.config
    encoder = "vision" if modality == "video" else "text"
    mode = config.adapter.video_mode if modality == "video" else config.adapter.text_mode
    adapted = set(config.adapter_layers()) if adapters_enabled and mode != "none" else set()
    cmi_layers = config.cmi_layers()
    heads = config.encoder.heads

    for layer in range(config.encoder.layers):
        block = state.scope(f"{encoder}.blocks.{layer}")
        h = add(x, multi_head_attention(layer_norm_affine(x, block.scope("ln1")), block.scope("attn"), heads, key_mask))
        u = layer_norm_affine(h, block.scope("ln2"))
        f = feed_forward(u, block.scope("ffn"))
        y = add(h, f)
        if layer in adapted:
            w_down = materialize_down(layer, modality, state.params, cmi_layers)
            params = state.scope(f"adapters.{modality}.{layer}")
            s, trm_heads = config.adapter.scale, config.adapter.trm_heads
            if modality == "video":
                grouped = (x.shape[0] // frames, frames, *x.shape[1:])
                branch = apply_video_adapter(mode, reshape(u, grouped), reshape(f, grouped), params, s, trm_heads, w_down)
                branch = reshape(branch, x.shape)
            else:
                branch = apply_text_adapter(mode, u, f, params, s, trm_heads, w_down, key_mask)
            y = add(y, branch)
        x = y
    return x


def encode_frames_batch(frames: np.ndarray, state: ModelState, adapters_enabled: bool = True) -> Tensor:
    """
    Final-layer [CLS] feature of every frame.

    Args:
        frames: (B, V, N_P, patch_dim) patch vectors
        state: Model state
        adapters_enabled: False runs the frozen backbone only

    Returns:
        (B, V, d_v) tensor

    Raises:
        ShapeError: If the frames do not match the encoder configuration
    """
    enc = state.config.encoder
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4 or frames.shape[2:] != (enc.n_patches, enc.patch_dim):
        raise ShapeError(
            f"encode_frames: expected (B, V, {enc.n_patches}, {enc.patch_dim}) frames, got {frames.shape}"
        )
    batch, count = frames.shape[:2]
    if not 1 <= count <= enc.max_frames:
        raise ShapeError(f"encode_frames: {count} frames, expected 1..{enc.max_frames}")

    vision = state.scope("vision")
    x = matmul(constant(frames.reshape(batch * count, enc.n_patches, enc.patch_dim)), vision["patch_proj"])
    cls = broadcast_to(reshape(vision["cls"], (1, 1, enc.d_v)), (batch * count, 1, enc.d_v))
    x = add(concat([cls, x], axis=1), vision["pos"])
    x = layer_norm_affine(x, vision.scope("ln_pre"))
    x = _run_blocks(x, state, "video", adapters_enabled, frames=count)
    cls_out = reshape(slice_(x, 1, 0, 1), (batch, count, enc.d_v))
    return layer_norm_affine(cls_out, vision.scope("ln_post"))


def encode_frames(sample: VideoTextSample, state: ModelState, adapters_enabled: bool = True) -> Tensor:
    """(|v|, d_v) per-frame [CLS] features of one sample."""
    out = encode_frames_batch(sample.frames[None], state, adapters_enabled)
    return reshape(out, out.shape[1:])


def pad_tokens(tokens: np.ndarray, enc: EncoderConfig) -> np.ndarray:
    """Validate ids and right-pad every row to ``max_text_len``."""
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None]
    if tokens.ndim != 2 or not 1 <= tokens.shape[1] <= enc.max_text_len:
        raise ShapeError(f"encode_text: expected (B, N<={enc.max_text_len}) token ids, got {tokens.shape}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise VocabularyError(f"encode_text: token ids must be integers, got {tokens.dtype}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= enc.vocab_size):
        bad = tokens[(tokens < 0) | (tokens >= enc.vocab_size)][0]
        raise VocabularyError(f"encode_text: token id {bad} outside vocabulary of {enc.vocab_size}")
    padded = np.full((tokens.shape[0], enc.max_text_len), PAD, dtype=np.int64)
    padded[:, : tokens.shape[1]] = tokens
    return padded


def encode_text_batch(tokens: np.ndarray, state: ModelState, adapters_enabled: bool = True) -> Tensor:
    """
    Text feature read at the last position of the padded sequence.

    Padding keys are masked in attention, including the text TRM.
    Returns a (B, d_t) tensor.
    """
    enc = state.config.encoder
    ids = pad_tokens(tokens, enc)
    text = state.scope("text")
    key_mask = ids != PAD
    x = add(constant(text["token_emb"].data[ids]), text["pos"])
    x = _run_blocks(x, state, "text", adapters_enabled, key_mask=key_mask)
    last = enc.max_text_len - 1
    out = reshape(slice_(x, 1, last, last + 1), (ids.shape[0], enc.d_t))
    return layer_norm_affine(out, text.scope("ln_final"))


def encode_text(sample: VideoTextSample, state: ModelState, adapters_enabled: bool = True) -> Tensor:
    """(d_t,) text feature of one sample."""
    out = encode_text_batch(sample.tokens, state, adapters_enabled)
    return reshape(out, (out.shape[1],))


def embed_video(frames: np.ndarray, state: ModelState, adapters_enabled: bool = True) -> Tensor:
    """Joint-space video embeddings: mean-pooled frame features through the frozen projection."""
    pooled = pool_video(encode_frames_batch(frames, state, adapters_enabled))
    return matmul(pooled, state.params["vision.proj"])


def embed_text(tokens: np.ndarray, state: ModelState, adapters_enabled: bool = True) -> Tensor:
    return matmul(encode_text_batch(tokens, state, adapters_enabled), state.params["text.proj"])
