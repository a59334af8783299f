import logging
from pathlib import Path
from typing import Dict, List, Literal, Mapping, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError

logger = logging.getLogger(__name__)

VIDEO_MODES = ("full", "cls_temporal", "basic", "adaptmlp_parallel", "adaptmlp_sequential", "none")
TEXT_MODES = ("basic", "adaptmlp_parallel", "adaptmlp_sequential", "none")


class ConfigError(ValueError):
    """Raised for an invalid run configuration; ``key`` names the offending key."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class EncoderConfig(_Section):
    """Frozen dual-encoder shapes."""

    d_v: int = Field(48, gt=0, description="vision width")
    d_t: int = Field(32, gt=0, description="text width")
    layers: int = Field(2, gt=0, description="blocks per encoder (L)")
    heads: int = Field(2, gt=0, description="attention heads in both encoders")
    n_patches: int = Field(16, gt=0, description="patches per frame (N_P)")
    patch_dim: int = Field(12, gt=0, description="raw patch vector length")
    vocab_size: int = Field(64, gt=0)
    max_text_len: int = Field(8, gt=0)
    max_frames: int = Field(4, gt=0, description="|v| upper bound")
    embed_dim: int = Field(32, gt=0, description="joint embedding width")
    ffn_mult: int = Field(4, gt=0)
    seed: int = Field(0, ge=0, description="backbone generation seed")


class AdapterConfig(_Section):
    """Adapter hyperparameters: d' (bottleneck), s (scale), sigma, TRM shape."""

    bottleneck: int = Field(8, gt=0, description="d'")
    scale: float = Field(0.1, description="output scalar s")
    sigma: int = Field(4, gt=0, description="calibration shrinkage factor")
    trm_heads: int = Field(2, gt=0)
    trm_ffn_mult: int = Field(2, gt=0)
    video_mode: Literal["full", "cls_temporal", "basic", "adaptmlp_parallel", "adaptmlp_sequential", "none"] = "full"
    text_mode: Literal["basic", "adaptmlp_parallel", "adaptmlp_sequential", "none"] = "basic"
    temporal_pos: bool = True
    layers: str = Field("all", description="'all' or comma list of block indices")


class CmiConfig(_Section):
    """Cross-modal interaction placement and shared-matrix shape (m x n)."""

    layers: str = Field("last", description="'none', 'last', 'last:K' or comma list")
    m: int = Field(4, gt=0)
    n: int = Field(2, gt=0)


class TauConfig(_Section):
    cap: Literal["linear", "constant"] = "linear"
    cap_start: float = Field(100.0, gt=0)
    cap_end: float = Field(20.0, gt=0)
    init: float = Field(100.0, gt=0)
    total_steps: int = Field(0, ge=0, description="0 = derive from training length")


class TrainConfig(_Section):
    epochs: int = Field(30, ge=0)
    batch_size: int = Field(32, ge=2, description="contrastive loss needs negatives")
    lr: float = Field(3e-3, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    seed: int = Field(0, ge=0, description="adapter init and batch order")


class DatasetSpec(_Section):
    """Synthetic video-text dataset shape."""

    n_pairs: int = Field(256, gt=0)
    appearance_classes: int = Field(4, gt=0)
    order_classes: int = Field(2, ge=2, le=2, description="forward and reversed")
    frames: int = Field(4, gt=0)
    n_patches: int = Field(16, gt=0)
    patch_dim: int = Field(12, gt=0)
    noise_std: float = Field(0.1, ge=0)
    text_len: int = Field(8, ge=3)
    vocab_size: int = Field(64, gt=0)
    n_test: int = Field(64, ge=0)
    seed: int = Field(0, ge=0)


_SECTIONS: Dict[str, type] = {
    "encoder": EncoderConfig,
    "adapter": AdapterConfig,
    "cmi": CmiConfig,
    "tau": TauConfig,
    "train": TrainConfig,
    "data": DatasetSpec,
}


def _parse_layers(key: str, text: str, depth: int) -> Tuple[int, ...]:
    text = text.strip()
    if text == "none":
        return ()
    if text == "all":
        return tuple(range(depth))
    if text == "last":
        return (depth - 1,)
    if text.startswith("last:"):
        try:
            k = int(text[len("last:"):])
        except ValueError:
            raise ConfigError(key, f"bad layer spec '{text}'") from None
        if not 1 <= k <= depth:
            raise ConfigError(key, f"last:{k} outside 1..{depth}")
        return tuple(range(depth - k, depth))
    try:
        picked = sorted({int(part) for part in text.split(",") if part.strip()})
    except ValueError:
        raise ConfigError(key, f"bad layer spec '{text}'") from None
    if any(not 0 <= i < depth for i in picked):
        raise ConfigError(key, f"layer indices {picked} outside 0..{depth - 1}")
    return tuple(picked)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig(BaseModel):
    """
    Complete run configuration, one section per key namespace.

    Files use a flat ``key = value`` grammar (UTF-8, ``#`` comments), keys
    namespaced ``encoder.*``, ``adapter.*``, ``cmi.*``, ``tau.*``,
    ``train.*`` and ``data.*``. Every key has a default.

    Example:
        config = RunConfig.from_text("adapter.video_mode = adaptmlp_sequential")
        config.cmi_layers()  # (1,)
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    encoder: EncoderConfig = EncoderConfig()
    adapter: AdapterConfig = AdapterConfig()
    cmi: CmiConfig = CmiConfig()
    tau: TauConfig = TauConfig()
    train: TrainConfig = TrainConfig()
    data: DatasetSpec = DatasetSpec()

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "RunConfig":
        """Build from flat ``section.field`` keys; raises ConfigError naming the key."""
        nested: Dict[str, Dict[str, str]] = {}
        for key, raw in values.items():
            section, _, field = key.partition(".")
            model = _SECTIONS.get(section)
            if model is None or not field or field not in model.model_fields:
                raise ConfigError(key, "unknown key")
            nested.setdefault(section, {})[field] = raw
        try:
            config = cls(**{name: _SECTIONS[name](**fields) for name, fields in nested.items()})
        except ValidationError as e:
            first = e.errors()[0]
            section = next((s for s in nested if _SECTIONS[s].__name__ == e.title), "config")
            loc = ".".join(str(part) for part in first["loc"])
            raise ConfigError(f"{section}.{loc}", first["msg"]) from None
        config.check()
        return config

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        values: Dict[str, str] = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep or not key:
                raise ConfigError(key or f"line {lineno}", f"expected 'key = value' on line {lineno}")
            if key in values:
                raise ConfigError(key, f"duplicate key on line {lineno}")
            values[key] = value.strip()
        return cls.from_mapping(values)

    @classmethod
    def from_file(cls, path: Path) -> "RunConfig":
        path = Path(path)
        config = cls.from_text(path.read_text(encoding="utf-8"))
        logger.info(f"Loaded run config from {path}")
        return config

    @classmethod
    def clip_b16(cls) -> "RunConfig":
        """CLIP ViT-B/16 shaped preset used for real-dimension accounting."""
        return cls.from_mapping(
            {
                "encoder.d_v": "768",
                "encoder.d_t": "512",
                "encoder.layers": "12",
                "encoder.heads": "8",
                "encoder.n_patches": "196",
                "encoder.patch_dim": "768",
                "encoder.vocab_size": "49408",
                "encoder.max_text_len": "77",
                "encoder.max_frames": "12",
                "encoder.embed_dim": "512",
                "adapter.bottleneck": "64",
                "cmi.m": "16",
                "cmi.n": "8",
            }
        )

    def check(self) -> None:
        """Cross-section invariants."""
        enc, ad = self.encoder, self.adapter
        if enc.d_v % enc.heads:
            raise ConfigError("encoder.heads", f"d_v={enc.d_v} not divisible by heads={enc.heads}")
        if enc.d_t % enc.heads:
            raise ConfigError("encoder.heads", f"d_t={enc.d_t} not divisible by heads={enc.heads}")
        if ad.bottleneck >= min(enc.d_v, enc.d_t):
            raise ConfigError("adapter.bottleneck", f"d'={ad.bottleneck} must be below d_v and d_t")
        if ad.bottleneck % ad.sigma:
            raise ConfigError("adapter.sigma", f"d'={ad.bottleneck} not divisible by sigma={ad.sigma}")
        if ad.bottleneck % ad.trm_heads:
            raise ConfigError("adapter.trm_heads", f"d'={ad.bottleneck} not divisible by trm_heads")
        if self.tau.cap_end > self.tau.cap_start:
            raise ConfigError("tau.cap_end", "cap_end exceeds cap_start")
        adapter_layers = self.adapter_layers()
        cmi_layers = self.cmi_layers()
        if cmi_layers:
            if not set(cmi_layers) <= set(adapter_layers) or not self.has_adapters():
                raise ConfigError("cmi.layers", f"CMI layers {cmi_layers} carry no adapter")
            if enc.d_v % self.cmi.m or enc.d_t % self.cmi.m:
                raise ConfigError("cmi.m", f"m={self.cmi.m} must divide d_v={enc.d_v} and d_t={enc.d_t}")
            if ad.bottleneck % self.cmi.n:
                raise ConfigError("cmi.n", f"n={self.cmi.n} must divide d'={ad.bottleneck}")

    def has_adapters(self) -> bool:
        return self.adapter.video_mode != "none" or self.adapter.text_mode != "none"

    def adapter_layers(self) -> Tuple[int, ...]:
        return _parse_layers("adapter.layers", self.adapter.layers, self.encoder.layers)

    def cmi_layers(self) -> Tuple[int, ...]:
        return _parse_layers("cmi.layers", self.cmi.layers, self.encoder.layers)

    def updated(self, **changes: str) -> "RunConfig":
        """Copy with flat-key overrides, e.g. ``updated(**{"train.seed": "42"})``."""
        values = self.flat()
        for key, value in changes.items():
            if key not in values:
                raise ConfigError(key, "unknown key")
            values[key] = value
        return RunConfig.from_mapping(values)

    def flat(self) -> Dict[str, str]:
        values: Dict[str, str] = {}
        for name in _SECTIONS:
            section = getattr(self, name)
            for field in type(section).model_fields:
                values[f"{name}.{field}"] = _format_value(getattr(section, field))
        return values

    def canonical_text(self) -> str:
        """Every key, sorted, one ``key = value`` per line."""
        return "".join(f"{k} = {v}\n" for k, v in sorted(self.flat().items()))


def documented_keys() -> List[Tuple[str, str, Optional[str]]]:
    """(key, default, description) for every configuration key."""
    rows = []
    for name, model in _SECTIONS.items():
        for field, info in model.model_fields.items():
            rows.append((f"{name}.{field}", _format_value(info.default), info.description))
    return rows
