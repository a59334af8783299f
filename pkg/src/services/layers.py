import math
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from src.services.numerics import (
    Tensor,
    add,
    concat,
    constant,
    gelu,
    layer_norm,
    matmul,
    mul,
    scale,
    seeded_init,
    slice_,
    softmax,
    transpose,
)

MASKED_SCORE = -1e9


@dataclass(frozen=True)
class ParamSpec:
    """
    Declaration of one parameter tensor.

    ``group`` is the accounting bucket (``backbone``, ``down``, ``trm``,
    ``up``, ``calibration``, ``temporal``, ``cmi`` or ``tau``).
    """

    path: str
    shape: Tuple[int, ...]
    scheme: str
    tunable: bool
    group: str
    fan_in: Optional[int] = None
    fill: Optional[float] = None

    @property
    def size(self) -> int:
        return int(math.prod(self.shape))

    def build(self, seed: int) -> Tensor:
        if self.fill is not None:
            tensor = Tensor(np.full(self.shape, self.fill), requires_grad=self.tunable, name=self.path)
        else:
            tensor = seeded_init(
                self.shape, self.scheme, seed, path=self.path, fan_in=self.fan_in, requires_grad=self.tunable
            )
        if not self.tunable:
            tensor.data.flags.writeable = False
        return tensor


class ParamScope:
    """Prefix view over a flat ``path -> Tensor`` map."""

    def __init__(self, params: Mapping[str, Tensor], prefix: str = ""):
        self._params = params
        self.prefix = prefix

    def path(self, name: str) -> str:
        return f"{self.prefix}.{name}" if self.prefix else name

    def __getitem__(self, name: str) -> Tensor:
        return self._params[self.path(name)]

    def __contains__(self, name: str) -> bool:
        return self.path(name) in self._params

    def get(self, name: str) -> Optional[Tensor]:
        return self._params.get(self.path(name))

    def scope(self, name: str) -> "ParamScope":
        return ParamScope(self._params, self.path(name))


def linear_specs(prefix: str, d_in: int, d_out: int, tunable: bool, group: str, bias: bool = True) -> list:
    specs = [ParamSpec(f"{prefix}.w", (d_in, d_out), "scaled-normal", tunable, group, fan_in=d_in)]
    if bias:
        specs.append(ParamSpec(f"{prefix}.b", (d_out,), "zeros", tunable, group))
    return specs


def layer_norm_specs(prefix: str, d: int, tunable: bool, group: str) -> list:
    return [
        ParamSpec(f"{prefix}.g", (d,), "ones", tunable, group),
        ParamSpec(f"{prefix}.b", (d,), "zeros", tunable, group),
    ]


def attention_specs(prefix: str, d: int, tunable: bool, group: str) -> list:
    specs = []
    for name in ("q", "k", "v", "o"):
        specs.append(ParamSpec(f"{prefix}.w{name}", (d, d), "scaled-normal", tunable, group, fan_in=d))
        specs.append(ParamSpec(f"{prefix}.b{name}", (d,), "zeros", tunable, group))
    return specs


def feed_forward_specs(prefix: str, d: int, mult: int, tunable: bool, group: str) -> list:
    hidden = d * mult
    return [
        ParamSpec(f"{prefix}.w1", (d, hidden), "scaled-normal", tunable, group, fan_in=d),
        ParamSpec(f"{prefix}.b1", (hidden,), "zeros", tunable, group),
        ParamSpec(f"{prefix}.w2", (hidden, d), "scaled-normal", tunable, group, fan_in=hidden),
        ParamSpec(f"{prefix}.b2", (d,), "zeros", tunable, group),
    ]


def block_specs(prefix: str, d: int, ffn_mult: int, tunable: bool, group: str) -> list:
    """Pre-norm transformer block: ln1, attn, ln2, ffn."""
    return (
        layer_norm_specs(f"{prefix}.ln1", d, tunable, group)
        + attention_specs(f"{prefix}.attn", d, tunable, group)
        + layer_norm_specs(f"{prefix}.ln2", d, tunable, group)
        + feed_forward_specs(f"{prefix}.ffn", d, ffn_mult, tunable, group)
    )


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, w)
    return add(out, b) if b is not None else out


def layer_norm_affine(x: Tensor, params: ParamScope) -> Tensor:
    return add(mul(layer_norm(x), params["g"]), params["b"])


def mask_bias(key_mask: np.ndarray) -> Tensor:
    """Additive score bias (..., 1, M) from a boolean (..., M) keep-mask."""
    keep = np.asarray(key_mask, dtype=bool)
    return constant(np.where(keep, 0.0, MASKED_SCORE)[..., None, :])


def multi_head_attention(
    x: Tensor, params: ParamScope, heads: int, key_mask: Optional[np.ndarray] = None
) -> Tensor:
    """
    Scaled dot-product self-attention over the second-to-last axis.

    Args:
        x: (..., M, d) token matrix
        params: Scope holding wq/bq, wk/bk, wv/bv, wo/bo
        heads: Number of heads; d must be divisible by it
        key_mask: Optional boolean (..., M); False keys receive no attention
    """
    d = x.shape[-1]
    head_dim = d // heads
    q = linear(x, params["wq"], params["bq"])
    k = linear(x, params["wk"], params["bk"])
    v = linear(x, params["wv"], params["bv"])
    bias = mask_bias(key_mask) if key_mask is not None else None
    outputs = []
    for h in range(heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        qh = slice_(q, -1, lo, hi)
        kh = slice_(k, -1, lo, hi)
        vh = slice_(v, -1, lo, hi)
        scores = scale(matmul(qh, transpose(kh)), 1.0 / math.sqrt(head_dim))
        if bias is not None:
            scores = add(scores, bias)
        outputs.append(matmul(softmax(scores), vh))
    merged = concat(outputs, axis=-1) if heads > 1 else outputs[0]
    return linear(merged, params["wo"], params["bo"])


def feed_forward(x: Tensor, params: ParamScope) -> Tensor:
    return linear(gelu(linear(x, params["w1"], params["b1"])), params["w2"], params["b2"])


def transformer_layer(
    x: Tensor, params: ParamScope, heads: int, key_mask: Optional[np.ndarray] = None
) -> Tensor:
    """One pre-norm layer without a side branch: x + MHSA(LN(x)), then + FFN(LN(.))."""
    h = add(x, multi_head_attention(layer_norm_affine(x, params.scope("ln1")), params.scope("attn"), heads, key_mask))
    return add(h, feed_forward(layer_norm_affine(h, params.scope("ln2")), params.scope("ffn")))


def collect(specs, seed: int) -> Dict[str, Tensor]:
    return {spec.path: spec.build(seed) for spec in specs}
