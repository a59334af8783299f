"""Straight-line numpy re-implementations of the model arithmetic, used as test oracles."""

import math

import numpy as np

PAD = 0


def ln(x, g, b, eps=1e-5):
    xc = x - x.mean(axis=-1, keepdims=True)
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * g + b


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def attention(x, p, prefix, heads, key_mask=None):
    """Multi-head self-attention over axis -2 of a 2-D (M, d) input."""
    d = x.shape[-1]
    hd = d // heads
    q = x @ p[f"{prefix}.wq"] + p[f"{prefix}.bq"]
    k = x @ p[f"{prefix}.wk"] + p[f"{prefix}.bk"]
    v = x @ p[f"{prefix}.wv"] + p[f"{prefix}.bv"]
    outs = []
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        scores = q[:, sl] @ k[:, sl].T / math.sqrt(hd)
        if key_mask is not None:
            scores = scores + np.where(key_mask, 0.0, -1e9)[None, :]
        outs.append(softmax(scores) @ v[:, sl])
    return np.concatenate(outs, axis=-1) @ p[f"{prefix}.wo"] + p[f"{prefix}.bo"]


def ffn(x, p, prefix):
    return gelu(x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"]) @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]


def transformer_layer(x, p, prefix, heads, key_mask=None):
    h = x + attention(ln(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"]), p, f"{prefix}.attn", heads, key_mask)
    return h + ffn(ln(h, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"]), p, f"{prefix}.ffn")


def text_branch(x, p, prefix, s, heads, w_down=None, key_mask=None):
    w_down = p[f"{prefix}.w_down"] if w_down is None else w_down
    return s * (transformer_layer(x @ w_down, p, f"{prefix}.trm", heads, key_mask) @ p[f"{prefix}.w_up"])


def adaptmlp(x, p, prefix, s, w_down=None):
    w_down = p[f"{prefix}.w_down"] if w_down is None else w_down
    return s * (np.maximum(x @ w_down, 0.0) @ p[f"{prefix}.w_up"])


def temporal(cls, p, prefix, heads):
    """(adapted (V, d'), hat_cc (d',)) for one video."""
    frames = cls.shape[0]
    if f"{prefix}.temporal_pos" in p:
        cls = cls + p[f"{prefix}.temporal_pos"][:frames]
    out = transformer_layer(np.vstack([cls, p[f"{prefix}.cc"][None]]), p, f"{prefix}.trm", heads)
    return out[:frames], out[frames]


def calibration(hat_cc, hat_cls, p, prefix):
    alpha = np.concatenate([hat_cc, hat_cls])
    hidden = np.maximum(alpha @ p[f"{prefix}.fc1.w"] + p[f"{prefix}.fc1.b"], 0.0)
    return hidden @ p[f"{prefix}.fc2.w"] + p[f"{prefix}.fc2.b"]


def video_branch(f, p, prefix, s, heads, w_down=None, calibrate=True):
    """Video adapter output for one video's (V, T, d) FFN output."""
    w_down = p[f"{prefix}.w_down"] if w_down is None else w_down
    w_up = p[f"{prefix}.w_up"]
    z = f @ w_down
    adapted, hat_cc = temporal(z[:, 0, :], p, prefix, heads)
    out = np.zeros(f.shape)
    for i in range(f.shape[0]):
        out[i, 0] = s * (adapted[i] @ w_up)
        if calibrate:
            alpha = calibration(hat_cc, adapted[i], p, prefix)
            w_cal = np.array([alpha[r] * w_up[r] for r in range(w_up.shape[0])])
        else:
            w_cal = w_up
        for t in range(1, f.shape[1]):
            out[i, t] = s * (z[i, t] @ w_cal)
    return out


def _branch(modality, mode, u, f, p, prefix, s, heads, w_down, key_mask=None):
    if mode in ("full", "cls_temporal"):
        return video_branch(f, p, prefix, s, heads, w_down, calibrate=mode == "full")
    if mode == "basic":
        if modality == "video":
            return np.stack([text_branch(frame, p, prefix, s, heads, w_down) for frame in f])
        return text_branch(f, p, prefix, s, heads, w_down, key_mask)
    if mode == "adaptmlp_parallel":
        return adaptmlp(u, p, prefix, s, w_down)
    return adaptmlp(f, p, prefix, s, w_down)


def _blocks(x, p, config, modality, adapters, key_mask=None):
    enc, ad = config.encoder, config.adapter
    encoder = "vision" if modality == "video" else "text"
    mode = ad.video_mode if modality == "video" else ad.text_mode
    layers = set(config.adapter_layers()) if adapters and mode != "none" else set()
    for layer in range(enc.layers):
        prefix = f"{encoder}.blocks.{layer}"
        if modality == "video":
            h = np.stack(
                [
                    frame + attention(ln(frame, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"]), p, f"{prefix}.attn", enc.heads)
                    for frame in x
                ]
            )
        else:
            h = x + attention(ln(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"]), p, f"{prefix}.attn", enc.heads, key_mask)
        u = ln(h, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
        f = ffn(u, p, f"{prefix}.ffn")
        y = h + f
        if layer in layers:
            if layer in config.cmi_layers():
                w_down = np.kron(p[f"cmi.{layer}.m_c"], p[f"cmi.{layer}.m_d_{modality}"])
            else:
                w_down = p[f"adapters.{modality}.{layer}.w_down"]
            y = y + _branch(
                modality, mode, u, f, p, f"adapters.{modality}.{layer}", ad.scale, ad.trm_heads, w_down, key_mask
            )
        x = y
    return x


def encode_frames(frames, p, config, adapters=True):
    """(V, d_v) final [CLS] features of one (V, N_P, patch_dim) video."""
    enc = config.encoder
    x = frames @ p["vision.patch_proj"]
    cls = np.broadcast_to(p["vision.cls"], (frames.shape[0], 1, enc.d_v))
    x = np.concatenate([cls, x], axis=1) + p["vision.pos"]
    x = ln(x, p["vision.ln_pre.g"], p["vision.ln_pre.b"])
    x = _blocks(x, p, config, "video", adapters)
    return ln(x[:, 0, :], p["vision.ln_post.g"], p["vision.ln_post.b"])


def encode_text(tokens, p, config, adapters=True):
    """(d_t,) feature of one token sequence."""
    enc = config.encoder
    ids = np.full(enc.max_text_len, PAD, dtype=np.int64)
    ids[: len(tokens)] = tokens
    x = p["text.token_emb"][ids] + p["text.pos"]
    x = _blocks(x, p, config, "text", adapters, key_mask=ids != PAD)
    return ln(x[-1], p["text.ln_final.g"], p["text.ln_final.b"])


def arrays(params):
    """Plain ndarray view of a ``path -> Tensor`` map."""
    return {path: tensor.data for path, tensor in params.items()}
