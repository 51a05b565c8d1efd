"""
Sign classifiers over windowed pose clips.

Transformer-SL: linear frame embedding, class token prepended, trainable
positional vectors, pre-norm encoder blocks with padded keys masked out.

Mamba-SL: linear frame embedding, class token inserted right after the last
valid frame, residual selective-SSM blocks (causal conv + scan + gate).

Both end in the same head: norm -> fc(hidden -> output_size) -> GELU -> fc(-> C).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from numcore import (
    ConfigError,
    LabelIndexError,
    RangeError,
    ShapeError,
    Tensor,
    as_tensor,
    check_finite,
    concat,
    dct_basis,
    dropout,
    gelu,
    layer_norm,
    linear,
    log_softmax,
    no_grad,
    ones,
    parameter,
    selective_scan,
    silu,
    softmax,
    softplus,
    xavier_uniform,
    zeros,
)
from posedata import FEATURES, WINDOW

MODEL_KINDS = ("transformer-sl", "mamba-sl")


# --------------------------
# CONFIGS
# --------------------------
@dataclass
class TransformerSlConfig:
    num_classes: int
    layers: int = 2
    heads: int = 4
    hidden_dim: int = 80
    mlp_dim: int = 256
    output_size: int = 1024
    dropout: float = 0.2
    max_tokens: int = WINDOW + 1
    features: int = FEATURES
    use_dct: bool = False

    def __post_init__(self):
        dims = (self.num_classes, self.layers, self.heads, self.hidden_dim, self.mlp_dim,
                self.output_size, self.max_tokens, self.features)
        if any(int(v) < 1 for v in dims):
            raise ConfigError(f"Transformer-SL dimensions must all be positive: {self}")
        if self.hidden_dim % self.heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} is not divisible by {self.heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass
class MambaSlConfig:
    num_classes: int
    layers: int = 1
    hidden_dim: int = 64
    state_dim: int = 16
    conv_width: int = 4
    expand_factor: int = 2
    output_size: int = 1024
    dropout: float = 0.2
    features: int = FEATURES
    use_dct: bool = False

    def __post_init__(self):
        dims = (self.num_classes, self.layers, self.hidden_dim, self.state_dim, self.conv_width,
                self.expand_factor, self.output_size, self.features)
        if any(int(v) < 1 for v in dims):
            raise ConfigError(f"Mamba-SL dimensions must all be positive: {self}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def inner_dim(self) -> int:
        return self.expand_factor * self.hidden_dim

    @property
    def dt_rank(self) -> int:
        return math.ceil(self.hidden_dim / 16)


ModelConfig = TransformerSlConfig | MambaSlConfig

# Per-dataset model shapes; num_classes is filled in from the dataset.
TRANSFORMER_PRESETS = {
    "lsfb": {"layers": 2, "heads": 4, "hidden_dim": 80, "mlp_dim": 256, "output_size": 1024},
    "include": {"layers": 2, "heads": 4, "hidden_dim": 80, "mlp_dim": 128, "output_size": 1024},
    "display": {"layers": 2, "heads": 4, "hidden_dim": 80, "mlp_dim": 128, "output_size": 1024},
}
MAMBA_PRESETS = {
    "lsfb": {"layers": 1, "hidden_dim": 512, "output_size": 1024},
    "include": {"layers": 2, "hidden_dim": 64, "output_size": 1024},
    "display": {"layers": 1, "hidden_dim": 64, "output_size": 1024},
}


def config_class(kind: str):
    if kind == "transformer-sl":
        return TransformerSlConfig
    if kind == "mamba-sl":
        return MambaSlConfig
    raise ConfigError(f"Unknown model kind '{kind}', expected one of {MODEL_KINDS}")


def make_config(kind: str, num_classes: int, **overrides) -> ModelConfig:
    cls = config_class(kind)
    known = {f.name for f in fields(cls)}
    unknown = set(overrides) - known
    if unknown:
        raise ConfigError(f"Unknown {kind} config keys: {sorted(unknown)}")
    return cls(num_classes=num_classes, **overrides)


def config_kind(config: ModelConfig) -> str:
    return "transformer-sl" if isinstance(config, TransformerSlConfig) else "mamba-sl"


# --------------------------
# PARAMETERS
# --------------------------
def _init_head(rng: np.random.Generator, hidden: int, config: ModelConfig) -> dict[str, Tensor]:
    return {
        "head.norm.gain": ones(hidden),
        "head.norm.bias": zeros(hidden),
        "head.fc1.weight": xavier_uniform(rng, hidden, config.output_size),
        "head.fc1.bias": zeros(config.output_size),
        "head.fc2.weight": xavier_uniform(rng, config.output_size, config.num_classes),
        "head.fc2.bias": zeros(config.num_classes),
    }


def init_transformer(config: TransformerSlConfig, seed: int | np.random.Generator = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    H = config.hidden_dim
    params = {
        "embed.weight": xavier_uniform(rng, config.features, H),
        "embed.bias": zeros(H),
        "cls_token": parameter(rng.normal(0.0, 0.02, size=H)),
        "pos_embedding": parameter(rng.normal(0.0, 0.02, size=(config.max_tokens, H))),
    }
    for i in range(config.layers):
        p = f"layers.{i}."
        params.update({
            p + "norm1.gain": ones(H),
            p + "norm1.bias": zeros(H),
            p + "attn.qkv.weight": xavier_uniform(rng, H, 3 * H),
            p + "attn.qkv.bias": zeros(3 * H),
            p + "attn.out.weight": xavier_uniform(rng, H, H),
            p + "attn.out.bias": zeros(H),
            p + "norm2.gain": ones(H),
            p + "norm2.bias": zeros(H),
            p + "mlp.fc1.weight": xavier_uniform(rng, H, config.mlp_dim),
            p + "mlp.fc1.bias": zeros(config.mlp_dim),
            p + "mlp.fc2.weight": xavier_uniform(rng, config.mlp_dim, H),
            p + "mlp.fc2.bias": zeros(H),
        })
    params.update(_init_head(rng, H, config))
    return params


def init_mamba(config: MambaSlConfig, seed: int | np.random.Generator = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    H, E, S, R = config.hidden_dim, config.inner_dim, config.state_dim, config.dt_rank
    params = {
        "embed.weight": xavier_uniform(rng, config.features, H),
        "embed.bias": zeros(H),
        "cls_token": parameter(rng.normal(0.0, 0.02, size=H)),
    }
    # dt bias so softplus(bias) starts log-uniform in [1e-3, 1e-1]
    dt = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), size=E))
    for i in range(config.layers):
        p = f"layers.{i}."
        params.update({
            p + "norm.gain": ones(H),
            p + "norm.bias": zeros(H),
            p + "in_proj.weight": xavier_uniform(rng, H, 2 * E),
            p + "conv.weight": parameter(rng.uniform(-1.0, 1.0, size=(config.conv_width, E)) / math.sqrt(config.conv_width)),
            p + "conv.bias": zeros(E),
            p + "x_proj.weight": xavier_uniform(rng, E, R + 2 * S),
            p + "dt_proj.weight": xavier_uniform(rng, R, E),
            p + "dt_proj.bias": parameter(dt + np.log(-np.expm1(-dt))),
            p + "a_log": parameter(np.log(np.tile(np.arange(1, S + 1, dtype=np.float64), (E, 1)))),
            p + "d": ones(E),
            p + "out_proj.weight": xavier_uniform(rng, E, H),
        })
    params.update(_init_head(rng, H, config))
    return params


# --------------------------
# TOKENIZATION
# --------------------------
@dataclass
class TokenizedClip:
    tokens: Tensor                      # (B, tokens, hidden)
    valid_frames: np.ndarray            # (B,)
    class_token_position: np.ndarray    # (B,)
    kind: str

    @property
    def key_mask(self) -> np.ndarray:
        """(B, tokens) True where the token is the class token or a valid frame."""
        batch, count = self.tokens.shape[:2]
        positions = np.arange(count)[None, :]
        if self.kind == "transformer-sl":
            return positions <= self.valid_frames[:, None]
        return positions <= self.class_token_position[:, None]


def apply_temporal_dct(clips: np.ndarray, valid_frames) -> np.ndarray:
    """Orthonormal DCT over each clip's valid frames; padding rows stay zero."""
    clips = np.asarray(clips, dtype=np.float64)
    valid = np.atleast_1d(np.asarray(valid_frames, dtype=np.int64))
    out = np.zeros_like(clips)
    for b, v in enumerate(valid):
        out[b, :v] = dct_basis(int(v)).forward_matrix @ clips[b, :v]
    return out


def _as_batch(clips, valid_frames, features: int) -> tuple[np.ndarray, np.ndarray]:
    clips = np.asarray(clips, dtype=np.float64)
    if clips.ndim == 2:
        clips = clips[None]
    if clips.ndim != 3 or clips.shape[-1] != features:
        raise ShapeError(f"Clips must be (batch, frames, {features}), got {clips.shape}")
    valid = np.atleast_1d(np.asarray(valid_frames, dtype=np.int64))
    if valid.shape == (1,) and clips.shape[0] > 1:
        valid = np.repeat(valid, clips.shape[0])
    if valid.shape != (clips.shape[0],):
        raise ShapeError(f"Expected {clips.shape[0]} valid frame counts, got shape {valid.shape}")
    frames = clips.shape[1]
    if np.any(valid < 1) or np.any(valid > frames):
        raise RangeError(f"valid_frames {valid.tolist()} outside [1, {frames}]")
    return clips, valid


def tokenize(config: ModelConfig, params: dict[str, Tensor], clips, valid_frames) -> TokenizedClip:
    """One token per frame plus one class token; the layout depends on the model kind."""
    kind = config_kind(config)
    clips, valid = _as_batch(clips, valid_frames, config.features)
    if config.use_dct:
        clips = apply_temporal_dct(clips, valid)
    batch, frames, _ = clips.shape
    hidden = params["embed.weight"].shape[1]
    emb = linear(Tensor(clips), params["embed.weight"], params["embed.bias"])     # (B, F, H)
    cls = params["cls_token"].reshape(1, 1, hidden) + Tensor(np.zeros((batch, 1, hidden)))

    if kind == "transformer-sl":
        if frames + 1 > config.max_tokens:
            raise ShapeError(f"{frames} frames exceed max_tokens {config.max_tokens} with the class token")
        tokens = concat([cls, emb], axis=1) + params["pos_embedding"][:frames + 1]
        return TokenizedClip(tokens, valid, np.zeros(batch, dtype=np.int64), kind)

    # class token is appended last, then moved to slot `valid` by a gather
    extended = concat([emb, cls], axis=1)                                          # (B, F + 1, H)
    t = np.arange(frames + 1)[None, :]
    v = valid[:, None]
    gather = np.where(t < v, t, np.where(t == v, frames, t - 1))
    tokens = extended[np.arange(batch)[:, None], gather]
    return TokenizedClip(tokens, valid, valid.copy(), kind)


# --------------------------
# TRANSFORMER-SL
# --------------------------
def multi_head_attention(x: Tensor, params: dict[str, Tensor], prefix: str, heads: int,
                         key_mask: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Self-attention over (B, T, H); returns the output and (B, heads, T, T) weights."""
    batch, count, hidden = x.shape
    head_dim = hidden // heads
    qkv = linear(x, params[prefix + "qkv.weight"], params[prefix + "qkv.bias"])
    qkv = qkv.reshape(batch, count, 3, heads, head_dim).transpose(2, 0, 3, 1, 4)   # (3, B, h, T, d)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(head_dim))
    mask = None
    if key_mask is not None:
        mask = np.where(key_mask, 0.0, -np.inf)[:, None, None, :]
    weights = softmax(scores, axis=-1, mask=mask)
    out = (weights @ v).transpose(0, 2, 1, 3).reshape(batch, count, hidden)
    return linear(out, params[prefix + "out.weight"], params[prefix + "out.bias"]), weights.data


def _head(x: Tensor, params: dict[str, Tensor], rate: float, rng, training: bool) -> Tensor:
    h = layer_norm(x, params["head.norm.gain"], params["head.norm.bias"])
    h = gelu(linear(h, params["head.fc1.weight"], params["head.fc1.bias"]))
    h = dropout(h, rate, rng, training)
    return linear(h, params["head.fc2.weight"], params["head.fc2.bias"])


def transformer_forward(config: TransformerSlConfig, params: dict[str, Tensor], clip: TokenizedClip,
                        training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    if clip.kind != "transformer-sl":
        raise ConfigError(f"transformer_forward got a {clip.kind} token layout")
    x = clip.tokens
    mask = clip.key_mask
    for i in range(config.layers):
        p = f"layers.{i}."
        h = layer_norm(x, params[p + "norm1.gain"], params[p + "norm1.bias"])
        attn, _ = multi_head_attention(h, params, p + "attn.", config.heads, mask)
        x = x + dropout(attn, config.dropout, rng, training)
        h = layer_norm(x, params[p + "norm2.gain"], params[p + "norm2.bias"])
        h = gelu(linear(h, params[p + "mlp.fc1.weight"], params[p + "mlp.fc1.bias"]))
        h = linear(h, params[p + "mlp.fc2.weight"], params[p + "mlp.fc2.bias"])
        x = x + dropout(h, config.dropout, rng, training)
    logits = _head(x[:, 0, :], params, config.dropout, rng, training)
    check_finite(logits.data, "Transformer-SL logits")
    return logits


# --------------------------
# MAMBA-SL
# --------------------------
def causal_conv(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Depthwise causal convolution over time: (B, T, E) with (width, E) taps."""
    batch, length, channels = x.shape
    width = weight.shape[0]
    if weight.shape != (width, channels) or bias.shape != (channels,):
        raise ShapeError(f"causal_conv weights {weight.shape}/{bias.shape} do not match {channels} channels")
    padded = concat([Tensor(np.zeros((batch, width - 1, channels))), x], axis=1)
    out = bias
    for k in range(width):
        out = out + padded[:, k:k + length, :] * weight[k]
    return out


def ssm_scan(u: Tensor, params: dict[str, Tensor], prefix: str, state_dim: int) -> Tensor:
    """Selective SSM: input-dependent (delta, B, C) from u, then the diagonal recurrence."""
    rank = params[prefix + "dt_proj.weight"].shape[0]
    proj = linear(u, params[prefix + "x_proj.weight"])
    dt_in = proj[..., :rank]
    b = proj[..., rank:rank + state_dim]
    c = proj[..., rank + state_dim:rank + 2 * state_dim]
    delta = softplus(linear(dt_in, params[prefix + "dt_proj.weight"], params[prefix + "dt_proj.bias"]))
    a = -params[prefix + "a_log"].exp()
    return selective_scan(u, delta, a, b, c, params[prefix + "d"])


def mamba_forward(config: MambaSlConfig, params: dict[str, Tensor], clip: TokenizedClip,
                  training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    if clip.kind != "mamba-sl":
        raise ConfigError(f"mamba_forward got a {clip.kind} token layout")
    x = clip.tokens
    E = config.inner_dim
    for i in range(config.layers):
        p = f"layers.{i}."
        h = layer_norm(x, params[p + "norm.gain"], params[p + "norm.bias"])
        xz = linear(h, params[p + "in_proj.weight"])
        xs, gate = xz[..., :E], xz[..., E:]
        xs = silu(causal_conv(xs, params[p + "conv.weight"], params[p + "conv.bias"]))
        y = ssm_scan(xs, params, p, config.state_dim) * silu(gate)
        x = x + dropout(linear(y, params[p + "out_proj.weight"]), config.dropout, rng, training)
    batch = x.shape[0]
    pooled = x[np.arange(batch), clip.class_token_position]
    logits = _head(pooled, params, config.dropout, rng, training)
    check_finite(logits.data, "Mamba-SL logits")
    return logits


# --------------------------
# LOSS / WRAPPER
# --------------------------
def classify_loss(logits, label) -> Tensor:
    """Mean softmax cross-entropy over the batch."""
    logits = as_tensor(logits)
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    batch, num_classes = logits.shape
    if labels.shape != (batch,):
        raise ShapeError(f"Expected {batch} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise LabelIndexError(f"Labels {labels.tolist()} outside [0, {num_classes})")
    picked = log_softmax(logits, axis=-1)[np.arange(batch), labels]
    return -picked.mean()


class Classifier:
    """A recognizer (either kind) with its parameter dict."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.kind = config_kind(config)
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, seed: int | np.random.Generator = 0) -> "Classifier":
        if isinstance(config, TransformerSlConfig):
            return cls(config, init_transformer(config, seed))
        return cls(config, init_mamba(config, seed))

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def config_dict(self) -> dict:
        return {"kind": self.kind, **asdict(self.config)}

    def logits(self, clips, valid_frames, training: bool = False,
               rng: np.random.Generator | None = None) -> Tensor:
        tokens = tokenize(self.config, self.params, clips, valid_frames)
        if self.kind == "transformer-sl":
            return transformer_forward(self.config, self.params, tokens, training, rng)
        return mamba_forward(self.config, self.params, tokens, training, rng)

    def predict(self, clips, valid_frames) -> np.ndarray:
        with no_grad():
            return np.argmax(self.logits(clips, valid_frames).data, axis=-1)
