"""Encoder-decoder speech transformer.

A two-layer convolutional frontend turns 100 Hz log-Mel frames into 50 Hz
features, a pre-norm transformer encoder contextualises them, and an
autoregressive decoder with causal self-attention and audio cross-attention
predicts tokens. Blocks expose named insertion points so that fusion layers
can be spliced in without touching the base weights.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

from ..autodiff import Dropout, Embedding, FeedForward, LayerNorm, Linear, Module, Parameter, Tensor, ops
from ..autodiff.tensor import ShapeError, get_dtype

MEL_OFFSET, MEL_SCALE = 4.0, 4.0

DECODER_POINTS = ("beginning", "after_self_attn", "after_cross_attn", "after_mlp")
ENCODER_POINTS = ("beginning", "after_self_attn", "after_mlp")


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 4
    n_dec_layers: int = 4
    d_ff: int = 256
    vocab_size: int = 128
    max_source_positions: int = 400
    max_target_positions: int = 64
    mel_bins: int = 80
    conv_kernel: int = 3
    conv_strides: tuple = (1, 2)
    dropout: float = 0.1
    n_special: int = 9

    def __post_init__(self) -> None:
        self.conv_strides = tuple(self.conv_strides)
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.vocab_size < self.n_special:
            raise ValueError(f"vocab_size {self.vocab_size} smaller than special-token count {self.n_special}")
        if len(self.conv_strides) != 2 or int(np.prod(self.conv_strides)) != 2:
            raise ValueError(f"conv strides {self.conv_strides} must be two layers with product 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_strides"] = list(self.conv_strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def sinusoids(length: int, channels: int, max_timescale: float = 10000.0) -> np.ndarray:
    half = channels // 2
    inc = math.log(max_timescale) / (half - 1)
    inv = np.exp(-inc * np.arange(half))
    t = np.arange(length)[:, None] * inv[None, :]
    return np.concatenate([np.sin(t), np.cos(t)], axis=1)


def attention_mask(key_mask: Optional[np.ndarray], lq: int, lk: int, causal: bool) -> Optional[np.ndarray]:
    """Boolean keep-mask broadcastable to [B, H, Lq, Lk]."""
    mask = None
    if key_mask is not None:
        mask = key_mask[:, None, None, :].astype(bool)
    if causal:
        tri = np.tril(np.ones((lq, lk), dtype=bool), k=lk - lq)[None, None]
        mask = tri if mask is None else (mask & tri)
    return mask


class MultiHeadAttention(Module):
    def __init__(self, d: int, n_heads: int, rng: np.random.Generator):
        super().__init__()
        self.n_heads = n_heads
        self.query = Linear(d, d, rng)
        self.key = Linear(d, d, rng, bias=False)
        self.value = Linear(d, d, rng)
        self.out = Linear(d, d, rng)

    def forward(self, x: Tensor, ctx: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        b, lq, d = x.shape
        if ctx.shape[0] != b or ctx.shape[2] != d:
            raise ShapeError(f"attention: query {x.shape} incompatible with context {ctx.shape}")
        lk = ctx.shape[1]
        h = self.n_heads
        dh = d // h
        q = ops.mul(self.query(x), dh ** -0.5).reshape(b, lq, h, dh).transpose(0, 2, 1, 3)
        k = self.key(ctx).reshape(b, lk, h, dh).transpose(0, 2, 3, 1)
        v = self.value(ctx).reshape(b, lk, h, dh).transpose(0, 2, 1, 3)
        weights = ops.softmax(ops.matmul(q, k), axis=-1, mask=mask)
        merged = ops.matmul(weights, v).transpose(0, 2, 1, 3).reshape(b, lq, d)
        return self.out(merged)


Hook = Callable[[Tensor], Tensor]


class EncoderBlock(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.attn_ln = LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.mlp_ln = LayerNorm(cfg.d_model)
        self.mlp = FeedForward(cfg.d_model, cfg.d_ff, rng)
        self.drop = Dropout(cfg.dropout)

    def forward(self, x: Tensor, mask: Optional[np.ndarray], rng=None, hooks: Optional[Dict[str, Hook]] = None) -> Tensor:
        hooks = hooks or {}
        if "beginning" in hooks:
            x = hooks["beginning"](x)
        h = self.attn_ln(x)
        x = x + self.drop(self.attn(h, h, mask), rng)
        if "after_self_attn" in hooks:
            x = hooks["after_self_attn"](x)
        x = x + self.drop(self.mlp(self.mlp_ln(x)), rng)
        if "after_mlp" in hooks:
            x = hooks["after_mlp"](x)
        return x


class DecoderBlock(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.attn_ln = LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.cross_ln = LayerNorm(cfg.d_model)
        self.cross = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.mlp_ln = LayerNorm(cfg.d_model)
        self.mlp = FeedForward(cfg.d_model, cfg.d_ff, rng)
        self.drop = Dropout(cfg.dropout)

    def forward(
        self,
        x: Tensor,
        audio: Tensor,
        self_mask: np.ndarray,
        cross_mask: Optional[np.ndarray],
        rng=None,
        hooks: Optional[Dict[str, Hook]] = None,
    ) -> Tensor:
        hooks = hooks or {}
        if "beginning" in hooks:
            x = hooks["beginning"](x)
        h = self.attn_ln(x)
        x = x + self.drop(self.attn(h, h, self_mask), rng)
        if "after_self_attn" in hooks:
            x = hooks["after_self_attn"](x)
        x = x + self.drop(self.cross(self.cross_ln(x), audio, cross_mask), rng)
        if "after_cross_attn" in hooks:
            x = hooks["after_cross_attn"](x)
        x = x + self.drop(self.mlp(self.mlp_ln(x)), rng)
        if "after_mlp" in hooks:
            x = hooks["after_mlp"](x)
        return x


class ConvFrontend(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        k = cfg.conv_kernel
        dt = get_dtype()
        self.conv1_w = Parameter(rng.normal(0, (k * cfg.mel_bins) ** -0.5, (k, cfg.mel_bins, cfg.d_model)).astype(dt))
        self.conv1_b = Parameter(np.zeros(cfg.d_model, dtype=dt))
        self.conv2_w = Parameter(rng.normal(0, (k * cfg.d_model) ** -0.5, (k, cfg.d_model, cfg.d_model)).astype(dt))
        self.conv2_b = Parameter(np.zeros(cfg.d_model, dtype=dt))
        self.strides = cfg.conv_strides
        self.pad = k // 2

    def forward(self, mel: Tensor, mask: np.ndarray):
        """mel [B, T, mel_bins] (raw log10 energies) -> features [B, ceil(T/2), d], frame mask."""
        if mel.shape[1] == 0:
            raise ShapeError("conv_frontend: empty spectrogram (T=0)")
        m = mask[:, :, None].astype(mel.dtype)
        x = ops.mul(ops.mul(ops.add(mel, MEL_OFFSET), 1.0 / MEL_SCALE), m)
        x = ops.gelu(ops.conv1d(x, self.conv1_w, self.conv1_b, stride=self.strides[0], padding=self.pad))
        # zero padded frames so conv2 sees the same boundary as an unpadded sequence
        x = ops.mul(x, m)
        x = ops.gelu(ops.conv1d(x, self.conv2_w, self.conv2_b, stride=self.strides[1], padding=self.pad))
        return x, mask[:, ::2]


class AudioEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.frontend = ConvFrontend(cfg, rng)
        self._buffers = {"positional": sinusoids(cfg.max_source_positions, cfg.d_model).astype(get_dtype())}
        self.blocks = [EncoderBlock(cfg, rng) for _ in range(cfg.n_enc_layers)]
        self.ln_post = LayerNorm(cfg.d_model)

    def embed(self, mel: Tensor, mask: np.ndarray):
        x, fmask = self.frontend(mel, mask)
        t = x.shape[1]
        if t > self.cfg.max_source_positions:
            raise ShapeError(
                f"encode: {t} feature frames exceed max_source_positions={self.cfg.max_source_positions}; "
                "segment the input into shorter chunks"
            )
        x = ops.add(x, Tensor(self._buffers["positional"][:t]))
        return x, fmask

    def run_blocks(self, x: Tensor, fmask: np.ndarray, rng=None, hooks=None) -> Tensor:
        mask = attention_mask(fmask, x.shape[1], x.shape[1], causal=False)
        for i, block in enumerate(self.blocks):
            x = block(x, mask, rng, (hooks or {}).get(i))
        return self.ln_post(x)


class TextDecoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.token_embedding = Embedding(cfg.vocab_size, cfg.d_model, rng)
        self.positional_embedding = Parameter(rng.normal(0, cfg.d_model ** -0.5, (cfg.max_target_positions, cfg.d_model)).astype(get_dtype()))
        self.blocks = [DecoderBlock(cfg, rng) for _ in range(cfg.n_dec_layers)]
        self.ln = LayerNorm(cfg.d_model)

    def forward(self, tokens: np.ndarray, audio: Tensor, audio_mask: Optional[np.ndarray], rng=None, hooks=None) -> Tensor:
        tokens = np.asarray(tokens)
        b, l = tokens.shape
        if l > self.cfg.max_target_positions:
            raise ShapeError(f"decode: {l} tokens exceed max_target_positions={self.cfg.max_target_positions}")
        x = ops.add(self.token_embedding(tokens), self.positional_embedding[:l])
        self_mask = attention_mask(None, l, l, causal=True)
        cross_mask = attention_mask(audio_mask, l, audio.shape[1], causal=False)
        for i, block in enumerate(self.blocks):
            x = block(x, audio, self_mask, cross_mask, rng, (hooks or {}).get(i))
        x = self.ln(x)
        return ops.matmul(x, ops.transpose(self.token_embedding.weight, (1, 0)))


class SpeechModel(Module):
    """Audio-only encoder-decoder."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = AudioEncoder(cfg, rng)
        self.decoder = TextDecoder(cfg, rng)
        self.rng = None

    # The fused models share this interface: encode_inputs -> memory, decode_memory -> logits.
    def encode(self, mel, mel_mask: Optional[np.ndarray] = None):
        """Encode a padded mel batch [B, T, 80] -> (features [B, ceil(T/2), d], feature mask)."""
        mel = mel if isinstance(mel, Tensor) else Tensor(mel)
        if mel.ndim == 2:
            mel = mel.reshape(1, *mel.shape)
        if mel_mask is None:
            mel_mask = np.ones(mel.shape[:2], dtype=bool)
        x, fmask = self.encoder.embed(mel, mel_mask)
        return self.encoder.run_blocks(x, fmask, self.rng), fmask

    def encode_inputs(self, batch) -> dict:
        feats, fmask = self.encode(batch["mel"], batch["mel_mask"])
        return {"audio": feats, "audio_mask": fmask}

    def decode_memory(self, tokens: np.ndarray, memory: dict) -> Tensor:
        return self.decoder(tokens, memory["audio"], memory["audio_mask"], self.rng)

    def forward(self, batch, tokens: np.ndarray) -> Tensor:
        return self.decode_memory(tokens, self.encode_inputs(batch))


def conv_frontend(model: SpeechModel, mel: np.ndarray) -> Tensor:
    """Apply the convolutional frontend to a single [T, mel_bins] spectrogram."""
    mel = np.asarray(mel)
    if mel.ndim != 2 or mel.shape[0] == 0:
        raise ShapeError(f"conv_frontend: expected non-empty [T, mel_bins], got {mel.shape}")
    x, _ = model.encoder.frontend(Tensor(mel[None]), np.ones((1, mel.shape[0]), dtype=bool))
    return x[0]


def decode_teacher_forcing(model, memory: dict, target: np.ndarray) -> Tensor:
    """Logits for ``target[1:]`` given ``target[:-1]`` (shape [B, L-1, V] or [L-1, V]).

    ``logits[i]`` scores ``target[i + 1]`` and depends only on ``target[: i + 1]``.
    """
    target = np.asarray(target)
    squeeze = target.ndim == 1
    if squeeze:
        target = target[None]
    logits = model.decode_memory(target[:, :-1], memory)
    return logits[0] if squeeze else logits
