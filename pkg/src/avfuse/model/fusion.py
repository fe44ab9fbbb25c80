"""Audio-visual fusion on top of a trained :class:`SpeechModel`.

Three ways of injecting per-frame visual features:

* gated cross-attention: a residual cross-attention + feed-forward layer whose
  two branches are scaled by ``tanh`` of scalar gates that start at zero, so a
  freshly inserted layer is the identity and the frozen base is untouched;
* early fusion: visual features duplicated to the audio frame rate and added
  to the encoder input;
* late fusion: an MLP over concatenated encoder outputs and duplicated visual
  features, added residually to the audio features.
"""

from __future__ import annotations

import copy
from enum import Enum
from typing import Dict, Optional

import numpy as np

from ..autodiff import FeedForward, LayerNorm, Linear, Module, Parameter, Tensor, ops
from ..autodiff.tensor import ShapeError, get_dtype
from .transformer import MultiHeadAttention, SpeechModel, attention_mask


class FusionMode(str, Enum):
    AUDIO_ONLY = "AudioOnly"
    EARLY = "EarlyFusion"
    LATE = "LateFusion"
    GATED = "GatedXAttn"


class InsertionPosition(str, Enum):
    DECODER_BEGINNING = "DecoderBeginning"
    DECODER_AFTER_SELF_ATTN = "DecoderAfterSelfAttn"
    DECODER_AFTER_CROSS_ATTN = "DecoderAfterCrossAttn"
    DECODER_AFTER_MLP = "DecoderAfterMLP"
    ENCODER_BEGINNING = "EncoderBeginning"
    ENCODER_AFTER_SELF_ATTN = "EncoderAfterSelfAttn"
    ENCODER_AFTER_MLP = "EncoderAfterMLP"

    @property
    def stack(self) -> str:
        return "encoder" if self.value.startswith("Encoder") else "decoder"

    @property
    def point(self) -> str:
        return {
            "Beginning": "beginning",
            "AfterSelfAttn": "after_self_attn",
            "AfterCrossAttn": "after_cross_attn",
            "AfterMLP": "after_mlp",
        }[self.value[len(self.stack):]]


class GatedXAttnLayer(Module):
    """y = x' + tanh(a_mlp) * FFW(LN(x')),  x' = x + tanh(a_xattn) * Attn(LN(x), v)."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int, rng: np.random.Generator):
        super().__init__()
        dt = get_dtype()
        self.alpha_xattn = Parameter(np.zeros((), dtype=dt))
        self.alpha_mlp = Parameter(np.zeros((), dtype=dt))
        self.attn_ln = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads, rng)
        self.mlp_ln = LayerNorm(d_model)
        self.ffw = FeedForward(d_model, d_ff, rng)

    def forward(self, x: Tensor, v: Tensor, v_mask: Optional[np.ndarray] = None) -> Tensor:
        if x.shape[-1] != v.shape[-1]:
            raise ShapeError(f"gated_xattn: query width {x.shape[-1]} != visual width {v.shape[-1]}")
        squeeze = x.ndim == 2
        if squeeze:
            x, v = x.reshape(1, *x.shape), v.reshape(1, *v.shape)
        # no causal mask: every text position sees every video frame
        mask = attention_mask(v_mask, x.shape[1], v.shape[1], causal=False)
        x = x + ops.mul(ops.tanh(self.alpha_xattn), self.attn(self.attn_ln(x), v, mask))
        y = x + ops.mul(ops.tanh(self.alpha_mlp), self.ffw(self.mlp_ln(x)))
        return y[0] if squeeze else y


def duplication_index(t_audio: int, t_video: int) -> np.ndarray:
    """Map each 50 Hz audio frame to the 25 Hz video frame it overlaps."""
    if t_audio not in (2 * t_video, 2 * t_video - 1):
        raise ShapeError(
            f"rate mismatch: {t_audio} audio frames cannot pair with {t_video} video frames "
            f"(need {2 * t_video} or {2 * t_video - 1})"
        )
    return np.arange(t_audio) // 2


def _duplicate(video: Tensor, t_audio: int, audio_lens=None, video_lens=None) -> Tensor:
    if audio_lens is not None:
        for ta, tv in zip(audio_lens, video_lens):
            duplication_index(int(ta), int(tv))
        idx = np.minimum(np.arange(t_audio) // 2, video.shape[1] - 1)
    else:
        idx = duplication_index(t_audio, video.shape[1])
    return video[:, idx]


def early_fuse(audio_feats: Tensor, video_feats: Tensor, audio_lens=None, video_lens=None) -> Tensor:
    """output[t] = audio[t] + video[t // 2]; accepts [T, d] or padded [B, T, d]."""
    squeeze = audio_feats.ndim == 2
    if squeeze:
        audio_feats, video_feats = audio_feats.reshape(1, *audio_feats.shape), video_feats.reshape(1, *video_feats.shape)
    out = audio_feats + _duplicate(video_feats, audio_feats.shape[1], audio_lens, video_lens)
    return out[0] if squeeze else out


class LateFusionMLP(Module):
    """audio + MLP([audio; video_dup]) with a zero-initialised output layer."""

    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator):
        super().__init__()
        self.mlp = FeedForward(d_model, d_ff, rng, zero_out=True, d_in=2 * d_model)

    def forward(self, audio_feats: Tensor, video_feats: Tensor, audio_lens=None, video_lens=None) -> Tensor:
        squeeze = audio_feats.ndim == 2
        if squeeze:
            audio_feats, video_feats = audio_feats.reshape(1, *audio_feats.shape), video_feats.reshape(1, *video_feats.shape)
        dup = _duplicate(video_feats, audio_feats.shape[1], audio_lens, video_lens)
        out = audio_feats + self.mlp(ops.concat([audio_feats, dup], axis=-1))
        return out[0] if squeeze else out


class FusedModel(Module):
    """A base speech model plus a visual projection and one fusion mechanism.

    Batches carry either precomputed ``video_feats`` [B, T_v, d_visual] or raw
    ``video`` frames when a visual encoder is attached.
    """

    def __init__(
        self,
        base: SpeechModel,
        mode: FusionMode,
        position: InsertionPosition = InsertionPosition.DECODER_BEGINNING,
        d_visual: Optional[int] = None,
        visual_encoder: Optional[Module] = None,
        seed: int = 0,
    ):
        super().__init__()
        cfg = base.cfg
        rng = np.random.default_rng(seed + 7919)
        self.mode = FusionMode(mode)
        self.position = InsertionPosition(position)
        self.base = base
        self.visual_encoder = visual_encoder
        self.d_visual = d_visual or cfg.d_model
        self.visual_proj = None
        self.gated = []
        self.late = None
        if self.mode is FusionMode.AUDIO_ONLY:
            return
        self.visual_proj = Linear(self.d_visual, cfg.d_model, rng)
        if self.mode is FusionMode.GATED:
            n = cfg.n_enc_layers if self.position.stack == "encoder" else cfg.n_dec_layers
            self.gated = [GatedXAttnLayer(cfg.d_model, cfg.n_heads, cfg.d_ff, rng) for _ in range(n)]
        elif self.mode is FusionMode.LATE:
            self.late = LateFusionMLP(cfg.d_model, cfg.d_ff, rng)

    @property
    def cfg(self):
        return self.base.cfg

    @property
    def rng(self):
        return self.base.rng

    @rng.setter
    def rng(self, value):
        self.base.rng = value

    def new_parameter_names(self) -> set:
        names = {n for n, _ in self.named_parameters() if n.startswith(("gated.", "visual_proj.", "late."))}
        return names

    def visual_features(self, batch) -> tuple:
        if "video_feats" in batch and batch["video_feats"] is not None:
            feats = batch["video_feats"]
            feats = feats if isinstance(feats, Tensor) else Tensor(feats)
        elif self.visual_encoder is not None and batch.get("video") is not None:
            feats = self.visual_encoder.encode_batch(batch["video"], batch["video_mask"], self.rng)
        else:
            raise ValueError("audio-visual batch is missing video features")
        mask = batch.get("video_mask")
        if mask is None:
            mask = np.ones(feats.shape[:2], dtype=bool)
        return self.visual_proj(feats), mask

    def encode_inputs(self, batch) -> dict:
        base = self.base
        if self.mode is FusionMode.AUDIO_ONLY:
            return base.encode_inputs(batch)
        v, vmask = self.visual_features(batch)
        mel = batch["mel"] if isinstance(batch["mel"], Tensor) else Tensor(batch["mel"])
        x, fmask = base.encoder.embed(mel, batch["mel_mask"])
        alens, vlens = fmask.sum(axis=1), vmask.sum(axis=1)
        hooks = None
        if self.mode is FusionMode.EARLY:
            x = early_fuse(x, v, alens, vlens)
        elif self.mode is FusionMode.GATED and self.position.stack == "encoder":
            hooks = {i: {self.position.point: self._hook(g, v, vmask)} for i, g in enumerate(self.gated)}
        feats = base.encoder.run_blocks(x, fmask, self.rng, hooks)
        if self.mode is FusionMode.LATE:
            feats = self.late(feats, v, alens, vlens)
        return {"audio": feats, "audio_mask": fmask, "video": v, "video_mask": vmask}

    @staticmethod
    def _hook(layer: GatedXAttnLayer, v: Tensor, vmask):
        return lambda x: layer(x, v, vmask)

    def decode_memory(self, tokens: np.ndarray, memory: dict) -> Tensor:
        hooks = None
        if self.mode is FusionMode.GATED and self.position.stack == "decoder":
            v, vmask = memory["video"], memory["video_mask"]
            hooks = {i: {self.position.point: self._hook(g, v, vmask)} for i, g in enumerate(self.gated)}
        return self.base.decoder(tokens, memory["audio"], memory["audio_mask"], self.rng, hooks)

    def forward(self, batch, tokens: np.ndarray) -> Tensor:
        return self.decode_memory(tokens, self.encode_inputs(batch))

    def gate_values(self) -> Dict[str, float]:
        return {f"gated.{i}": (float(np.tanh(g.alpha_xattn.data)), float(np.tanh(g.alpha_mlp.data)))
                for i, g in enumerate(self.gated)}


def wrap_model(
    base: SpeechModel,
    mode=FusionMode.GATED,
    position=InsertionPosition.DECODER_BEGINNING,
    d_visual: Optional[int] = None,
    visual_encoder: Optional[Module] = None,
    seed: int = 0,
) -> FusedModel:
    """Attach a fusion mechanism to a copy of ``base``.

    Gated mode freezes every base parameter so that only the gated layers and
    the visual projection train; early/late fusion leave the base trainable.
    """
    mode, position = FusionMode(mode), InsertionPosition(position)
    if mode is FusionMode.GATED and position.stack == "encoder" and base.cfg.n_enc_layers == 0:
        raise ValueError(f"{position.value} requires encoder blocks but the base model has none")
    base = copy.deepcopy(base)
    if mode is FusionMode.GATED:
        base.freeze()
    else:
        base.unfreeze()
    if visual_encoder is not None:
        visual_encoder.freeze()
    return FusedModel(base, mode, position, d_visual, visual_encoder, seed)


def strip_gates(fused: FusedModel) -> SpeechModel:
    """Drop the gated layers and visual projection, returning the audio-only model."""
    if fused.mode is not FusionMode.GATED:
        raise ValueError(f"cannot strip a {fused.mode.value} model: its base weights were fine-tuned")
    base = copy.deepcopy(fused.base)
    base.unfreeze()
    return base
