"""Synthetic lip-surrogate video, crop/flip augmentation, and the visual encoder.

Each token is drawn as a fixed 6x6 block glyph on a 96x96 grayscale frame at
25 fps. The visual encoder is a small patch-conv + batch-norm stem followed by
a two-layer temporal transformer; it is pretrained on per-frame glyph
classification and then frozen, with dropout and batch-norm statistics left
live in training mode.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .autodiff import BatchNorm1d, Dropout, LayerNorm, Linear, Module, Parameter, Tensor, ops
from .autodiff.tensor import ShapeError, get_dtype
from .model.transformer import EncoderBlock, ModelConfig, attention_mask, sinusoids

FPS = 25
FRAME_SIZE = 96
CROP_SIZE = 88
PATCH = 8
GLYPH_CELLS = 6
CELL_PX = 12


def n_video_frames(duration_s: float) -> int:
    return int(np.ceil(round(duration_s * FPS, 9)))


def make_glyphs(n_tokens: int, rng: np.random.Generator) -> np.ndarray:
    """Distinct 6x6 binary codes, also distinct from each other's mirror images."""
    codes = []
    while len(codes) < n_tokens:
        c = rng.random((GLYPH_CELLS, GLYPH_CELLS)) < 0.5
        ok = all(
            np.sum(c != o) >= 8 and np.sum(c[:, ::-1] != o) >= 8 for o in codes
        ) and np.sum(c != c[:, ::-1]) >= 4
        if ok:
            codes.append(c)
    return np.stack(codes)


def render_frames(tokens, glyphs: np.ndarray, frames_per_token: int, rng: np.random.Generator,
                  noise: float = 0.05) -> np.ndarray:
    """[T, 96, 96] frames in [0, 1]; a token's glyph is shown for its frames."""
    pad = (FRAME_SIZE - GLYPH_CELLS * CELL_PX) // 2
    out = []
    for tok in tokens:
        img = np.kron(glyphs[tok].astype(np.float64), np.ones((CELL_PX, CELL_PX)))
        for j in range(frames_per_token):
            level = 0.65 + 0.25 * np.sin(np.pi * (j + 0.5) / frames_per_token)
            frame = np.full((FRAME_SIZE, FRAME_SIZE), 0.2)
            frame[pad:pad + img.shape[0], pad:pad + img.shape[1]] += level * img
            out.append(frame)
    frames = np.stack(out) + rng.normal(0.0, noise, (len(out), FRAME_SIZE, FRAME_SIZE))
    return np.clip(frames, 0.0, 1.0)


@dataclass
class CropFlipAug:
    crop: int = CROP_SIZE
    flip_prob: float = 0.5
    mode: str = "train"


def crop_params(frame_shape, aug: CropFlipAug, rng: Optional[np.random.Generator]):
    h, w = frame_shape
    if h < aug.crop or w < aug.crop:
        raise ShapeError(f"frame {h}x{w} smaller than crop {aug.crop}")
    if aug.mode == "test":
        return (h - aug.crop) // 2, (w - aug.crop) // 2, False
    if rng is None:
        raise ValueError("train-mode augmentation needs an RNG")
    oy = int(rng.integers(0, h - aug.crop + 1))
    ox = int(rng.integers(0, w - aug.crop + 1))
    return oy, ox, bool(rng.random() < aug.flip_prob)


def augment(clip: np.ndarray, aug: CropFlipAug, rng: Optional[np.random.Generator] = None,
            force_flip: Optional[bool] = None) -> np.ndarray:
    """Crop (and maybe flip) every frame of a clip with one shared offset/flip decision."""
    clip = np.asarray(clip)
    oy, ox, flip = crop_params(clip.shape[1:], aug, rng)
    if force_flip is not None:
        flip = force_flip
    out = clip[:, oy:oy + aug.crop, ox:ox + aug.crop]
    return out[:, :, ::-1].copy() if flip else out.copy()


def hflip(clip: np.ndarray) -> np.ndarray:
    return np.asarray(clip)[:, :, ::-1].copy()


def write_clip(path, clip: np.ndarray) -> None:
    clip = np.asarray(clip)
    t, h, w = clip.shape
    body = np.clip(np.round(clip * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack("<III", t, h, w))
        f.write(body.tobytes())


def read_clip(path) -> np.ndarray:
    with open(path, "rb") as f:
        t, h, w = struct.unpack("<III", f.read(12))
        body = np.frombuffer(f.read(t * h * w), dtype=np.uint8)
    if body.size != t * h * w:
        raise ValueError(f"{path}: truncated clip")
    return body.reshape(t, h, w).astype(np.float64) / 255.0


@dataclass
class VisualEncoderConfig:
    d_visual: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    stem_channels: int = 4
    dropout: float = 0.1
    max_frames: int = 256
    temporal_kernel: int = 9  # frames seen by the stem's temporal conv; 0 disables it


class VisualEncoder(Module):
    """Patch-conv stem -> batchnorm1d -> projection -> temporal conv -> temporal transformer."""

    def __init__(self, cfg: VisualEncoderConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        n_patches = (CROP_SIZE // PATCH) ** 2
        self.patch = Linear(PATCH * PATCH, cfg.stem_channels, rng)
        self.stem_bn = BatchNorm1d(n_patches * cfg.stem_channels)
        self.stem_proj = Linear(n_patches * cfg.stem_channels, cfg.d_visual, rng)
        self.stem_drop = Dropout(cfg.dropout)
        if cfg.temporal_kernel:
            if cfg.temporal_kernel % 2 == 0:
                raise ValueError("temporal_kernel must be odd")
            k = cfg.temporal_kernel
            self.tconv_w = Parameter(rng.normal(0, 1 / np.sqrt(k * cfg.d_visual), (k, cfg.d_visual, cfg.d_visual))
                                     .astype(get_dtype()))
            self.tconv_b = Parameter(np.zeros(cfg.d_visual, dtype=get_dtype()))
        tcfg = ModelConfig(d_model=cfg.d_visual, n_heads=cfg.n_heads, n_enc_layers=cfg.n_layers, n_dec_layers=0,
                           d_ff=cfg.d_ff, vocab_size=16, dropout=cfg.dropout)
        self.blocks = [EncoderBlock(tcfg, rng) for _ in range(cfg.n_layers)]
        self.ln_post = LayerNorm(cfg.d_visual)
        self._pos = sinusoids(cfg.max_frames, cfg.d_visual).astype(get_dtype())

    def stem(self, frames: np.ndarray, valid: Optional[np.ndarray], rng) -> Tensor:
        """frames [N, 88, 88] -> [N, d_visual]; batch statistics use only ``valid`` rows."""
        n = frames.shape[0]
        g = CROP_SIZE // PATCH
        patches = frames.reshape(n, g, PATCH, g, PATCH).transpose(0, 1, 3, 2, 4).reshape(n, g * g, PATCH * PATCH)
        x = ops.gelu(self.patch(Tensor(patches))).reshape(n, -1)
        if valid is None or valid.all():
            x = self.stem_bn(x)
        else:
            rows = np.flatnonzero(valid)
            normed = self.stem_bn(x[rows])
            # padded rows map onto a trailing zero row
            where = np.full(n, len(rows))
            where[rows] = np.arange(len(rows))
            x = ops.concat([normed, Tensor(np.zeros((1, x.shape[1]), dtype=x.dtype))], axis=0)[where]
        x = ops.gelu(self.stem_proj(x))
        return self.stem_drop(x, rng)

    def encode_batch(self, clips: np.ndarray, mask: Optional[np.ndarray] = None, rng=None) -> Tensor:
        """clips [B, T, 88, 88] -> features [B, T, d_visual]."""
        clips = np.asarray(clips)
        b, t = clips.shape[:2]
        if t == 0:
            raise ShapeError("encode_video: empty clip")
        if clips.shape[2:] != (CROP_SIZE, CROP_SIZE):
            raise ShapeError(f"encode_video: expected {CROP_SIZE}x{CROP_SIZE} frames, got {clips.shape[2:]}")
        if mask is None:
            mask = np.ones((b, t), dtype=bool)
        x = self.stem(clips.reshape(b * t, CROP_SIZE, CROP_SIZE).astype(get_dtype()), mask.reshape(-1), rng)
        x = x.reshape(b, t, self.cfg.d_visual)
        if self.cfg.temporal_kernel:
            # residual temporal conv, like the 3D-conv front end of lip-reading encoders
            if not mask.all():
                x = ops.mul(x, Tensor(mask[:, :, None].astype(x.dtype)))
            ctx = ops.conv1d(x, self.tconv_w, self.tconv_b, padding=self.cfg.temporal_kernel // 2)
            x = x + ops.gelu(ctx)
        x = ops.add(x, Tensor(self._pos[:t]))
        amask = attention_mask(mask, t, t, causal=False)
        for block in self.blocks:
            x = block(x, amask, rng)
        return self.ln_post(x)

    def forward(self, clip: np.ndarray, rng=None) -> Tensor:
        return self.encode_batch(np.asarray(clip)[None], None, rng)[0]


def encode_video(enc: VisualEncoder, clip: np.ndarray, rng=None) -> np.ndarray:
    """VisualFeatures [T, d_visual] for one augmented clip."""
    return enc(clip, rng).data


def freeze_with_live_stats(enc: VisualEncoder) -> VisualEncoder:
    """Mark all weights non-trainable; batch-norm statistics and dropout stay live in train mode."""
    enc.freeze()
    return enc


def weight_hash(enc: Module) -> str:
    return enc.param_hash()


class GlyphClassifier(Module):
    """Pretext head: per-frame token classification on top of the visual encoder.

    One linear head per offset in ``context`` predicts the token ``offset``
    positions away from the frame's own token (class ``n_tokens`` marks "past
    the edge"). Neighbour targets make the frozen features carry sequence
    context, the role a lip-reading fine-tune plays for a real visual encoder.
    """

    def __init__(self, enc: VisualEncoder, n_tokens: int, seed: int = 0, context=(0,)):
        super().__init__()
        self.encoder = enc
        self.context = tuple(context)
        rng = np.random.default_rng(seed + 1)
        self.heads = [Linear(enc.cfg.d_visual, n_tokens + 1, rng) for _ in self.context]

    def forward(self, clips, mask, rng=None) -> List[Tensor]:
        feats = self.encoder.encode_batch(clips, mask, rng)
        return [h(feats) for h in self.heads]
