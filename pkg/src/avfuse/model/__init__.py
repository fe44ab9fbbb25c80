"""Speech transformer, fusion layers, and checkpoint container."""

from .checkpoint import file_hash, load_checkpoint, save_checkpoint
from .fusion import (
    FusedModel,
    FusionMode,
    GatedXAttnLayer,
    InsertionPosition,
    LateFusionMLP,
    duplication_index,
    early_fuse,
    strip_gates,
    wrap_model,
)
from .transformer import ModelConfig, SpeechModel, conv_frontend, decode_teacher_forcing

__all__ = [
    "ModelConfig", "SpeechModel", "conv_frontend", "decode_teacher_forcing",
    "FusedModel", "FusionMode", "GatedXAttnLayer", "InsertionPosition", "LateFusionMLP",
    "duplication_index", "early_fuse", "strip_gates", "wrap_model",
    "save_checkpoint", "load_checkpoint", "file_hash",
]
