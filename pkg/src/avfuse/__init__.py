"""Gated cross-attention audio-visual fusion for a small encoder-decoder speech model."""

__version__ = "0.1.0"
