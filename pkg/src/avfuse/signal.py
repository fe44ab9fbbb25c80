"""Waveform features and noise augmentation.

All waveforms are float64 arrays at 16 kHz. Randomness always comes from an
explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Sequence

import numpy as np
from scipy import signal as sps

SAMPLE_RATE = 16000
WIN_LENGTH = 400  # 25 ms
HOP_LENGTH = 160  # 10 ms
N_MELS = 80
LOG_FLOOR = 1e-10
NOISE_KINDS = ("babble", "speech", "music-like", "natural-like")


def n_frames(n_samples: int) -> int:
    if n_samples < WIN_LENGTH:
        raise ValueError(f"waveform has {n_samples} samples; at least {WIN_LENGTH} required")
    return (n_samples - WIN_LENGTH) // HOP_LENGTH + 1


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=4)
def mel_filterbank(n_mels: int = N_MELS, n_fft: int = WIN_LENGTH, sr: int = SAMPLE_RATE,
                   fmin: float = 0.0, fmax: float = 8000.0) -> np.ndarray:
    """Triangular filters [n_mels, n_fft//2 + 1] with unit peaks on the mel scale."""
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sr)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


def power_spectrogram(w: np.ndarray) -> np.ndarray:
    """Hann-windowed |STFT|^2 frames [n_frames, 201] without centre padding."""
    w = np.asarray(w, dtype=np.float64)
    n = n_frames(len(w))
    idx = np.arange(WIN_LENGTH)[None, :] + HOP_LENGTH * np.arange(n)[:, None]
    frames = w[idx] * np.hanning(WIN_LENGTH + 1)[:-1]
    spec = np.fft.rfft(frames, axis=1)
    return spec.real ** 2 + spec.imag ** 2


def log_mel(w: np.ndarray) -> np.ndarray:
    """80-bin log10 mel energies [frames, 80]; 25 ms window, 10 ms hop, floor 1e-10."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or not np.isfinite(w).all():
        raise ValueError("log_mel expects a finite 1-D waveform")
    mel = power_spectrogram(w) @ mel_filterbank().T
    return np.log10(np.maximum(mel, LOG_FLOOR))


def power(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x * x))


def fit_noise(noise: np.ndarray, n: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Tile and/or crop ``noise`` to exactly ``n`` samples (random offset when ``rng`` given)."""
    noise = np.asarray(noise, dtype=np.float64)
    if len(noise) == 0:
        raise ValueError("empty noise waveform")
    if len(noise) < n:
        noise = np.tile(noise, n // len(noise) + 1)
    start = 0 if rng is None or len(noise) == n else int(rng.integers(0, len(noise) - n + 1))
    return noise[start:start + n]


def noise_gain(signal: np.ndarray, noise: np.ndarray, snr_db: float) -> float:
    """Scale g such that P(signal) / P(g * noise) = 10^(snr_db / 10) over the overlap."""
    n = len(signal)
    p_sig = power(signal)
    p_noise = power(noise[:n])
    if p_sig <= 0:
        raise ValueError("signal has zero power")
    if p_noise <= 0:
        raise ValueError(f"noise has zero power; cannot mix at finite SNR {snr_db} dB")
    return float(np.sqrt(p_sig / (p_noise * 10.0 ** (snr_db / 10.0))))


def mix_components(signal: np.ndarray, noise: np.ndarray, snr_db: float):
    """Return (signal, scaled noise) whose sum is the mixture at ``snr_db``."""
    signal = np.asarray(signal, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if len(noise) < len(signal):
        raise ValueError(f"noise ({len(noise)} samples) shorter than signal ({len(signal)}); call fit_noise first")
    if np.isposinf(snr_db):
        return signal, np.zeros_like(signal)
    if not np.isfinite(snr_db):
        raise ValueError(f"invalid SNR {snr_db}")
    g = noise_gain(signal, noise, snr_db)
    return signal, g * noise[: len(signal)]


def mix_at_snr(signal: np.ndarray, noise: np.ndarray, snr_db: float) -> np.ndarray:
    """signal + g * noise at the requested SNR; +inf returns the signal unchanged."""
    if np.isposinf(snr_db):
        return np.array(signal, dtype=np.float64, copy=True)
    s, scaled = mix_components(signal, noise, snr_db)
    return s + scaled


def measured_snr(signal: np.ndarray, scaled_noise: np.ndarray) -> float:
    return float(10.0 * np.log10(power(signal) / power(scaled_noise)))


def synth_babble(speakers: Sequence[np.ndarray], k: int, rng: Optional[np.random.Generator] = None,
                 length: Optional[int] = None) -> np.ndarray:
    """Sum ``k`` speaker tracks (chosen by ``rng`` when more are available) at unit RMS."""
    if k < 2:
        raise ValueError("babble needs at least two speakers")
    if k > len(speakers):
        raise ValueError(f"requested {k} speakers but only {len(speakers)} sources are available")
    chosen = list(range(len(speakers)))
    if rng is not None and k < len(speakers):
        chosen = sorted(rng.choice(len(speakers), size=k, replace=False).tolist())
    chosen = chosen[:k]
    n = length or max(len(speakers[i]) for i in chosen)
    total = np.zeros(n)
    for i in chosen:
        total += fit_noise(speakers[i], n)
    rms = np.sqrt(power(total))
    if rms == 0:
        raise ValueError("babble sources sum to silence")
    return total / rms


def music_like(n: int, rng: np.random.Generator) -> np.ndarray:
    """Three harmonic tones with random slow amplitude envelopes."""
    t = np.arange(n) / SAMPLE_RATE
    out = np.zeros(n)
    for _ in range(3):
        f0 = rng.uniform(110, 440)
        env = 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(0.3, 3.0) * t + rng.uniform(0, 2 * np.pi))
        tone = sum((0.6 ** h) * np.sin(2 * np.pi * f0 * (h + 1) * t + rng.uniform(0, 2 * np.pi)) for h in range(4))
        out += env * tone
    return out / np.sqrt(power(out))


def natural_like(n: int, rng: np.random.Generator) -> np.ndarray:
    """Low-passed, slowly modulated coloured noise (wind/rain-like)."""
    white = rng.normal(size=n)
    b, a = sps.butter(2, rng.uniform(800, 3000) / (SAMPLE_RATE / 2), btype="low")
    coloured = sps.lfilter(b, a, white)
    t = np.arange(n) / SAMPLE_RATE
    coloured *= 0.7 + 0.3 * np.sin(2 * np.pi * rng.uniform(0.1, 1.0) * t)
    return coloured / np.sqrt(power(coloured))


@dataclass(frozen=True)
class NoiseSpec:
    kind: str
    snr_db: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}; expected one of {NOISE_KINDS}")
        if np.isnan(self.snr_db) or np.isneginf(self.snr_db):
            raise ValueError(f"invalid SNR {self.snr_db}")

    @property
    def clean(self) -> bool:
        return np.isposinf(self.snr_db)


@dataclass
class SpecAugmentPolicy:
    freq_width: int = 27
    n_freq_masks: int = 1
    time_width: int = 100
    n_time_masks: int = 1
    time_cap: float = 1.0


def spec_augment(mel: np.ndarray, policy: SpecAugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Zero random frequency bands and time spans of a [frames, bins] spectrogram."""
    out = np.array(mel, copy=True)
    frames, bins = out.shape
    for _ in range(policy.n_freq_masks):
        f = int(rng.integers(0, min(policy.freq_width, bins) + 1))
        f0 = int(rng.integers(0, bins - f + 1))
        out[:, f0:f0 + f] = 0.0
    tmax = min(policy.time_width, int(policy.time_cap * frames))
    for _ in range(policy.n_time_masks):
        t = int(rng.integers(0, max(tmax, 0) + 1))
        t0 = int(rng.integers(0, frames - t + 1))
        out[t0:t0 + t, :] = 0.0
    return out


def write_wav(path, w: np.ndarray, sr: int = SAMPLE_RATE) -> None:
    pcm = np.clip(np.round(np.asarray(w) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(sr)
        f.writeframes(pcm.tobytes())


def read_wav(path) -> np.ndarray:
    with wave.open(str(path), "rb") as f:
        if f.getsampwidth() != 2 or f.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono 16-bit PCM")
        if f.getframerate() != SAMPLE_RATE:
            raise ValueError(f"{path}: sample rate {f.getframerate()} != {SAMPLE_RATE}")
        raw = f.readframes(f.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
