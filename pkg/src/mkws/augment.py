"""Training-time augmentation: time shifts, background noise, spectrogram masking."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from mkws.audio import AudioBuffer, FrontendConfig, Spectrogram, load_audio, log_mel_frames, rms
from mkws.errors import AugmentError


@dataclass(frozen=True)
class AugmentConfig:
    max_shift_ms: float = 100.0
    # cap on noise-RMS / signal-RMS; the realized ratio is drawn from U[0, noise_level]
    noise_level: float = 0.10
    noise_prob: float = 0.8
    spec_time_masks: int = 2
    spec_time_mask_max_frames: int = 7
    spec_freq_masks: int = 2
    spec_freq_mask_max_bins: int = 5
    seed: int = 0

    def __post_init__(self):
        for name in ("max_shift_ms", "noise_level", "noise_prob", "spec_time_masks",
                     "spec_time_mask_max_frames", "spec_freq_masks", "spec_freq_mask_max_bins"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.noise_prob > 1:
            raise ValueError("noise_prob must be <= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def time_shift(buffer: AudioBuffer, shift_ms: float, max_shift_ms: float = 100.0) -> AudioBuffer:
    """Move content by ``shift_ms`` (positive = later), zero-filling the gap."""
    if abs(shift_ms) > max_shift_ms:
        raise AugmentError(f"shift {shift_ms} ms exceeds bound of {max_shift_ms} ms")
    n = int(round(shift_ms * buffer.sample_rate / 1000))
    x = buffer.samples
    out = np.zeros_like(x)
    if n == 0:
        out[:] = x
    elif abs(n) < len(x):
        if n > 0:
            out[n:] = x[:-n]
        else:
            out[:n] = x[-n:]
    return AudioBuffer(out, buffer.sample_rate)


def noise_crop(noise: AudioBuffer, length: int, rng: np.random.Generator) -> np.ndarray:
    """Random ``length``-sample crop of ``noise``, wrapping around when it is short."""
    start = int(rng.integers(0, len(noise)))
    idx = (start + np.arange(length)) % len(noise)
    return noise.samples[idx]


def mix_noise(
    signal: AudioBuffer,
    noise: AudioBuffer,
    level: float,
    seed=None,
    u: float | None = None,
) -> AudioBuffer:
    """Add a random noise crop scaled to ``u * level`` times the signal RMS.

    ``u`` is drawn from U[0, 1] unless given. Output is clipped to [-1, 1].
    """
    if level < 0:
        raise AugmentError("noise level must be >= 0")
    if level == 0:
        return AudioBuffer(signal.samples.copy(), signal.sample_rate)
    if not np.any(noise.samples):
        raise AugmentError("noise buffer is all zeros")
    rng = _rng(seed)
    crop = noise_crop(noise, len(signal), rng).astype(np.float64)
    if u is None:
        u = float(rng.uniform(0.0, 1.0))
    sig_rms, crop_rms = rms(signal.samples), rms(crop)
    gain = 0.0 if sig_rms == 0.0 or crop_rms == 0.0 else u * level * sig_rms / crop_rms
    out = np.clip(signal.samples + gain * crop, -1.0, 1.0)
    return AudioBuffer(out.astype(np.float32), signal.sample_rate)


def mask_spectrogram(values: np.ndarray, time_bands, freq_bands, fill: float) -> np.ndarray:
    """Return a copy with each ``(start, width)`` frame/bin band set to ``fill``."""
    out = np.array(values, copy=True)
    for t0, w in time_bands:
        out[t0 : t0 + w, :] = fill
    for f0, w in freq_bands:
        out[:, f0 : f0 + w] = fill
    return out


def draw_mask_bands(num_masks: int, max_width: int, extent: int, rng) -> list[tuple[int, int]]:
    bands = []
    for _ in range(num_masks):
        w = int(rng.integers(0, max_width + 1))
        w = min(w, extent - 1)
        bands.append((int(rng.integers(0, extent - w + 1)), w))
    return bands


def spec_augment(spec, cfg: AugmentConfig, seed=None):
    """SpecAugment-style time and frequency masking, filled with the spectrogram mean.

    Accepts a :class:`Spectrogram` or a bare (T, F) array and returns the same kind.
    """
    values = spec.values if isinstance(spec, Spectrogram) else np.asarray(spec)
    t, f = values.shape
    if cfg.spec_time_masks and cfg.spec_time_mask_max_frames >= t:
        raise AugmentError(f"time mask extent {cfg.spec_time_mask_max_frames} >= {t} frames")
    if cfg.spec_freq_masks and cfg.spec_freq_mask_max_bins >= f:
        raise AugmentError(f"frequency mask extent {cfg.spec_freq_mask_max_bins} >= {f} bins")
    rng = _rng(cfg.seed if seed is None else seed)
    time_bands = draw_mask_bands(cfg.spec_time_masks, cfg.spec_time_mask_max_frames, t, rng)
    freq_bands = draw_mask_bands(cfg.spec_freq_masks, cfg.spec_freq_mask_max_bins, f, rng)
    fill = float(values.mean(dtype=np.float64))
    out = mask_spectrogram(values, time_bands, freq_bands, fill)
    if isinstance(spec, Spectrogram):
        return Spectrogram(out, spec.frame_hop_ms, spec.source_start_s, spec.source_num_samples)
    return out


def augment_waveform(
    buffer: AudioBuffer,
    noise: Sequence[AudioBuffer],
    cfg: AugmentConfig,
    rng: np.random.Generator,
) -> AudioBuffer:
    """Random time shift followed (with probability ``noise_prob``) by noise mixing."""
    shift = float(rng.uniform(-cfg.max_shift_ms, cfg.max_shift_ms))
    out = time_shift(buffer, shift, cfg.max_shift_ms)
    if noise and cfg.noise_level > 0 and rng.uniform() < cfg.noise_prob:
        bg = noise[int(rng.integers(0, len(noise)))]
        out = mix_noise(out, bg, cfg.noise_level, rng)
    return out


def augment_to_spectrogram(
    buffer: AudioBuffer,
    noise: Sequence[AudioBuffer],
    cfg: AugmentConfig,
    rng: np.random.Generator,
    frontend: FrontendConfig,
) -> np.ndarray:
    """Full keyword-sample pipeline: waveform augmentation, log-mel, masking."""
    wav = augment_waveform(buffer, noise, cfg, rng)
    values = log_mel_frames(wav.samples, frontend)
    return spec_augment(values, cfg, rng)


def load_noise_dir(path) -> list[AudioBuffer]:
    """Load every ``*.wav`` under ``path`` (sorted, recursive) as background noise."""
    files = sorted(Path(path).rglob("*.wav"))
    if not files:
        raise FileNotFoundError(f"no WAV files in noise directory {path}")
    return [load_audio(f) for f in files]


def background_sample(
    noise: Sequence[AudioBuffer],
    length: int,
    rng: np.random.Generator,
    gain_max: float = 1.0,
    silence_prob: float = 0.1,
) -> np.ndarray:
    """A pure-background clip: a noise crop at gain U[0, gain_max], or digital silence."""
    if not noise or rng.uniform() < silence_prob:
        return np.zeros(length, dtype=np.float32)
    bg = noise[int(rng.integers(0, len(noise)))]
    gain = float(rng.uniform(0.0, gain_max))
    return np.clip(gain * noise_crop(bg, length, rng), -1.0, 1.0).astype(np.float32)
