"""Audio I/O and the log-mel spectrogram frontend.

All models consume fixed-shape log-mel spectrograms. At the default
configuration (30 ms Hann window, 20 ms hop, 40 HTK mel bins between
60 Hz and 7.6 kHz) a one-second clip at 16 kHz yields a 49x40 matrix.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.io import wavfile

from mkws.errors import AudioFormatError, ShapeError

SAMPLE_RATE = 16000


@dataclass(eq=False)
class AudioBuffer:
    """Mono PCM audio as float32 samples nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.ndim != 1:
            raise ShapeError(f"AudioBuffer must be mono (1-D), got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("AudioBuffer samples must be finite")
        self.samples = samples

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate

    def slice_seconds(self, start_s: float, end_s: float) -> "AudioBuffer":
        a = int(round(start_s * self.sample_rate))
        b = int(round(end_s * self.sample_rate))
        return AudioBuffer(self.samples[a:b], self.sample_rate)


@dataclass(frozen=True)
class FrontendConfig:
    window_ms: float = 30.0
    hop_ms: float = 20.0
    num_mel_bins: int = 40
    mel_low_hz: float = 60.0
    mel_high_hz: float = 7600.0
    log_floor: float = 1e-6
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if not (self.window_ms >= self.hop_ms > 0):
            raise ValueError("need window_ms >= hop_ms > 0")
        if self.num_mel_bins < 2:
            raise ValueError("num_mel_bins must be >= 2")
        if not (0 <= self.mel_low_hz < self.mel_high_hz <= self.sample_rate / 2):
            raise ValueError("need 0 <= mel_low_hz < mel_high_hz <= sample_rate/2")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    @property
    def window_len(self) -> int:
        return int(round(self.window_ms * self.sample_rate / 1000))

    @property
    def hop_len(self) -> int:
        return int(round(self.hop_ms * self.sample_rate / 1000))

    @property
    def fft_len(self) -> int:
        return 1 << (self.window_len - 1).bit_length()

    def num_frames(self, num_samples: int) -> int:
        return (num_samples - self.window_len) // self.hop_len + 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class Spectrogram:
    """T x F log-mel energies plus where they came from."""

    values: np.ndarray
    frame_hop_ms: float = 20.0
    source_start_s: float = 0.0
    source_num_samples: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: FrontendConfig) -> np.ndarray:
    """Center frequency in Hz of each mel filter."""
    mels = np.linspace(hz_to_mel(cfg.mel_low_hz), hz_to_mel(cfg.mel_high_hz), cfg.num_mel_bins + 2)
    return mel_to_hz(mels[1:-1])


@lru_cache(maxsize=16)
def _filterbank(cfg: FrontendConfig) -> np.ndarray:
    # (n_fft//2 + 1, num_mel_bins); unit-peak triangles on an HTK mel grid
    n_fft = cfg.fft_len
    freqs = np.arange(n_fft // 2 + 1) * cfg.sample_rate / n_fft
    edges = mel_to_hz(
        np.linspace(hz_to_mel(cfg.mel_low_hz), hz_to_mel(cfg.mel_high_hz), cfg.num_mel_bins + 2)
    )
    fb = np.zeros((freqs.size, cfg.num_mel_bins))
    for m in range(cfg.num_mel_bins):
        lo, ctr, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / (ctr - lo)
        down = (hi - freqs) / (hi - ctr)
        fb[:, m] = np.clip(np.minimum(up, down), 0.0, None)
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=16)
def _window(n: int) -> np.ndarray:
    # periodic Hann
    w = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)
    w.setflags(write=False)
    return w


def log_mel_frames(samples: np.ndarray, cfg: FrontendConfig) -> np.ndarray:
    """Log-mel matrix for raw samples; leading axes are treated as batch.

    ``samples`` has shape (..., N). Returns (..., T, F) float32.
    """
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.shape[-1]
    if n < cfg.window_len:
        raise ShapeError(f"need at least {cfg.window_len} samples for one frame, got {n}")
    frames = np.lib.stride_tricks.sliding_window_view(samples, cfg.window_len, axis=-1)
    frames = frames[..., :: cfg.hop_len, :]
    spec = np.abs(np.fft.rfft(frames * _window(cfg.window_len), n=cfg.fft_len, axis=-1))
    energy = spec @ _filterbank(cfg)
    return np.log(energy + cfg.log_floor).astype(np.float32)


def compute_spectrogram(buffer: AudioBuffer, cfg: FrontendConfig | None = None) -> Spectrogram:
    cfg = cfg or FrontendConfig()
    if buffer.sample_rate != cfg.sample_rate:
        raise ValueError(f"buffer rate {buffer.sample_rate} != frontend rate {cfg.sample_rate}")
    values = log_mel_frames(buffer.samples, cfg)
    return Spectrogram(values, cfg.hop_ms, 0.0, len(buffer))


def resample_linear(samples: np.ndarray, src_rate: int, dst_rate: int) -> np.ndarray:
    if src_rate == dst_rate:
        return np.asarray(samples, dtype=np.float32)
    n_out = int(round(len(samples) * dst_rate / src_rate))
    positions = np.arange(n_out) * (src_rate / dst_rate)
    return np.interp(positions, np.arange(len(samples)), samples).astype(np.float32)


def load_audio(path: str | Path, target_rate: int = SAMPLE_RATE) -> AudioBuffer:
    """Read a PCM WAV file, downmix to mono and resample to ``target_rate``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such audio file: {path}")
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise AudioFormatError(f"{path}: {exc}") from exc
    if data.dtype == np.int16:
        x = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        x = (data.astype(np.float64) / 2147483648.0).astype(np.float32)
    elif data.dtype == np.uint8:
        x = (data.astype(np.float32) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float32)
    else:
        raise AudioFormatError(f"{path}: unsupported sample type {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1, dtype=np.float64).astype(np.float32)
    if x.size == 0:
        raise AudioFormatError(f"{path}: zero-length audio")
    return AudioBuffer(resample_linear(x, rate, target_rate), target_rate)


def to_int16(samples: np.ndarray) -> np.ndarray:
    """Full-scale float -> int16 mapping: 1.0 -> 32767, -1.0 -> -32768."""
    scaled = np.round(np.asarray(samples, dtype=np.float64) * 32768.0)
    return np.clip(scaled, -32768, 32767).astype(np.int16)


def save_audio(buffer: AudioBuffer, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(path, buffer.sample_rate, to_int16(buffer.samples))


def frame_stream(
    buffer: AudioBuffer, window_s: float = 1.0, stride_s: float = 0.020
) -> Iterator[tuple[float, AudioBuffer]]:
    """Yield ``(start_time, window)`` pairs of overlapping fixed-length windows.

    Windows are views into ``buffer``; the trailing partial window is dropped.
    """
    if stride_s <= 0:
        raise ValueError("stride must be positive")
    win = int(round(window_s * buffer.sample_rate))
    hop = int(round(stride_s * buffer.sample_rate))
    if hop <= 0:
        raise ValueError("stride shorter than one sample")
    if len(buffer) < win:
        raise ShapeError(f"buffer of {len(buffer)} samples shorter than window of {win}")
    count = (len(buffer) - win) // hop + 1
    for k in range(count):
        yield k * stride_s, AudioBuffer(buffer.samples[k * hop : k * hop + win], buffer.sample_rate)


def num_stream_windows(num_samples: int, window: int, hop: int) -> int:
    return 0 if num_samples < window else (num_samples - window) // hop + 1


def rms(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    return math.sqrt(float(np.mean(x * x))) if x.size else 0.0
