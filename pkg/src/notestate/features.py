"""Log-compressed mel-spectrogram features."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .noterep import FrameGrid


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16000
    fft_size: int = 2048
    hop: int = 512
    n_mels: int = 229
    fmin: float = 30.0
    fmax: float = 8000.0
    log_floor: float = 1e-5

    def __post_init__(self):
        if self.hop > self.fft_size:
            raise ValueError("hop must not exceed fft_size")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ValueError("need 0 <= fmin < fmax <= Nyquist")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    @property
    def grid(self) -> FrameGrid:
        return FrameGrid(self.sample_rate, self.hop)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass(frozen=True)
class FeatureMatrix:
    grid: FrameGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {values.shape}")
        if values.shape[0] != self.grid.n_frames:
            raise ValueError(f"{values.shape[0]} frames but grid has {self.grid.n_frames}")
        if not np.all(np.isfinite(values)):
            raise ValueError("features contain non-finite values")
        object.__setattr__(self, "values", values)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_bins(self) -> int:
        return self.values.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers(cfg: FeatureConfig) -> np.ndarray:
    """Band edges in Hz: ``n_mels + 2`` points equally spaced on the mel scale."""
    mels = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    return mel_to_hz(mels)


def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """Triangular HTK-style filters, shape ``(n_mels, fft_size // 2 + 1)``, peak 1."""
    edges = mel_centers(cfg)
    freqs = np.arange(cfg.fft_size // 2 + 1) * cfg.sample_rate / cfg.fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_signal(samples: np.ndarray, fft_size: int, hop: int) -> np.ndarray:
    """Centered frames with reflect padding; ``1 + len // hop`` rows."""
    pad = fft_size // 2
    mode = "reflect" if len(samples) > pad else "constant"
    padded = np.pad(samples, pad, mode=mode)
    n_frames = 1 + len(samples) // hop
    idx = np.arange(fft_size)[None, :] + hop * np.arange(n_frames)[:, None]
    return padded[idx]


def power_spectrum(frames: np.ndarray, fft_size: int) -> np.ndarray:
    """One-sided power spectrum of Hann-windowed frames."""
    spec = np.fft.rfft(frames * hann(fft_size), n=fft_size, axis=-1)
    return spec.real ** 2 + spec.imag ** 2


def logmel(samples, cfg: FeatureConfig = FeatureConfig()) -> FeatureMatrix:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1:
        raise ValueError("expected mono samples")
    if samples.size == 0:
        raise ValueError("empty input")
    if not np.all(np.isfinite(samples)):
        raise ValueError("input contains non-finite samples")
    frames = frame_signal(samples, cfg.fft_size, cfg.hop)
    mel = power_spectrum(frames, cfg.fft_size) @ mel_filterbank(cfg).T
    values = np.log(mel + cfg.log_floor)
    return FeatureMatrix(cfg.grid.with_frames(len(values)), values)


def read_wav(path) -> tuple[int, np.ndarray]:
    """Read a PCM16/PCM32/float WAV file as float64 mono in [-1, 1]."""
    from scipy.io import wavfile

    rate, data = wavfile.read(str(path))
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float64) / float(np.iinfo(data.dtype).max)
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 2:
        data = data.mean(axis=1)
    return int(rate), data


def features_from_wav(path, cfg: FeatureConfig = FeatureConfig()) -> FeatureMatrix:
    rate, samples = read_wav(path)
    if rate != cfg.sample_rate:
        raise ValueError(f"{path}: sample rate {rate} != configured {cfg.sample_rate}; resample first")
    return logmel(samples, cfg)


def write_sidecar(path, cfg: FeatureConfig | dict) -> None:
    payload = asdict(cfg) if isinstance(cfg, FeatureConfig) else cfg
    Path(str(path) + ".json").write_text(json.dumps(payload, indent=2, sort_keys=True))
