"""Time/frequency transforms and signed square-root scaling.

Spectrograms are stored as real arrays of shape ``(2, F, T)`` with the real
part in channel 0 and the imaginary part in channel 1. A 2048-point real FFT
gives 1025 bins; to keep ``F == 1024`` without losing information the Nyquist
coefficient (always real for real input) is stored in the imaginary slot of the
DC bin, whose imaginary part is always zero. ``istft`` unpacks it again, so the
analysis/synthesis pair stays perfectly invertible.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.io import wavfile
from scipy.signal import resample_poly

logger = logging.getLogger(__name__)

SAMPLE_RATE = 44100
WIN = 2048
HOP = 512
N_BINS = WIN // 2

LINEAR = "linear"
SIGNED_SQRT = "signed_sqrt"


class SpectralError(ValueError):
    pass


@dataclass
class AudioSignal:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 1:
            raise SpectralError(f"expected mono samples, got shape {self.samples.shape}")
        if self.sample_rate != SAMPLE_RATE:
            raise SpectralError(f"sample rate must be {SAMPLE_RATE}, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise SpectralError("audio contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class ComplexSpectrogram:
    data: np.ndarray
    scaling: str = LINEAR
    hop: int = HOP
    win: int = WIN

    def __post_init__(self):
        if self.scaling not in (LINEAR, SIGNED_SQRT):
            raise SpectralError(f"unknown scaling {self.scaling!r}")
        if self.data.ndim != 3 or self.data.shape[0] != 2:
            raise SpectralError(f"spectrogram data must be (2, F, T), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise SpectralError("spectrogram has non-finite values")

    @property
    def n_bins(self) -> int:
        return self.data.shape[1]

    @property
    def n_frames(self) -> int:
        return self.data.shape[2]

    def to_signed_sqrt(self) -> "ComplexSpectrogram":
        if self.scaling == SIGNED_SQRT:
            raise SpectralError("signed_sqrt scaling already applied")
        return ComplexSpectrogram(signed_sqrt(self.data), SIGNED_SQRT, self.hop, self.win)

    def to_linear(self) -> "ComplexSpectrogram":
        if self.scaling == LINEAR:
            return self
        return ComplexSpectrogram(signed_square(self.data), LINEAR, self.hop, self.win)

    def frames(self, start: int, stop: int) -> "ComplexSpectrogram":
        return ComplexSpectrogram(self.data[:, :, start:stop], self.scaling, self.hop, self.win)


@dataclass
class PowerSpectrogram:
    data: np.ndarray
    hop: int = HOP
    win: int = WIN
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.data.ndim != 2:
            raise SpectralError(f"power spectrogram must be (F, T), got {self.data.shape}")
        if np.any(self.data < 0):
            raise SpectralError("power spectrogram has negative entries")


def hann_window(win: int = WIN) -> np.ndarray:
    # periodic Hann: sums to a constant at 75% overlap
    n = np.arange(win)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / win)


def n_frames_for(n_samples: int, win: int = WIN, hop: int = HOP) -> int:
    if n_samples < win:
        return 0
    return 1 + (n_samples - win) // hop


def n_samples_for(n_frames: int, win: int = WIN, hop: int = HOP) -> int:
    return (n_frames - 1) * hop + win


def _samples_of(signal) -> np.ndarray:
    if isinstance(signal, AudioSignal):
        return signal.samples
    return np.asarray(signal)


def stft(signal, win: int = WIN, hop: int = HOP) -> ComplexSpectrogram:
    """Hann-windowed STFT without centre padding; frame ``t`` starts at ``t * hop``."""
    x = np.asarray(_samples_of(signal), dtype=np.float64)
    if len(x) < win:
        raise SpectralError(f"insufficient samples: {len(x)} < window {win}")
    n = n_frames_for(len(x), win, hop)
    idx = np.arange(win)[None, :] + hop * np.arange(n)[:, None]
    spec = np.fft.rfft(x[idx] * hann_window(win)[None, :], axis=1).T  # (win//2 + 1, T)
    half = win // 2
    data = np.empty((2, half, n))
    data[0] = spec[:half].real
    data[1] = spec[:half].imag
    data[1, 0] = spec[half].real
    return ComplexSpectrogram(data, LINEAR, hop, win)


def istft(spec: ComplexSpectrogram) -> AudioSignal:
    """Weighted overlap-add inverse of :func:`stft`.

    Samples covered by fewer than ``win // hop`` frames (the outer ``win - hop``
    samples on each side) are still normalised by the accumulated window power,
    except where that power vanishes.
    """
    if spec.scaling != LINEAR:
        raise SpectralError("apply signed_square first")
    data = np.asarray(spec.data, dtype=np.float64)
    win, hop = spec.win, spec.hop
    half = data.shape[1]
    if half != win // 2:
        raise SpectralError(f"expected {win // 2} bins, got {half}")
    n = data.shape[2]
    full = np.zeros((half + 1, n), dtype=np.complex128)
    full[:half] = data[0] + 1j * data[1]
    full[0] = data[0, 0]
    full[half] = data[1, 0]
    frames = np.fft.irfft(full, n=win, axis=0).T  # (T, win)
    window = hann_window(win)
    length = n_samples_for(n, win, hop)
    out = np.zeros(length)
    norm = np.zeros(length)
    for t in range(n):
        s = t * hop
        out[s:s + win] += frames[t] * window
        norm[s:s + win] += window ** 2
    nz = norm > 1e-10
    out[nz] /= norm[nz]
    out[~nz] = 0.0
    return AudioSignal(out)


def signed_sqrt(x):
    if torch.is_tensor(x):
        return torch.sign(x) * torch.sqrt(torch.abs(x))
    x = np.asarray(x, dtype=np.float64) if np.isscalar(x) else np.asarray(x)
    return np.sign(x) * np.sqrt(np.abs(x))


def signed_square(y):
    if torch.is_tensor(y):
        return y * torch.abs(y)
    y = np.asarray(y, dtype=np.float64) if np.isscalar(y) else np.asarray(y)
    return y * np.abs(y)


def power_spectrogram(spec: ComplexSpectrogram) -> PowerSpectrogram:
    if spec.scaling != LINEAR:
        spec = spec.to_linear()
    return PowerSpectrogram(spec.data[0] ** 2 + spec.data[1] ** 2, spec.hop, spec.win)


def root_power(data):
    """Magnitude ``|h|`` of linear-scaled complex data shaped ``(..., 2, F, T)``."""
    if torch.is_tensor(data):
        return torch.sqrt(data[..., 0, :, :] ** 2 + data[..., 1, :, :] ** 2)
    return np.sqrt(data[..., 0, :, :] ** 2 + data[..., 1, :, :] ** 2)


def load_wav(path, resample: bool = False) -> AudioSignal:
    """Read a mono (or down-mixed) WAV file as float64 in [-1, 1]."""
    rate, data = wavfile.read(str(path))
    if np.issubdtype(data.dtype, np.integer):
        scale = float(np.iinfo(data.dtype).max) + 1.0
        x = data.astype(np.float64) / scale
    else:
        x = data.astype(np.float64)
    if x.ndim == 2:
        x = x.mean(axis=1)
    if rate != SAMPLE_RATE:
        if not resample:
            raise SpectralError(
                f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE} (pass --resample to convert)")
        x = resample_audio(x, rate)
    return AudioSignal(x)


def resample_audio(x: np.ndarray, rate: int, target: int = SAMPLE_RATE) -> np.ndarray:
    g = np.gcd(int(rate), int(target))
    return resample_poly(x, target // g, rate // g)


def save_wav(path, signal, subtype: str = "PCM_16") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    x = _samples_of(signal).astype(np.float64)
    if subtype == "PCM_16":
        clipped = np.clip(x, -1.0, 1.0 - 1.0 / 32768)
        if np.any(clipped != x):
            logger.warning("%s: clipping %d samples", path, int(np.sum(clipped != x)))
        wavfile.write(str(path), SAMPLE_RATE, np.round(clipped * 32768).astype(np.int16))
    elif subtype == "FLOAT":
        wavfile.write(str(path), SAMPLE_RATE, x.astype(np.float32))
    else:
        raise SpectralError(f"unsupported WAV subtype {subtype!r}")
    return path
