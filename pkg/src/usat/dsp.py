"""Signal-processing primitives: waveforms, spectrograms, resampling, SNR.

Conventions used throughout the package:
  - waveform samples are float32 in [-1, 1), mono;
  - spectrogram frames follow the no-padding rule
    frames = floor((n_samples - window_length) / frame_shift) + 1,
    recorded in the output metadata together with the window type;
  - the analysis window is a periodic Hann window;
  - mel filters are unnormalized triangles on the HTK mel scale.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.io import wavfile
from scipy.signal import get_window, resample_poly

from .errors import DataError

DEFAULT_SAMPLE_RATE = 22050
DEFAULT_WINDOW_LENGTH = 1024
DEFAULT_FRAME_SHIFT = 256
DEFAULT_FFT_SIZE = 1024
SNR_FRAME_SIZE = 512
SNR_CLAMP_DB = 60.0
VAD_THRESHOLD_DBFS = -40.0

INT16_SCALE = 32768.0


@dataclass
class Waveform:
    """Mono audio: float32 samples plus sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise DataError(f"waveform must be mono 1-D, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise DataError(f"sample_rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)

    @property
    def duration_seconds(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class LinearSpectrogram:
    """Magnitude STFT, frames x bins, with the analysis convention recorded."""

    magnitudes: np.ndarray
    frame_shift: int
    window_length: int
    fft_size: int
    sample_rate: int
    window: str = "hann-periodic"
    padding: str = "none"

    def __post_init__(self) -> None:
        self.magnitudes = np.asarray(self.magnitudes, dtype=np.float32)
        if self.magnitudes.ndim != 2:
            raise DataError("spectrogram must be 2-D [frames x bins]")
        if self.magnitudes.shape[1] != self.fft_size // 2 + 1:
            raise DataError(
                f"bins {self.magnitudes.shape[1]} != fft_size/2+1 = {self.fft_size // 2 + 1}")
        if self.magnitudes.size and self.magnitudes.min() < 0:
            raise DataError("magnitudes must be non-negative")

    @property
    def num_frames(self) -> int:
        return self.magnitudes.shape[0]

    @property
    def num_bins(self) -> int:
        return self.magnitudes.shape[1]


@dataclass
class MelSpectrogram:
    """Mel-projected spectrogram, frames x mel_bins."""

    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise DataError("mel spectrogram must be 2-D [frames x mel_bins]")
        if not np.all(np.isfinite(self.values)):
            raise DataError("mel spectrogram contains non-finite values")


def load_wav(path: str | Path) -> Waveform:
    """Read a mono 16-bit PCM WAV file."""
    try:
        rate, data = wavfile.read(str(path))
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise DataError(f"cannot read WAV file {path}: {exc}") from exc
    if data.ndim != 1:
        raise DataError(f"{path}: only mono WAV is supported, got {data.ndim} channels")
    if data.dtype != np.int16:
        raise DataError(f"{path}: only 16-bit PCM is supported, got dtype {data.dtype}")
    return Waveform(data.astype(np.float32) / INT16_SCALE, rate)


def save_wav(path: str | Path, w: Waveform) -> None:
    """Write mono 16-bit PCM; int16-representable inputs round-trip exactly."""
    scaled = np.rint(w.samples.astype(np.float64) * INT16_SCALE)
    pcm = np.clip(scaled, -32768, 32767).astype(np.int16)
    wavfile.write(str(path), w.sample_rate, pcm)


def stft(
    w: Waveform,
    window_length: int = DEFAULT_WINDOW_LENGTH,
    frame_shift: int = DEFAULT_FRAME_SHIFT,
    fft_size: int = DEFAULT_FFT_SIZE,
) -> LinearSpectrogram:
    """Magnitude STFT under the no-padding convention."""
    if window_length > fft_size:
        raise DataError(f"window_length {window_length} exceeds fft_size {fft_size}")
    if frame_shift <= 0:
        raise DataError("frame_shift must be positive")
    if len(w) < window_length:
        raise DataError(
            f"audio too short: {len(w)} samples < one window of {window_length}")
    window = get_window("hann", window_length, fftbins=True).astype(np.float64)
    frames = sliding_window_view(w.samples, window_length)[::frame_shift]
    spec = np.abs(np.fft.rfft(frames * window, n=fft_size, axis=1))
    return LinearSpectrogram(
        magnitudes=spec.astype(np.float32),
        frame_shift=frame_shift,
        window_length=window_length,
        fft_size=fft_size,
        sample_rate=w.sample_rate,
    )


def hz_to_mel(f: np.ndarray | float) -> np.ndarray | float:
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m: np.ndarray | float) -> np.ndarray | float:
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    sample_rate: int,
    fft_size: int,
    mel_bins: int,
    fmin: float = 0.0,
    fmax: float | None = None,
) -> np.ndarray:
    """Triangular mel filterbank, [mel_bins x (fft_size/2+1)], peaks at 1."""
    if mel_bins < 1:
        raise DataError(f"mel_bins must be >= 1, got {mel_bins}")
    if fmax is None:
        fmax = sample_rate / 2.0
    if not fmin < fmax <= sample_rate / 2.0:
        raise DataError(f"need fmin < fmax <= sample_rate/2, got fmin={fmin} fmax={fmax}")
    n_bins = fft_size // 2 + 1
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), mel_bins + 2))
    bin_freqs = np.arange(n_bins) * sample_rate / fft_size
    fb = np.zeros((mel_bins, n_bins), dtype=np.float64)
    for m in range(mel_bins):
        left, center, right = edges[m], edges[m + 1], edges[m + 2]
        rising = (bin_freqs - left) / (center - left)
        falling = (right - bin_freqs) / (right - center)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
    return fb.astype(np.float32)


def mel_project(
    lin: LinearSpectrogram,
    mel_bins: int,
    fmin: float = 0.0,
    fmax: float | None = None,
) -> MelSpectrogram:
    """Project linear magnitudes through the mel filterbank (linear map)."""
    fb = mel_filterbank(lin.sample_rate, lin.fft_size, mel_bins, fmin, fmax)
    return MelSpectrogram(lin.magnitudes @ fb.T)


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Polyphase windowed-sinc resampling; identity when rates already match."""
    if target_rate <= 0:
        raise DataError(f"target_rate must be positive, got {target_rate}")
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    g = math.gcd(target_rate, w.sample_rate)
    up, down = target_rate // g, w.sample_rate // g
    out = resample_poly(w.samples.astype(np.float64), up, down, padtype="line")
    return Waveform(np.clip(out, -1.0, 1.0).astype(np.float32), target_rate)


def frame_powers(samples: np.ndarray, frame_size: int) -> np.ndarray:
    """Mean power of consecutive non-overlapping frames (tail remainder dropped)."""
    n = len(samples) // frame_size
    if n == 0:
        raise DataError(f"audio too short for {frame_size}-sample framing")
    x = samples[: n * frame_size].reshape(n, frame_size).astype(np.float64)
    return np.mean(x * x, axis=1)


def energy_vad(
    w: Waveform,
    frame_size: int = SNR_FRAME_SIZE,
    threshold_dbfs: float = VAD_THRESHOLD_DBFS,
) -> np.ndarray:
    """Boolean speech mask per frame: power above an absolute dBFS threshold."""
    powers = frame_powers(w.samples, frame_size)
    threshold = 10.0 ** (threshold_dbfs / 10.0)
    return powers > threshold


def estimate_snr(
    w: Waveform,
    speech_mask: np.ndarray,
    frame_size: int = SNR_FRAME_SIZE,
) -> float:
    """Noise-floor-subtracted SNR in dB, clamped to [-60, +60].

    Speech frames carry signal plus noise, so the signal estimate is the
    speech-frame power minus the non-speech-frame power:
    10*log10((P_speech - P_noise) / P_noise). A speech power at or below the
    noise floor clamps to -60. `speech_mask` holds one boolean per
    non-overlapping `frame_size` frame. Degenerate masks (all speech / all
    silence) return the +-60 sentinel with a warning instead of raising.
    """
    powers = frame_powers(w.samples, frame_size)
    mask = np.asarray(speech_mask, dtype=bool)
    if mask.shape != powers.shape:
        raise DataError(
            f"speech_mask has {mask.shape[0] if mask.ndim else 0} frames, "
            f"audio framing yields {powers.shape[0]}")
    if mask.all():
        warnings.warn("SNR mask has no non-speech frames; returning +60 dB sentinel")
        return SNR_CLAMP_DB
    if not mask.any():
        warnings.warn("SNR mask has no speech frames; returning -60 dB sentinel")
        return -SNR_CLAMP_DB
    speech_power = float(np.mean(powers[mask]))
    noise_power = float(np.mean(powers[~mask]))
    if noise_power == 0.0:
        return SNR_CLAMP_DB
    signal_power = speech_power - noise_power
    if signal_power <= 0.0:
        return -SNR_CLAMP_DB
    db = 10.0 * math.log10(signal_power / noise_power)
    return float(np.clip(db, -SNR_CLAMP_DB, SNR_CLAMP_DB))
