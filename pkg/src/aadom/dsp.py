"""STFT, band cropping, mel projection and segmentation."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import AudioClip
from .errors import ClipTooShort, DataError, InvalidBand, ShapeMismatch

N_FFT = 2048
HOP = 1024
N_MELS = 128
LOG_EPS = 1e-6
SEGMENT_SECONDS = 2.5
SEGMENT_OVERLAP = 0.5

_CACHE_MAGIC = b"AADS"
_CACHE_VERSION = 1


@dataclass(frozen=True)
class FrequencyBand:
    f_lo: float
    f_hi: float

    def validate(self, sample_rate: int) -> None:
        if not (0 <= self.f_lo < self.f_hi <= sample_rate / 2):
            raise InvalidBand(
                f"band {self.f_lo:g}-{self.f_hi:g} Hz invalid for {sample_rate} Hz audio")

    def intersect(self, other: "FrequencyBand") -> "FrequencyBand":
        return FrequencyBand(max(self.f_lo, other.f_lo), min(self.f_hi, other.f_hi))

    @property
    def label(self) -> str:
        return f"{self.f_lo / 1000:g}-{self.f_hi / 1000:g}kHz"

    @classmethod
    def parse(cls, text: str) -> "FrequencyBand":
        """Parse ``"2000:5000"`` (Hz)."""
        try:
            lo, hi = (float(v) for v in text.split(":"))
        except ValueError:
            raise InvalidBand(f"cannot parse band {text!r}; expected LO:HI in Hz") from None
        return cls(lo, hi)


def full_band(sample_rate: int) -> FrequencyBand:
    return FrequencyBand(0.0, sample_rate / 2)


# nine 3 kHz-wide bands, 0.5 kHz apart
DEFAULT_BANDS = tuple(FrequencyBand(500.0 * i, 500.0 * i + 3000.0) for i in range(9))


@dataclass(frozen=True)
class Spectrogram:
    mags: np.ndarray  # [n_bins, n_frames]
    sample_rate: int
    n_fft: int = N_FFT
    hop: int = HOP

    @property
    def n_frames(self) -> int:
        return self.mags.shape[1]

    def bin_freqs(self) -> np.ndarray:
        return np.arange(self.mags.shape[0]) * self.sample_rate / self.n_fft


@dataclass(frozen=True)
class MelSpectrogram:
    values: np.ndarray  # [n_mels, n_frames], log-compressed
    band: FrequencyBand | None = None


@dataclass(frozen=True)
class MelFilterbank:
    weights: np.ndarray  # [n_mels, n_fft // 2 + 1]
    center_freqs: np.ndarray
    sample_rate: int
    n_fft: int = N_FFT


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def frame_count(n_samples: int, n_fft: int = N_FFT, hop: int = HOP) -> int:
    return (n_samples - n_fft) // hop + 1


def stft(clip: AudioClip, n_fft: int = N_FFT, hop: int = HOP) -> Spectrogram:
    """Magnitude STFT with a Hann window and no padding.

    Every frame lies fully inside the signal, so the frame count is
    ``(len - n_fft) // hop + 1``.
    """
    if len(clip) < n_fft:
        raise ClipTooShort(f"{len(clip)} samples is shorter than the {n_fft}-sample window")
    frames = np.lib.stride_tricks.sliding_window_view(clip.samples, n_fft)[::hop]
    mags = np.abs(np.fft.rfft(frames * hann(n_fft), axis=1)).T
    return Spectrogram(np.ascontiguousarray(mags), clip.sample_rate, n_fft, hop)


def band_mask(n_bins: int, sample_rate: int, n_fft: int, band: FrequencyBand) -> np.ndarray:
    freqs = np.arange(n_bins) * sample_rate / n_fft
    return (freqs >= band.f_lo) & (freqs <= band.f_hi)


def band_crop(spec: Spectrogram, band: FrequencyBand) -> Spectrogram:
    """Zero every STFT bin whose centre frequency lies outside ``band``."""
    band.validate(spec.sample_rate)
    keep = band_mask(spec.mags.shape[0], spec.sample_rate, spec.n_fft, band)
    mags = np.where(keep[:, None], spec.mags, 0.0)
    return Spectrogram(mags, spec.sample_rate, spec.n_fft, spec.hop)


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    logstep = np.log(6.4) / 27.0
    lin = f / f_sp
    log = min_log_hz / f_sp + np.log(np.maximum(f, min_log_hz) / min_log_hz) / logstep
    return np.where(f >= min_log_hz, log, lin)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel,
                    min_log_hz * np.exp(logstep * (m - min_log_mel)),
                    f_sp * m)


def build_mel_filterbank(sample_rate: int, n_fft: int = N_FFT,
                         n_mels: int = N_MELS) -> MelFilterbank:
    """Triangular mel filters spanning [0, Nyquist], each row summing to 1.

    Rows are normalised by their discrete sum rather than the analytic
    triangle area so that every filter carries exactly the same weight.
    """
    if sample_rate <= 0:
        raise ValueError("sample rate must be positive")
    nyq = sample_rate / 2
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(nyq), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    sums = weights.sum(axis=1, keepdims=True)
    if np.any(sums == 0):
        raise ValueError(f"n_fft={n_fft} too small for {n_mels} mel filters")
    return MelFilterbank(weights / sums, edges[1:-1].copy(), sample_rate, n_fft)


def mel_spectrogram(spec: Spectrogram, fb: MelFilterbank,
                    band: FrequencyBand | None = None) -> MelSpectrogram:
    if fb.sample_rate != spec.sample_rate or fb.weights.shape[1] != spec.mags.shape[0]:
        raise ShapeMismatch(
            f"filterbank for {fb.sample_rate} Hz / {fb.weights.shape[1]} bins does not match "
            f"spectrogram at {spec.sample_rate} Hz / {spec.mags.shape[0]} bins")
    return MelSpectrogram(np.log(fb.weights @ spec.mags + LOG_EPS), band)


def segment_clip(clip: AudioClip, seconds: float = SEGMENT_SECONDS,
                 overlap: float = SEGMENT_OVERLAP) -> list[AudioClip]:
    """Cut fixed-length overlapping windows; a trailing remainder is dropped."""
    length = int(round(seconds * clip.sample_rate))
    hop = int(round(length * (1 - overlap)))
    if len(clip) < length:
        raise ClipTooShort(f"clip of {clip.duration:.3f} s is shorter than a {seconds} s segment")
    count = (len(clip) - length) // hop + 1
    return [AudioClip(clip.samples[i * hop:i * hop + length], clip.sample_rate)
            for i in range(count)]


def log_mel(clip: AudioClip, fb: MelFilterbank, band: FrequencyBand | None = None,
            hop: int = HOP) -> MelSpectrogram:
    """Clip -> STFT -> optional band crop -> log-mel."""
    spec = stft(clip, fb.n_fft, hop)
    if band is not None:
        spec = band_crop(spec, band)
    return mel_spectrogram(spec, fb, band)


# --------------------------------------------------------------------------
# Spectrogram cache files


def write_spectrogram_cache(path, values: np.ndarray, sample_rate: int) -> None:
    values = np.asarray(values)
    if values.ndim != 2:
        raise ShapeMismatch("cache files hold 2-D grids")
    rows, cols = values.shape
    header = _CACHE_MAGIC + struct.pack("<IIII", _CACHE_VERSION, rows, cols, sample_rate)
    Path(path).write_bytes(header + np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_spectrogram_cache(path) -> tuple[np.ndarray, int]:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:4] != _CACHE_MAGIC:
        raise DataError(f"{path}: not a spectrogram cache file")
    version, rows, cols, rate = struct.unpack("<IIII", raw[4:20])
    if version != _CACHE_VERSION:
        raise DataError(f"{path}: unsupported cache version {version}")
    if len(raw) != 20 + 4 * rows * cols:
        raise DataError(f"{path}: truncated cache payload")
    values = np.frombuffer(raw, dtype="<f4", offset=20).reshape(rows, cols)
    return values.astype(np.float32), rate
