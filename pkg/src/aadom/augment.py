"""Pseudo-audio pitch shifting and online batch augmentation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from .corpus import AudioClip
from .dsp import LOG_EPS, hann
from .errors import BatchTooSmall, InvalidConfig, ShiftOutOfRange, SpecTooSmall

SPEC_FLOOR = float(np.log(LOG_EPS))

# phase vocoder analysis
_PV_FFT = 2048
_PV_HOP = 512


@dataclass
class AugmentConfig:
    pitch_semitones: list = field(default_factory=lambda: [-2.0, 2.0])
    specaug_time_width: int = 10
    specaug_freq_width: int = 10
    mixup_beta_alpha: float = 0.4
    mixup_uniform_prob: float = 0.5

    def validate(self) -> None:
        if any(abs(s) > 12 for s in self.pitch_semitones):
            raise InvalidConfig("pitch shifts are limited to +-12 semitones")
        if self.specaug_time_width < 1 or self.specaug_freq_width < 1:
            raise InvalidConfig("SpecAugment widths must be at least 1")
        if self.mixup_beta_alpha <= 0:
            raise InvalidConfig("mixup Beta alpha must be positive")
        if not 0 <= self.mixup_uniform_prob <= 1:
            raise InvalidConfig("mixup_uniform_prob must lie in [0, 1]")


@dataclass
class LabeledBatch:
    specs: np.ndarray   # [B, n_mels, n_frames]
    labels: np.ndarray  # [B, C], rows on the probability simplex

    def __post_init__(self):
        self.specs = np.asarray(self.specs)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.specs.ndim != 3 or self.labels.ndim != 2:
            raise ValueError("specs must be [B, M, T] and labels [B, C]")
        if len(self.specs) != len(self.labels):
            raise ValueError("specs and labels differ in length")
        if np.any(self.labels < 0) or not np.allclose(self.labels.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError("label rows must be probability vectors")

    def __len__(self):
        return len(self.specs)


# --------------------------------------------------------------------------
# Pitch shifting


def _pv_stft(x: np.ndarray) -> np.ndarray:
    pad = _PV_FFT // 2
    xp = np.pad(x, pad)
    if len(xp) < _PV_FFT:
        xp = np.pad(xp, (0, _PV_FFT - len(xp)))
    frames = np.lib.stride_tricks.sliding_window_view(xp, _PV_FFT)[::_PV_HOP]
    return np.fft.rfft(frames * hann(_PV_FFT), axis=1)


def _pv_istft(frames: np.ndarray, length: int) -> np.ndarray:
    win = hann(_PV_FFT)
    n = _PV_FFT + _PV_HOP * (len(frames) - 1)
    out = np.zeros(n)
    norm = np.zeros(n)
    chunks = np.fft.irfft(frames, n=_PV_FFT, axis=1) * win
    for i, chunk in enumerate(chunks):
        s = i * _PV_HOP
        out[s:s + _PV_FFT] += chunk
        norm[s:s + _PV_FFT] += win ** 2
    out /= np.maximum(norm, 1e-8)
    pad = _PV_FFT // 2
    out = out[pad:pad + length]
    return np.pad(out, (0, max(0, length - len(out))))


def _nearest_peak(mag: np.ndarray) -> np.ndarray:
    """Index of the spectral peak whose region of influence holds each bin."""
    n = mag.size
    inner = (mag[1:-1] > mag[:-2]) & (mag[1:-1] >= mag[2:])
    peaks = np.flatnonzero(inner) + 1
    if peaks.size == 0:
        return np.arange(n)
    bounds = (peaks[:-1] + peaks[1:]) // 2
    return peaks[np.searchsorted(bounds, np.arange(n), side="left")]


def time_stretch(x: np.ndarray, factor: float) -> np.ndarray:
    """Phase-vocoder stretch: output is ``factor`` times as long, same pitch.

    Uses identity phase locking: only peak bins integrate their instantaneous
    frequency, and every other bin keeps its analysis phase offset relative to
    the peak that dominates it.
    """
    spec = _pv_stft(x)
    n_out = int(round(len(x) * factor))
    steps = np.arange(0, len(spec) - 1, 1.0 / factor)
    omega = 2 * np.pi * _PV_HOP * np.arange(spec.shape[1]) / _PV_FFT
    spec = np.vstack([spec, np.zeros((1, spec.shape[1]), complex)])
    phase = np.angle(spec[0])
    out = np.empty((len(steps), spec.shape[1]), complex)
    for i, t in enumerate(steps):
        k = int(t)
        frac = t - k
        a, b = spec[k], spec[k + 1]
        mag = (1 - frac) * np.abs(a) + frac * np.abs(b)
        peak = _nearest_peak(mag)
        ang_a = np.angle(a)
        locked = phase[peak] + ang_a - ang_a[peak]
        out[i] = mag * np.exp(1j * locked)
        dphi = np.angle(b) - ang_a - omega
        dphi -= 2 * np.pi * np.round(dphi / (2 * np.pi))
        phase = locked + omega + dphi
    return _pv_istft(out, n_out)


def pitch_shift(clip: AudioClip, semitones: float) -> AudioClip:
    """Shift pitch by ``semitones`` keeping the duration.

    The clip is first resampled by the frequency ratio (which also changes its
    length) and then phase-vocoder stretched back to the original length.
    """
    if abs(semitones) > 12:
        raise ShiftOutOfRange(f"{semitones} semitones exceeds +-12")
    if semitones == 0:
        return AudioClip(clip.samples.copy(), clip.sample_rate)
    ratio = 2.0 ** (semitones / 12.0)
    n = len(clip)
    squeezed = signal.resample(clip.samples, max(1, int(round(n / ratio))))
    y = time_stretch(squeezed, n / len(squeezed))[:n]
    y = np.pad(y, (0, n - len(y)))
    return AudioClip(np.clip(y, -1.0, 1.0), clip.sample_rate)


# --------------------------------------------------------------------------
# Online augmentation


def spec_augment(spec: np.ndarray, rng: np.random.Generator,
                 time_width: int = 10, freq_width: int = 10) -> np.ndarray:
    """Erase one block of consecutive frames and one of consecutive mel rows.

    Erased cells take the log-domain floor ``log(1e-6)``.
    """
    values = np.asarray(getattr(spec, "values", spec))
    n_mels, n_frames = values.shape
    if n_frames <= time_width or n_mels <= freq_width:
        raise SpecTooSmall(
            f"{n_mels}x{n_frames} spectrogram too small for {freq_width}x{time_width} masks")
    t0 = int(rng.integers(0, n_frames - time_width + 1))
    f0 = int(rng.integers(0, n_mels - freq_width + 1))
    out = values.copy()
    out[:, t0:t0 + time_width] = SPEC_FLOOR
    out[f0:f0 + freq_width, :] = SPEC_FLOOR
    return out


def mixup_coefficients(n: int, rng: np.random.Generator, beta_alpha: float = 0.4,
                       uniform_prob: float = 0.5) -> np.ndarray:
    """Per-pair lambda: Uniform(0, 1) with probability ``uniform_prob``, else Beta."""
    use_uniform = rng.random(n) < uniform_prob
    beta = rng.beta(beta_alpha, beta_alpha, n)
    uni = rng.random(n)
    return np.where(use_uniform, uni, beta)


def mixup(batch: LabeledBatch, rng: np.random.Generator, beta_alpha: float = 0.4,
          uniform_prob: float = 0.5, lam=None, perm=None) -> LabeledBatch:
    """Mix each example with a partner from a random permutation of the batch.

    ``lam`` overrides the sampled coefficients (scalar or one per example) and
    ``perm`` the partner permutation.
    """
    n = len(batch)
    if n < 2:
        raise BatchTooSmall("mixup needs at least two examples")
    perm = rng.permutation(n) if perm is None else np.asarray(perm)
    if lam is None:
        lam = mixup_coefficients(n, rng, beta_alpha, uniform_prob)
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (n,))
    lam_s = lam.astype(batch.specs.dtype)[:, None, None]
    specs = lam_s * batch.specs + (1 - lam_s) * batch.specs[perm]
    labels = lam[:, None] * batch.labels + (1 - lam[:, None]) * batch.labels[perm]
    return LabeledBatch(specs, labels)
