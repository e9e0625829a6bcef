"""Training-time waveform augmentation: tempo, pitch, additive noise and reverberation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import signal

from .audio import Waveform

logger = logging.getLogger(__name__)

N_FFT = 2048
HOP = 512


class AugmentParameterError(ValueError):
    pass


class UndefinedSNRError(ValueError):
    pass


def _stft(x: np.ndarray, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    win = signal.get_window("hann", n_fft, fftbins=True)
    xp = np.pad(x, n_fft // 2, mode="reflect" if len(x) > n_fft // 2 else "constant")
    n_frames = 1 + (len(xp) - n_fft) // hop
    frames = np.lib.stride_tricks.sliding_window_view(xp, n_fft)[::hop][:n_frames]
    return np.fft.rfft(frames * win, axis=1).T  # (bins, frames)


def _istft(spec: np.ndarray, length: int, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    win = signal.get_window("hann", n_fft, fftbins=True)
    n_frames = spec.shape[1]
    frames = np.fft.irfft(spec.T, n=n_fft, axis=1) * win
    total = n_fft + hop * (n_frames - 1)
    y = np.zeros(total)
    norm = np.zeros(total)
    for i in range(n_frames):
        y[i * hop:i * hop + n_fft] += frames[i]
        norm[i * hop:i * hop + n_fft] += win ** 2
    nz = norm > 1e-8
    y[nz] /= norm[nz]
    y = y[n_fft // 2:]
    return _fix_length(y, length)


def _fix_length(y: np.ndarray, length: int) -> np.ndarray:
    if len(y) >= length:
        return y[:length]
    return np.pad(y, (0, length - len(y)))


def phase_vocoder(spec: np.ndarray, rate: float, hop: int = HOP, n_fft: int = N_FFT) -> np.ndarray:
    n_bins, n_frames = spec.shape
    steps = np.arange(0, n_frames, rate)
    advance = 2 * np.pi * hop * np.arange(n_bins) / n_fft
    padded = np.concatenate([spec, np.zeros((n_bins, 2), dtype=spec.dtype)], axis=1)
    out = np.empty((n_bins, len(steps)), dtype=complex)
    phase = np.angle(padded[:, 0])
    for t, step in enumerate(steps):
        i = int(step)
        c0, c1 = padded[:, i], padded[:, i + 1]
        frac = step - i
        mag = (1.0 - frac) * np.abs(c0) + frac * np.abs(c1)
        out[:, t] = mag * np.exp(1j * phase)
        dphi = np.angle(c1) - np.angle(c0) - advance
        dphi -= 2 * np.pi * np.round(dphi / (2 * np.pi))
        phase = phase + advance + dphi
    return out


def time_stretch(x: np.ndarray, rate: float) -> np.ndarray:
    """Tempo change at constant pitch; output length ``round(len(x) / rate)``."""
    length = int(round(len(x) / rate))
    stretched = phase_vocoder(_stft(x), rate)
    return _istft(stretched, length)


def change_speed(w: Waveform, ratio: float) -> Waveform:
    if not 0.5 <= ratio <= 2.0:
        raise AugmentParameterError(f"speed ratio {ratio} outside [0.5, 2]")
    if ratio == 1.0:
        return Waveform(w.samples.copy(), w.sample_rate, w.bit_depth)
    return Waveform(time_stretch(w.samples, ratio), w.sample_rate, w.bit_depth)


def shift_pitch(w: Waveform, semitones: float) -> Waveform:
    """Scale the pitch by ``2**(semitones/12)`` keeping the length: stretch, then resample back."""
    if not -12 <= semitones <= 12:
        raise AugmentParameterError(f"pitch shift {semitones} outside [-12, 12] semitones")
    if semitones == 0:
        return Waveform(w.samples.copy(), w.sample_rate, w.bit_depth)
    rate = 2.0 ** (-semitones / 12.0)
    stretched = time_stretch(w.samples, rate)
    frac = Fraction(rate).limit_denominator(1000)
    y = signal.resample_poly(stretched, frac.numerator, frac.denominator, window=("kaiser", 5.0))
    return Waveform(_fix_length(y, len(w)), w.sample_rate, w.bit_depth)


def power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x, dtype=np.float64)))


def noise_gain(clean: np.ndarray, noise: np.ndarray, snr_db: float) -> float:
    p_clean, p_noise = power(clean), power(noise)
    if p_clean == 0.0:
        raise UndefinedSNRError("clean signal is silent; SNR undefined")
    if p_noise == 0.0:
        raise UndefinedSNRError("noise signal is silent")
    return math.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))


def mix_noise(clean: Waveform, noise: Waveform | np.ndarray, snr_db: float) -> Waveform:
    if not math.isfinite(snr_db):
        raise AugmentParameterError(f"snr must be finite, got {snr_db}")
    n = np.asarray(noise.samples if isinstance(noise, Waveform) else noise, dtype=np.float64)
    if n.size == 0:
        raise UndefinedSNRError("empty noise signal")
    reps = -(-len(clean) // len(n))
    n = np.tile(n, reps)[:len(clean)]
    y = clean.samples + noise_gain(clean.samples, n, snr_db) * n
    peak = np.max(np.abs(y)) if len(y) else 0.0
    if peak > 1.0:
        logger.warning("noise mix overflowed (peak %.3f); clipping", peak)
        y = np.clip(y, -1.0, 1.0)
    return Waveform(y, clean.sample_rate, clean.bit_depth)


def add_reverb(w: Waveform, rir: np.ndarray) -> Waveform:
    rir = np.asarray(rir, dtype=np.float64)
    if rir.size == 0:
        raise AugmentParameterError("empty impulse response")
    if not np.all(np.isfinite(rir)):
        raise AugmentParameterError("impulse response has non-finite values")
    y = signal.fftconvolve(w.samples, rir)[:len(w)]
    # fftconvolve leaves ~1e-16 residue where the exact result is zero
    y[np.abs(y) < 1e-12] = 0.0
    in_peak = np.max(np.abs(w.samples)) if len(w) else 0.0
    out_peak = np.max(np.abs(y)) if len(y) else 0.0
    if out_peak > 0:
        y = y * (in_peak / out_peak)
    return Waveform(y, w.sample_rate, w.bit_depth)


def synthetic_rir(t60: float, sample_rate: int = 16000, seed: int = 0, length: float | None = None) -> np.ndarray:
    """Exponentially decaying noise tail reaching -60 dB at ``t60`` seconds, with a unit direct path."""
    n = int(round((length if length is not None else 1.2 * t60) * sample_rate))
    rng = np.random.default_rng(seed)
    t = np.arange(n) / sample_rate
    rir = rng.standard_normal(n) * np.exp(-math.log(1000.0) * t / t60)
    rir[0] = 1.0
    return rir


@dataclass
class AugmentPolicy:
    pitch_range: tuple[float, float] = (-3.0, 3.0)
    speed_range: tuple[float, float] = (0.8, 1.3)
    snr_range: tuple[float, float] = (10.0, 25.0)
    p_noise: float = 0.5
    p_reverb: float = 0.5
    t60_range: tuple[float, float] = (0.2, 0.8)
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("pitch_range", "speed_range", "snr_range", "t60_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise AugmentParameterError(f"{name}: lower bound {lo} exceeds upper {hi}")
            setattr(self, name, (float(lo), float(hi)))
        for name in ("p_noise", "p_reverb"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise AugmentParameterError(f"{name} must lie in [0, 1], got {p}")

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentPolicy":
        return cls((0.0, 0.0), (1.0, 1.0), (25.0, 25.0), 0.0, 0.0, seed=seed)


def apply_policy(w: Waveform, policy: AugmentPolicy, rng: np.random.Generator | None = None,
                 noise: np.ndarray | None = None) -> Waveform:
    """speed -> pitch -> (reverb) -> (noise), parameters drawn from ``rng`` (seeded by the policy if absent).

    Every draw is made unconditionally so the random stream does not depend on
    which stages fire.
    """
    rng = rng if rng is not None else np.random.default_rng(policy.seed)
    speed = rng.uniform(*policy.speed_range)
    semis = rng.uniform(*policy.pitch_range)
    do_reverb = rng.random() < policy.p_reverb
    t60 = rng.uniform(*policy.t60_range)
    rir_seed = int(rng.integers(0, 2**31 - 1))
    do_noise = rng.random() < policy.p_noise
    snr = rng.uniform(*policy.snr_range)
    noise_draw = rng.standard_normal(len(w))

    out = change_speed(w, speed)
    out = shift_pitch(out, semis)
    if do_reverb:
        out = add_reverb(out, synthetic_rir(t60, w.sample_rate, rir_seed))
    if do_noise and power(out.samples) > 0:
        out = mix_noise(out, noise if noise is not None else noise_draw, snr)
    return out
