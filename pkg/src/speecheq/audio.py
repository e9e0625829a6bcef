"""WAV I/O, resampling to 16 kHz, and the synthetic emotion corpus."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy import signal
from scipy.io import wavfile

from . import seqm
from .seqm import EmotionCategory

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
TAPS_PER_PHASE = 64
KAISER_BETA = 5.0


class AudioFormatError(ValueError):
    pass


class AudioIOError(OSError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int
    bit_depth: int = 16

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise AudioFormatError(f"waveform must be mono, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise AudioFormatError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


def load_wav(path: str | Path) -> Waveform:
    """Read PCM (8/16/24/32-bit int) or 32-bit float WAV, averaging channels to mono."""
    path = Path(path)
    if not path.exists():
        raise AudioIOError(f"no such file: {path}")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    except wavfile.WavFileWarning as exc:
        raise AudioIOError(f"{path}: {exc}") from None
    except ValueError as exc:
        msg = str(exc)
        if "Unknown wave file format" in msg or "not understood" in msg or "Unsupported" in msg:
            raise AudioFormatError(f"{path}: {msg}") from None
        raise AudioIOError(f"{path}: {msg}") from None
    except EOFError as exc:
        raise AudioIOError(f"{path}: truncated file ({exc})") from None

    if data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
        depth = 8
    elif data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
        depth = 16
    elif data.dtype == np.int32:
        # 24-bit files come back left-justified in int32
        x = data.astype(np.float64) / 2147483648.0
        depth = 32
    elif data.dtype == np.float32:
        x = data.astype(np.float64)
        depth = 32
    else:
        raise AudioFormatError(f"{path}: unsupported sample type {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    return Waveform(x, int(rate), depth)


def save_wav(w: Waveform, path: str | Path) -> None:
    """Write 16-bit PCM.  Samples are clipped to the representable range."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    tmp = path.with_name(path.name + ".tmp")
    wavfile.write(tmp, int(w.sample_rate), pcm)
    tmp.replace(path)


def _kaiser_filter(up: int, down: int) -> np.ndarray:
    n = TAPS_PER_PHASE * up
    cutoff = 1.0 / max(up, down)
    h = signal.firwin(n, cutoff, window=("kaiser", KAISER_BETA))
    return h * up


def resample(w: Waveform, target_rate: int = SAMPLE_RATE) -> Waveform:
    if target_rate <= 0:
        raise ValueError(f"target rate must be positive, got {target_rate}")
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate, w.bit_depth)
    ratio = Fraction(int(target_rate), int(w.sample_rate))
    up, down = ratio.numerator, ratio.denominator
    y = signal.resample_poly(w.samples, up, down, window=_kaiser_filter(up, down))
    return Waveform(y, int(target_rate), w.bit_depth)


def canonicalize(w: Waveform) -> Waveform:
    return resample(w, SAMPLE_RATE)


# -- synthetic corpus --------------------------------------------------------

LEVELS = ("low", "medium", "high")
AM_DEPTH = {"neutral": 0.0, "low": 0.25, "medium": 0.55, "high": 0.85}
AM_RATE_HZ = 4.0
GENDER_F0 = {"male": 120.0, "female": 210.0}

# Carriers placed so that neighbouring classes land in distinct mel bands.
CARRIER_HZ = {c: 450.0 * (1.32 ** int(c)) for c in EmotionCategory}

_WORDS = (
    "the cat sat on a mat and we can see it now but you do not know who will come here "
    "today this is good bad happy sad angry calm red blue green day night time home"
).split()


class SynthConfigError(ValueError):
    pass


@dataclass
class SynthSpec:
    """What to generate: ``counts[(category, level)] = n``.

    Neutral entries use level ``"neutral"``; their gold intensity is 0.
    """

    counts: Mapping[tuple[EmotionCategory, str], int]
    duration: float = 1.0
    seed: int = 0
    sample_rate: int = SAMPLE_RATE
    noise_level: float = 0.01
    words_per_item: tuple[int, int] = (2, 4)
    test_fraction: float = 0.0

    def __post_init__(self) -> None:
        if not self.counts:
            raise SynthConfigError("empty synthetic spec")
        for (cat, level), n in self.counts.items():
            if n <= 0:
                raise SynthConfigError(f"class {EmotionCategory(cat).label}/{level} has zero count")
            if level not in AM_DEPTH:
                raise SynthConfigError(f"unknown level {level!r}")

    @classmethod
    def levelled(cls, per_cell: int = 10, neutral: int | None = None, **kw) -> "SynthSpec":
        """8 emotions x 3 levels plus Neutral."""
        counts: dict[tuple[EmotionCategory, str], int] = {}
        for cat in EmotionCategory:
            if cat is EmotionCategory.NEUTRAL:
                continue
            for level in LEVELS:
                counts[(cat, level)] = per_cell
        counts[(EmotionCategory.NEUTRAL, "neutral")] = neutral if neutral is not None else 3 * per_cell
        return cls(counts, **kw)

    @classmethod
    def per_class(cls, n: int, **kw) -> "SynthSpec":
        counts = {}
        for cat in EmotionCategory:
            counts[(cat, "neutral" if cat is EmotionCategory.NEUTRAL else "medium")] = n
        return cls(counts, **kw)


def synth_signal(
    category: EmotionCategory,
    level: str,
    gender: str,
    rng: np.random.Generator,
    duration: float = 1.0,
    sample_rate: int = SAMPLE_RATE,
    noise_level: float = 0.01,
) -> np.ndarray:
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    carrier = CARRIER_HZ[EmotionCategory(category)] * (1.0 + rng.uniform(-0.01, 0.01))
    depth = AM_DEPTH[level]
    env = 1.0 - depth * 0.5 * (1.0 + np.sin(2 * np.pi * AM_RATE_HZ * t + rng.uniform(0, 2 * np.pi)))
    tone = np.sin(2 * np.pi * carrier * t + rng.uniform(0, 2 * np.pi))
    f0 = GENDER_F0[gender] * (1.0 + rng.uniform(-0.02, 0.02))
    voice = 0.25 * np.sin(2 * np.pi * f0 * t + rng.uniform(0, 2 * np.pi))
    x = 0.5 * env * tone + voice + noise_level * rng.standard_normal(n)
    return np.clip(x, -1.0, 1.0)


def synth_corpus(spec: SynthSpec, out_dir: str | Path) -> list[seqm.UtteranceRecord]:
    """Write WAVs, ``manifest.tsv`` (unified), ``source.tsv`` and ``scheme.yaml`` under ``out_dir``.

    Output is byte-identical for a fixed seed.
    """
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    scheme = synth_scheme()

    plan = []
    for (cat, level), n in sorted(spec.counts.items(), key=lambda kv: (int(kv[0][0]), kv[0][1])):
        plan.extend([(EmotionCategory(cat), level)] * n)

    sources: list[seqm.SourceRecord] = []
    for idx, (cat, level) in enumerate(plan):
        gender = "male" if rng.random() < 0.5 else "female"
        dur = spec.duration
        x = synth_signal(cat, level, gender, rng, dur, spec.sample_rate, spec.noise_level)
        lo, hi = spec.words_per_item
        words = rng.choice(_WORDS, size=int(rng.integers(lo, hi + 1)))
        uid = f"{idx:05d}"
        rel = f"wav/{uid}.wav"
        save_wav(Waveform(x, spec.sample_rate), out_dir / rel)
        split = "test" if rng.random() < spec.test_fraction else "train"
        sources.append(seqm.SourceRecord(
            id=uid,
            audio_path=rel,
            transcript=" ".join(words),
            label=cat.label,
            level=None if cat is EmotionCategory.NEUTRAL else level,
            gender=gender,
            split=split,
        ))

    seqm.write_source_manifest(sources, out_dir / "source.tsv")
    (out_dir / "scheme.yaml").write_text(_scheme_yaml(), encoding="utf-8")
    records = [seqm.unify_record(scheme, s) for s in sources]
    root = out_dir.resolve()
    records = [replace(r, audio_path=str(root / r.audio_path)) for r in records]
    seqm.write_manifest(records, out_dir / "manifest.tsv")
    return records


def synth_scheme() -> seqm.LabelScheme:
    return seqm.LabelScheme(
        name="synth",
        kind=seqm.SchemeKind.THREE_LEVEL,
        mapping={c.label: c for c in EmotionCategory},
    )


def _scheme_yaml() -> str:
    lines = ["name: synth", "kind: three-level", "labels:"]
    lines += [f"  {c.label}: {c.label}" for c in EmotionCategory]
    return "\n".join(lines) + "\n"
