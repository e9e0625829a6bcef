"""Log-mel filterbank front end and phoneme lexicons for the CTC task."""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import get_window

from .audio import SAMPLE_RATE, Waveform

N_MELS = 80
FRAME_LEN = 400  # 25 ms at 16 kHz
HOP_LEN = 160  # 10 ms
N_FFT = 512
EPS = 1e-10
SILENCE = "sil"


class FeatureLengthError(ValueError):
    pass


class LexiconBuildError(ValueError):
    pass


class OOVError(KeyError):
    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        super().__init__(f"out-of-vocabulary tokens: {', '.join(self.tokens)}")

    def __str__(self) -> str:
        return self.args[0]


@dataclass
class FeatureMatrix:
    frames: np.ndarray  # (T, 80) float32
    frame_len: int = FRAME_LEN
    hop_len: int = HOP_LEN
    sample_rate: int = SAMPLE_RATE

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def num_frames(n_samples: int, frame_len: int = FRAME_LEN, hop_len: int = HOP_LEN) -> int:
    if n_samples < frame_len:
        return 0
    return (n_samples - frame_len) // hop_len + 1


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(
    n_mels: int = N_MELS, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE,
    fmin: float = 0.0, fmax: float | None = None,
) -> np.ndarray:
    """Triangular filters with unit peak, evaluated at the FFT bin frequencies.  Shape (n_mels, n_fft//2+1)."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bins = np.linspace(0.0, sample_rate / 2, n_fft // 2 + 1)
    lower = (bins[None, :] - edges[:-2, None]) / (edges[1:-1, None] - edges[:-2, None])
    upper = (edges[2:, None] - bins[None, :]) / (edges[2:, None] - edges[1:-1, None])
    fb = np.maximum(0.0, np.minimum(lower, upper))
    fb.setflags(write=False)
    return fb


def mel_centers(n_mels: int = N_MELS, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2), n_mels + 2))[1:-1]


def mel_fbank(w: Waveform, normalize: bool = False) -> FeatureMatrix:
    """80-dim log-mel energies: 25 ms Hamming frames, 10 ms hop, 512-point power spectrum."""
    if w.sample_rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz input, got {w.sample_rate}; resample first")
    x = np.asarray(w.samples, dtype=np.float64)
    n = num_frames(len(x))
    if n == 0:
        raise FeatureLengthError(f"need at least {FRAME_LEN} samples, got {len(x)}")
    frames = np.lib.stride_tricks.sliding_window_view(x, FRAME_LEN)[::HOP_LEN][:n]
    window = get_window("hamming", FRAME_LEN, fftbins=True)
    power = np.abs(np.fft.rfft(frames * window, n=N_FFT, axis=1)) ** 2
    feats = np.log(power @ mel_filterbank().T + EPS)
    if normalize:
        feats = (feats - feats.mean(axis=0)) / (feats.std(axis=0) + 1e-5)
    return FeatureMatrix(feats.astype(np.float32))


def write_feature_cache(feats: FeatureMatrix | np.ndarray, path: str | Path) -> None:
    """Header ``<u4 T, <u4 dim`` then float32 little-endian row-major frames."""
    arr = feats.frames if isinstance(feats, FeatureMatrix) else feats
    arr = np.ascontiguousarray(arr, dtype="<f4")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<II", *arr.shape))
        fh.write(arr.tobytes())
    tmp.replace(path)


def read_feature_cache(path: str | Path) -> FeatureMatrix:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise OSError(f"{path}: truncated feature header")
    t, dim = struct.unpack("<II", raw[:8])
    payload = raw[8:]
    if len(payload) != 4 * t * dim:
        raise OSError(f"{path}: expected {t}x{dim} floats, file holds {len(payload) // 4}")
    return FeatureMatrix(np.frombuffer(payload, dtype="<f4").reshape(t, dim).astype(np.float32))


# -- lexicons ----------------------------------------------------------------

def _data_lines(name: str) -> list[str]:
    text = resources.files("speecheq.data").joinpath(name).read_text(encoding="utf-8")
    return [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith(("#", ";;;"))]


@dataclass(frozen=True)
class PhonemeLexicon:
    kind: str
    tokens: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(set(self.tokens)) != len(self.tokens):
            dup = sorted({t for t in self.tokens if self.tokens.count(t) > 1})
            raise LexiconBuildError(f"duplicate phonemes: {dup}")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def silence_id(self) -> int:
        return self._index[SILENCE]

    def id(self, phoneme: str) -> int:
        return self._index[phoneme]

    def encode(self, phonemes: Iterable[str]) -> list[int]:
        phonemes = list(phonemes)
        missing = [p for p in phonemes if p not in self._index]
        if missing:
            raise OOVError(missing)
        return [self._index[p] for p in phonemes]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(f"{t}\t{i}\n" for i, t in enumerate(self.tokens)), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, kind: str = "custom") -> "PhonemeLexicon":
        pairs = []
        for ln in Path(path).read_text(encoding="utf-8").splitlines():
            if not ln.strip():
                continue
            tok, idx = ln.split("\t")
            pairs.append((int(idx), tok))
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))):
            raise LexiconBuildError(f"{path}: ids are not dense 0..n-1")
        return cls(kind, tuple(t for _, t in pairs))


def _mandarin_tokens(initials: Sequence[str], finals: Sequence[str]) -> list[str]:
    return [SILENCE, *initials, *(f"{f}{tone}" for f in finals for tone in range(1, 6))]


def _english_tokens(phones: Sequence[str]) -> list[str]:
    out = [SILENCE]
    for ln in phones:
        ph, cls_ = ln.split()
        if cls_ == "V":
            out.extend([ph, f"{ph}0", f"{ph}1", f"{ph}2"])
        else:
            out.append(ph)
    return out


def build_lexicon(kind: str, initials: Sequence[str] | None = None, finals: Sequence[str] | None = None,
                  phones: Sequence[str] | None = None) -> PhonemeLexicon:
    """Build the Mandarin (initials + toned finals) or English (CMU) lexicon.

    Silence takes id 0.  Inventories default to the files shipped in
    ``speecheq/data``; pass lists to override.
    """
    if kind == "mandarin-ipft":
        toks = _mandarin_tokens(
            initials if initials is not None else _data_lines("mandarin_initials.txt"),
            finals if finals is not None else _data_lines("mandarin_finals.txt"),
        )
    elif kind == "english-cmu":
        toks = _english_tokens(phones if phones is not None else _data_lines("english_phones.txt"))
    else:
        raise LexiconBuildError(f"unknown lexicon kind {kind!r}")
    return PhonemeLexicon(kind, tuple(toks))


class G2P:
    """Table-driven grapheme-to-phoneme lookup."""

    def __init__(self, kind: str, table: dict[str, list[str]]):
        self.kind = kind
        self.table = table

    @classmethod
    def for_lexicon(cls, kind: str) -> "G2P":
        table: dict[str, list[str]] = {}
        if kind == "mandarin-ipft":
            for ln in _data_lines("mandarin_syllables.tsv"):
                syl, ini, fin = ln.split("\t")
                table[syl] = ([] if ini == "-" else [ini]) + [fin]
        elif kind == "english-cmu":
            for ln in _data_lines("english_cmudict.txt"):
                word, *phones = ln.split()
                table[word] = phones
        else:
            raise LexiconBuildError(f"unknown lexicon kind {kind!r}")
        return cls(kind, table)

    def phonemes(self, transcript: str) -> list[str]:
        out: list[str] = []
        missing: list[str] = []
        for tok in transcript.split():
            if self.kind == "mandarin-ipft":
                m = re.fullmatch(r"([a-zü:]+)([1-5]?)", tok.lower().replace("ü", "v").replace("u:", "v"))
                parts = self.table.get(m.group(1)) if m else None
                if parts is None:
                    missing.append(tok)
                    continue
                tone = m.group(2) or "5"
                out.extend(parts[:-1] + [parts[-1] + tone])
            else:
                word = re.sub(r"[^A-Z']", "", tok.upper())
                if not word:
                    continue
                if word not in self.table:
                    missing.append(tok)
                    continue
                out.extend(self.table[word])
        if missing:
            raise OOVError(missing)
        return out


def tokenize(lexicon: PhonemeLexicon, transcript: str, g2p: G2P | None = None) -> list[int]:
    g2p = g2p or G2P.for_lexicon(lexicon.kind)
    return lexicon.encode(g2p.phonemes(transcript))


def detokenize(lexicon: PhonemeLexicon, ids: Iterable[int]) -> list[str]:
    return lexicon.decode(ids)
