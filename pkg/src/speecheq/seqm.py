"""Unified emotion label space: 9 categories plus a scalar intensity in [0, 4].

Datasets annotate emotion intensity in incompatible ways (discrete levels,
continuous ratings, or not at all).  Everything here maps those onto one
category id and one intensity value so corpora can be merged into a single
training manifest.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import yaml

logger = logging.getLogger(__name__)

MASK_SENTINEL = -1.0
EIS_MIN = 0.0
EIS_MAX = 4.0

THREE_LEVEL = {"low": 1.5, "medium": 2.5, "high": 3.5}
TWO_LEVEL = {"low": 2.0, "high": 3.0}

MANIFEST_COLUMNS = (
    "id", "audio_path", "transcript", "dataset", "category", "eis", "masked", "gender", "split",
)
SOURCE_COLUMNS = ("id", "audio_path", "transcript", "label", "level", "gender", "split")


class LabelError(ValueError):
    """Source label cannot be resolved under its scheme."""


class SchemaError(ValueError):
    """Scheme or manifest content is structurally invalid."""


class CollisionError(ValueError):
    """Two records in a merged manifest share an utterance id."""


class EmotionCategory(enum.IntEnum):
    NEUTRAL = 0
    TRUST = 1
    JOY = 2
    ANTICIPATION = 3
    ANGER = 4
    DISGUST = 5
    SADNESS = 6
    SURPRISE = 7
    FEAR = 8

    @property
    def label(self) -> str:
        return self.name.capitalize()

    @classmethod
    def parse(cls, name: str | int) -> "EmotionCategory":
        if isinstance(name, int):
            return cls(name)
        key = name.strip().upper()
        if key.isdigit():
            return cls(int(key))
        try:
            return cls[key]
        except KeyError:
            raise LabelError(f"unknown emotion category {name!r}") from None


# Neutral, happy, angry, sad: the "important" subset used for UAi.
IMPORTANT_CATEGORIES = frozenset(
    {EmotionCategory.NEUTRAL, EmotionCategory.JOY, EmotionCategory.ANGER, EmotionCategory.SADNESS}
)


class SchemeKind(str, enum.Enum):
    THREE_LEVEL = "three-level"
    TWO_LEVEL = "two-level"
    CONTINUOUS = "continuous"
    UNSPECIFIED = "unspecified"


@dataclass(frozen=True)
class LabelScheme:
    """How one dataset's labels translate into the unified space.

    ``mapping`` sends source label names (case-insensitive) to categories.
    ``allow_missing_level`` lets a levelled scheme carry records with no level,
    which are then masked (e.g. corpora with partial intensity annotation).
    """

    name: str
    kind: SchemeKind
    mapping: Mapping[str, EmotionCategory]
    lo: float | None = None
    hi: float | None = None
    exclude: frozenset[EmotionCategory] = field(default_factory=frozenset)
    allow_missing_level: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "mapping", {k.strip().lower(): v for k, v in self.mapping.items()})
        if self.kind is SchemeKind.CONTINUOUS:
            if self.lo is None or self.hi is None:
                raise SchemaError(f"scheme {self.name!r}: continuous kind needs lo and hi")
            if not self.lo < self.hi:
                raise SchemaError(f"scheme {self.name!r}: degenerate range lo={self.lo} hi={self.hi}")

    def category(self, source_label: str) -> EmotionCategory:
        try:
            return self.mapping[source_label.strip().lower()]
        except KeyError:
            raise LabelError(f"label {source_label!r} not in scheme {self.name!r}") from None

    @classmethod
    def from_dict(cls, data: Mapping) -> "LabelScheme":
        try:
            kind = SchemeKind(data["kind"])
            mapping = {str(k): EmotionCategory.parse(v) for k, v in data["labels"].items()}
        except KeyError as exc:
            raise SchemaError(f"scheme missing key {exc}") from None
        except ValueError as exc:
            raise SchemaError(str(exc)) from None
        lo = hi = None
        if "range" in data:
            lo, hi = (float(v) for v in data["range"])
        known = {"name", "kind", "labels", "range", "exclude", "allow_missing_level"}
        extra = set(data) - known
        if extra:
            raise SchemaError(f"unknown scheme keys: {sorted(extra)}")
        return cls(
            name=str(data.get("name", "dataset")),
            kind=kind,
            mapping=mapping,
            lo=lo,
            hi=hi,
            exclude=frozenset(EmotionCategory.parse(c) for c in data.get("exclude", ())),
            allow_missing_level=bool(data.get("allow_missing_level", False)),
        )

    @classmethod
    def load(cls, path: str | Path) -> "LabelScheme":
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
        data.setdefault("name", Path(path).stem)
        return cls.from_dict(data)


@dataclass(frozen=True)
class UnifiedLabel:
    category: EmotionCategory
    eis: float
    masked: bool

    def __post_init__(self) -> None:
        if self.masked:
            if self.eis != MASK_SENTINEL:
                raise SchemaError("masked label must carry the -1 sentinel")
        elif not EIS_MIN <= self.eis <= EIS_MAX:
            raise SchemaError(f"eis {self.eis} outside [0, 4]")


@dataclass(frozen=True)
class UtteranceRecord:
    id: str
    audio_path: str
    transcript: str
    gender: str
    split: str
    label: UnifiedLabel
    dataset: str = ""

    def to_row(self) -> dict[str, str]:
        return {
            "id": self.id,
            "audio_path": self.audio_path,
            "transcript": self.transcript,
            "dataset": self.dataset,
            "category": self.label.category.label,
            "eis": repr(float(self.label.eis)),
            "masked": "1" if self.label.masked else "0",
            "gender": self.gender,
            "split": self.split,
        }

    @classmethod
    def from_row(cls, row: Mapping[str, str]) -> "UtteranceRecord":
        masked = row["masked"].strip() in ("1", "true", "True")
        label = UnifiedLabel(EmotionCategory.parse(row["category"]), float(row["eis"]), masked)
        return cls(
            id=row["id"],
            audio_path=row["audio_path"],
            transcript=row.get("transcript", ""),
            gender=_check_gender(row["gender"]),
            split=row.get("split", "train"),
            label=label,
            dataset=row.get("dataset", ""),
        )


@dataclass(frozen=True)
class SourceRecord:
    """A raw row of a single dataset before unification."""

    id: str
    audio_path: str
    transcript: str
    label: str
    level: str | float | None
    gender: str
    split: str = "train"


def _check_gender(value: str) -> str:
    g = value.strip().lower()
    if g in ("m", "male"):
        return "male"
    if g in ("f", "female"):
        return "female"
    raise SchemaError(f"gender must be male/female, got {value!r}")


def clip_eis(raw: float) -> float:
    if not math.isfinite(raw):
        raise ValueError(f"non-finite intensity {raw!r}")
    return min(max(float(raw), EIS_MIN), EIS_MAX)


def rescale_continuous(scheme: LabelScheme, raw: float) -> float:
    """Linearly map a rating in [lo, hi] onto [1, 4]; slightly out-of-range values are clamped."""
    lo, hi = scheme.lo, scheme.hi
    if lo is None or hi is None:
        raise SchemaError(f"scheme {scheme.name!r} is not continuous")
    if hi == lo:
        raise SchemaError(f"scheme {scheme.name!r}: degenerate range")
    if not math.isfinite(raw):
        raise ValueError(f"non-finite rating {raw!r}")
    if raw < lo or raw > hi:
        logger.warning("rating %s outside [%s, %s]; clamped", raw, lo, hi)
        raw = min(max(raw, lo), hi)
    return 1.0 + 3.0 * (raw - lo) / (hi - lo)


def _is_absent(level) -> bool:
    return level is None or (isinstance(level, str) and level.strip() in ("", "-", "none", "None"))


def unify_level_label(scheme: LabelScheme, source_label: str, source_level=None) -> UnifiedLabel:
    category = scheme.category(source_label)
    if scheme.kind is SchemeKind.UNSPECIFIED:
        if not _is_absent(source_level):
            raise SchemaError(
                f"scheme {scheme.name!r} is unspecified but got level {source_level!r}"
            )
        return UnifiedLabel(category, MASK_SENTINEL, True)
    if category is EmotionCategory.NEUTRAL:
        return UnifiedLabel(category, 0.0, False)
    if _is_absent(source_level):
        if scheme.allow_missing_level:
            return UnifiedLabel(category, MASK_SENTINEL, True)
        raise SchemaError(f"scheme {scheme.name!r} requires a level for {source_label!r}")

    if scheme.kind is SchemeKind.CONTINUOUS:
        return UnifiedLabel(category, rescale_continuous(scheme, float(source_level)), False)

    table = THREE_LEVEL if scheme.kind is SchemeKind.THREE_LEVEL else TWO_LEVEL
    token = str(source_level).strip().lower()
    if token not in table:
        raise SchemaError(f"level {source_level!r} not valid for {scheme.kind.value} scheme")
    return UnifiedLabel(category, table[token], False)


def unify_record(scheme: LabelScheme, rec: SourceRecord, dataset: str | None = None) -> UtteranceRecord:
    dataset = dataset or scheme.name
    return UtteranceRecord(
        id=rec.id,
        audio_path=rec.audio_path,
        transcript=rec.transcript,
        gender=_check_gender(rec.gender),
        split=rec.split,
        label=unify_level_label(scheme, rec.label, rec.level),
        dataset=dataset,
    )


def build_msud(
    sources: Sequence[tuple[Sequence[SourceRecord], LabelScheme]],
    namespace: bool = True,
) -> list[UtteranceRecord]:
    """Merge several datasets into one unified manifest.

    Ids are prefixed with the dataset name (``casia/0001``) when ``namespace``
    is set.  Categories listed in a scheme's ``exclude`` are dropped.
    """
    if not sources:
        raise SchemaError("build_msud needs at least one manifest")
    merged: list[UtteranceRecord] = []
    seen: dict[str, str] = {}
    for records, scheme in sources:
        for rec in records:
            unified = unify_record(scheme, rec)
            if unified.label.category in scheme.exclude:
                continue
            if namespace:
                unified = replace(unified, id=f"{scheme.name}/{rec.id}")
            if unified.id in seen:
                raise CollisionError(
                    f"utterance id {unified.id!r} from {scheme.name!r} collides with {seen[unified.id]!r}"
                )
            seen[unified.id] = scheme.name
            merged.append(unified)
    return merged


# -- manifest I/O ------------------------------------------------------------

def read_source_manifest(path: str | Path) -> list[SourceRecord]:
    path = Path(path)
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        missing = set(SOURCE_COLUMNS) - set(reader.fieldnames or ()) - {"level", "transcript", "split"}
        if missing:
            raise SchemaError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            level = row.get("level")
            out.append(SourceRecord(
                id=row["id"],
                audio_path=_resolve(path, row["audio_path"]),
                transcript=row.get("transcript") or "",
                label=row["label"],
                level=None if _is_absent(level) else level,
                gender=row["gender"],
                split=row.get("split") or "train",
            ))
    _check_unique(r.id for r in out)
    return out


def write_source_manifest(records: Iterable[SourceRecord], path: str | Path) -> None:
    rows = [
        {
            "id": r.id, "audio_path": r.audio_path, "transcript": r.transcript, "label": r.label,
            "level": "" if r.level is None else str(r.level), "gender": r.gender, "split": r.split,
        }
        for r in records
    ]
    _write_tsv(path, SOURCE_COLUMNS, rows)


def read_manifest(path: str | Path) -> list[UtteranceRecord]:
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise SchemaError(f"{path}: missing columns {sorted(missing)}")
        records = []
        for row in reader:
            row = dict(row)
            row["audio_path"] = _resolve(path, row["audio_path"])
            records.append(UtteranceRecord.from_row(row))
    _check_unique(r.id for r in records)
    return records


def write_manifest(records: Iterable[UtteranceRecord], path: str | Path) -> None:
    """Audio paths are stored relative to the manifest's directory."""
    base = Path(path).resolve().parent
    rows = []
    for r in records:
        row = r.to_row()
        row["audio_path"] = os.path.relpath(Path(row["audio_path"]).resolve(), base)
        rows.append(row)
    _write_tsv(path, MANIFEST_COLUMNS, rows)


def _resolve(manifest_path: Path, audio_path: str) -> str:
    p = Path(audio_path)
    if p.is_absolute():
        return str(p)
    return os.path.normpath(manifest_path.resolve().parent / p)


def _check_unique(ids: Iterable[str]) -> None:
    seen = set()
    for i in ids:
        if i in seen:
            raise CollisionError(f"duplicate utterance id {i!r}")
        seen.add(i)


def _write_tsv(path: str | Path, columns: Sequence[str], rows: Sequence[Mapping[str, str]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), delimiter="\t", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    tmp.replace(path)
