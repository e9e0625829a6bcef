"""Inference, WA/UA/UAi/MSE metrics, stratified fold assignment and report rendering."""

from __future__ import annotations

import csv
import io
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .model import SpeechEQModel
from .seqm import IMPORTANT_CATEGORIES, EmotionCategory, UnifiedLabel, UtteranceRecord, clip_eis

logger = logging.getLogger(__name__)

N_CLASSES = len(EmotionCategory)
LEVEL_NAMES = ("Neutral", "Low", "Medium", "High")
LEVEL_VALUES = (0.0, 1.5, 2.5, 3.5)


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class Prediction:
    category: EmotionCategory
    eis: float


def argmax_lowest(values: Sequence[float]) -> int:
    """Index of the maximum; ties go to the lowest index."""
    return int(np.argmax(np.asarray(values)))


@torch.no_grad()
def infer(model: SpeechEQModel, feats: torch.Tensor | np.ndarray) -> Prediction:
    """ESC argmax and clipped EIS for one (T, 80) utterance.  Auxiliary heads are ignored."""
    return infer_batch(model, [feats])[0]


@torch.no_grad()
def infer_batch(model: SpeechEQModel, feats: Sequence[torch.Tensor | np.ndarray]) -> list[Prediction]:
    model.eval()
    dtype = next(model.parameters()).dtype
    by_len: dict[int, list[int]] = defaultdict(list)
    tensors = [torch.as_tensor(np.asarray(f)) for f in feats]
    for i, f in enumerate(tensors):
        by_len[f.shape[0]].append(i)
    out: list[Prediction | None] = [None] * len(tensors)
    for _, idx in sorted(by_len.items()):
        res = model(torch.stack([tensors[i] for i in idx]).to(dtype))
        logits = res.esc_logits.double().numpy()
        eis = res.eis.double().numpy()
        for j, i in enumerate(idx):
            out[i] = Prediction(EmotionCategory(argmax_lowest(logits[j])), clip_eis(float(eis[j])))
    return out  # type: ignore[return-value]


def greedy_ctc_decode(logits: torch.Tensor, blank: int | None = None) -> list[int]:
    """Best-path decode of (T, V) logits: collapse repeats, drop blanks."""
    blank = logits.shape[-1] - 1 if blank is None else blank
    best = logits.argmax(dim=-1).tolist()
    out, prev = [], None
    for k in best:
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


# -- metrics -------------------------------------------------------------------

@dataclass
class ConfusionMatrix:
    counts: np.ndarray = field(default_factory=lambda: np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64))

    def add(self, gold: int, pred: int) -> None:
        self.counts[int(gold), int(pred)] += 1

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def recalls(self) -> dict[int, float]:
        support = self.counts.sum(axis=1)
        return {c: float(self.counts[c, c] / support[c]) for c in range(len(support)) if support[c] > 0}


@dataclass
class EvalReport:
    wa: float
    ua: float
    uai: float
    mse: float
    recalls: dict[str, float]
    confusion: ConfusionMatrix
    n: int
    n_eis: int
    fold: str = "all"
    eis_by_level: dict[str, list[float]] = field(default_factory=dict, repr=False)

    def row(self) -> dict[str, str]:
        return {
            "fold": self.fold, "n": str(self.n), "WA": f"{self.wa:.4f}", "UA": f"{self.ua:.4f}",
            "UAi": f"{self.uai:.4f}" if not math.isnan(self.uai) else "nan",
            "MSE": f"{self.mse:.4f}" if not math.isnan(self.mse) else "nan",
        }


def level_name(eis: float) -> str:
    """Nearest of Neutral/Low/Medium/High by gold intensity."""
    return LEVEL_NAMES[int(np.argmin([abs(eis - v) for v in LEVEL_VALUES]))]


def compute_metrics(
    pairs: Sequence[tuple[UnifiedLabel, Prediction]],
    important: Iterable[EmotionCategory] = IMPORTANT_CATEGORIES,
    fold: str = "all",
) -> EvalReport:
    """WA = accuracy; UA = mean recall over classes present in gold; UAi = UA over ``important``;
    MSE over unmasked gold intensities only."""
    if not pairs:
        raise EvalError("no samples to evaluate")
    cm = ConfusionMatrix()
    sq_err = []
    by_level: dict[str, list[float]] = defaultdict(list)
    for gold, pred in pairs:
        cm.add(gold.category, pred.category)
        if not gold.masked:
            sq_err.append((pred.eis - gold.eis) ** 2)
            by_level[level_name(gold.eis)].append(pred.eis)
    # exact rationals, rounded once: a balanced split then gives WA == UA bit for bit
    support = cm.counts.sum(axis=1)
    exact = {c: Fraction(int(cm.counts[c, c]), int(support[c])) for c in range(N_CLASSES) if support[c] > 0}
    recalls = {c: float(r) for c, r in exact.items()}
    absent = [EmotionCategory(c).label for c in range(N_CLASSES) if c not in recalls]
    if absent and len(absent) < N_CLASSES:
        logger.debug("classes absent from gold, excluded from UA: %s", ", ".join(absent))
    wa = float(Fraction(int(np.trace(cm.counts)), cm.total))
    ua = float(sum(exact.values()) / len(exact))
    imp = [exact[int(c)] for c in important if int(c) in exact]
    uai = float(sum(imp) / len(imp)) if imp else float("nan")
    mse = float(np.mean(sq_err)) if sq_err else float("nan")
    return EvalReport(
        wa, ua, uai, mse, {EmotionCategory(c).label: r for c, r in recalls.items()}, cm,
        cm.total, len(sq_err), fold, dict(by_level),
    )


def average_reports(reports: Sequence[EvalReport]) -> dict[str, float]:
    if not reports:
        raise EvalError("no reports to average")
    keys = ("wa", "ua", "uai", "mse")
    return {k: float(np.nanmean([getattr(r, k) for r in reports])) for k in keys}


# -- folds ---------------------------------------------------------------------

@dataclass(frozen=True)
class Fold:
    index: int
    train: tuple[str, ...]
    test: tuple[str, ...]


def kfold_split(
    records: Sequence[UtteranceRecord],
    k: int,
    mode: str = "leave-one-fold-out",
    seed: int = 0,
    ratio: float = 4.0,
) -> list[Fold]:
    """Stratified fold assignment.

    ``leave-one-fold-out``: each record lands in exactly one of ``k`` test folds.
    ``random-ratio``: ``k`` independent stratified train:test splits at ``ratio``:1.
    """
    if k < 2:
        raise EvalError("k must be >= 2")
    by_class: dict[int, list[str]] = defaultdict(list)
    for r in records:
        by_class[int(r.label.category)].append(r.id)
    all_ids = [r.id for r in records]
    for c, ids in by_class.items():
        if len(ids) < k and mode == "leave-one-fold-out":
            logger.warning("class %s has %d items < k=%d; some folds will lack it",
                           EmotionCategory(c).label, len(ids), k)

    rng = np.random.default_rng(seed)
    folds: list[Fold] = []
    if mode == "leave-one-fold-out":
        assign: dict[str, int] = {}
        cursor = 0
        for c in sorted(by_class):
            ids = list(by_class[c])
            for j in rng.permutation(len(ids)):
                assign[ids[j]] = cursor % k
                cursor += 1
        for f in range(k):
            test = tuple(i for i in all_ids if assign[i] == f)
            train = tuple(i for i in all_ids if assign[i] != f)
            folds.append(Fold(f, train, test))
    elif mode == "random-ratio":
        frac = 1.0 / (ratio + 1.0)
        n_test = int(round(len(all_ids) * frac))
        classes = sorted(by_class)
        for f in range(k):
            quotas = _largest_remainder([len(by_class[c]) * frac for c in classes], n_test)
            test_set = set()
            for c, q in zip(classes, quotas):
                ids = by_class[c]
                test_set.update(ids[j] for j in rng.permutation(len(ids))[:q])
            folds.append(Fold(
                f, tuple(i for i in all_ids if i not in test_set), tuple(i for i in all_ids if i in test_set),
            ))
    else:
        raise EvalError(f"unknown fold mode {mode!r}")
    return folds


def _largest_remainder(shares: Sequence[float], total: int) -> list[int]:
    base = [int(math.floor(s)) for s in shares]
    rest = total - sum(base)
    order = sorted(range(len(shares)), key=lambda i: (-(shares[i] - base[i]), i))
    for i in order[:max(rest, 0)]:
        base[i] += 1
    return base


# -- rendering -----------------------------------------------------------------

TABLE_COLUMNS = ("fold", "n", "WA", "UA", "UAi", "MSE")


def render_table(reports: Sequence[EvalReport]) -> str:
    if not reports:
        raise EvalError("no reports to render")
    rows = [r.row() for r in reports]
    if len(reports) > 1:
        avg = average_reports(reports)
        rows.append({"fold": "mean", "n": str(sum(r.n for r in reports)),
                     "WA": f"{avg['wa']:.4f}", "UA": f"{avg['ua']:.4f}",
                     "UAi": f"{avg['uai']:.4f}", "MSE": f"{avg['mse']:.4f}"})
    widths = {c: max(len(c), *(len(r[c]) for r in rows)) for c in TABLE_COLUMNS}
    lines = ["  ".join(c.ljust(widths[c]) for c in TABLE_COLUMNS)]
    lines.append("  ".join("-" * widths[c] for c in TABLE_COLUMNS))
    lines += ["  ".join(r[c].ljust(widths[c]) for c in TABLE_COLUMNS) for r in rows]
    return "\n".join(lines) + "\n"


def render_delimited(reports: Sequence[EvalReport], delimiter: str = "\t") -> str:
    if not reports:
        raise EvalError("no reports to render")
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(TABLE_COLUMNS), delimiter=delimiter, lineterminator="\n")
    w.writeheader()
    w.writerows(r.row() for r in reports)
    return buf.getvalue()


def render_histogram(reports: Sequence[EvalReport], path: str | Path, bins: int = 40) -> Path:
    """Histogram of predicted intensity grouped by gold level (Neutral/Low/Medium/High)."""
    if not reports:
        raise EvalError("no reports to render")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    merged: dict[str, list[float]] = defaultdict(list)
    for r in reports:
        for lvl, vals in r.eis_by_level.items():
            merged[lvl].extend(vals)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    edges = np.linspace(0.0, 4.0, bins + 1)
    for lvl in LEVEL_NAMES:
        if merged.get(lvl):
            ax.hist(merged[lvl], bins=edges, alpha=0.6, label=f"{lvl} (n={len(merged[lvl])})")
    ax.set_xlabel("predicted intensity")
    ax.set_ylabel("count")
    ax.set_xlim(0, 4)
    ax.legend(fontsize=8)
    fig.tight_layout()
    # svg/png metadata carries a timestamp by default
    meta = {"Date": None} if path.suffix == ".svg" else {"Software": None}
    fig.savefig(path, metadata=meta)
    plt.close(fig)
    return path


def report_render(reports: Sequence[EvalReport], fmt: str, out: str | Path) -> Path:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "table":
        out.write_text(render_table(reports), encoding="utf-8")
    elif fmt == "delimited":
        out.write_text(render_delimited(reports), encoding="utf-8")
    elif fmt == "histogram":
        render_histogram(reports, out)
    else:
        raise EvalError(f"unknown report format {fmt!r}")
    return out
