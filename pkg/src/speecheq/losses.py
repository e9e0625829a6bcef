"""Multitask losses: CTC for phonemes, focal loss for gender/ESC, 1 - CCC for intensity.

All losses take torch tensors and stay differentiable.  Intensity targets use
``-1`` as the "no label" sentinel; see :func:`mask_eis`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .seqm import EIS_MAX, EIS_MIN

NEG_INF = -1e30  # finite stand-in so unreachable DP cells keep finite gradients


class CTCInfeasibleError(ValueError):
    pass


class InsufficientBatchError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # intensity (CCC)
    beta: float = 0.1  # phoneme (CTC)
    eta: float = 0.1  # gender (focal)

    def __post_init__(self) -> None:
        for k in ("alpha", "beta", "eta"):
            if getattr(self, k) < 0:
                raise ValueError(f"loss weight {k} must be non-negative")


@dataclass(frozen=True)
class CtcConfig:
    lexicon_size: int

    @property
    def blank(self) -> int:
        return self.lexicon_size

    @property
    def vocab_size(self) -> int:
        return self.lexicon_size + 1


def ctc_min_frames(label: Sequence[int]) -> int:
    """Shortest input that can emit ``label``: one frame per token plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(label, label[1:]) if a == b)
    return len(label) + repeats


def ctc_loss_batch(
    logits: torch.Tensor,
    labels: Sequence[Sequence[int]],
    input_lengths: Sequence[int] | None = None,
    blank: int | None = None,
    reduction: str = "mean",
) -> torch.Tensor:
    """Negative log-likelihood of each label sequence under per-frame softmax outputs.

    ``logits`` is (B, T, V) (or (T, V) for one utterance); blank defaults to
    the last index.  The forward recursion runs in float64 over the
    blank-extended label ``[∅, l1, ∅, l2, ..., ∅]``.
    """
    if logits.dim() == 2:
        logits = logits.unsqueeze(0)
    bsz, t_max, vocab = logits.shape
    blank = vocab - 1 if blank is None else blank
    if len(labels) != bsz:
        raise ValueError(f"{len(labels)} labels for batch of {bsz}")
    lengths = [t_max] * bsz if input_lengths is None else [int(n) for n in input_lengths]
    for b, (lab, n) in enumerate(zip(labels, lengths)):
        if any(x == blank or not 0 <= x < vocab for x in lab):
            raise ValueError(f"label {b} contains blank or out-of-range ids")
        need = ctc_min_frames(lab)
        if n < need:
            raise CTCInfeasibleError(f"utterance {b}: {n} frames cannot emit {len(lab)} labels (need {need})")

    logp = torch.log_softmax(logits.to(torch.float64), dim=-1)
    s_max = 2 * max((len(lab) for lab in labels), default=0) + 1
    ext = torch.full((bsz, s_max), blank, dtype=torch.long)
    skip_ok = torch.zeros((bsz, s_max), dtype=torch.bool)
    for b, lab in enumerate(labels):
        for i, tok in enumerate(lab):
            s = 2 * i + 1
            ext[b, s] = tok
            if i > 0 and lab[i - 1] != tok:
                skip_ok[b, s] = True

    # emission log-probs gathered along the extended label: (B, T, S)
    emit = torch.gather(logp, 2, ext.unsqueeze(1).expand(bsz, t_max, s_max))
    neg = torch.full((bsz, 1), NEG_INF, dtype=torch.float64)
    neg2 = torch.full((bsz, 2), NEG_INF, dtype=torch.float64)
    skip_pen = torch.where(skip_ok, 0.0, NEG_INF).to(torch.float64)
    lengths_t = torch.tensor(lengths)

    alpha = torch.full((bsz, s_max), NEG_INF, dtype=torch.float64)
    init = torch.full((bsz, s_max), NEG_INF, dtype=torch.float64)
    init[:, 0] = 0.0
    if s_max > 1:
        init[:, 1] = 0.0
    alpha = init + emit[:, 0]
    for t in range(1, t_max):
        stay = alpha
        step = torch.cat([neg, alpha[:, :-1]], dim=1)
        jump = torch.cat([neg2, alpha[:, :-2]], dim=1)[:, :s_max] + skip_pen
        nxt = torch.logsumexp(torch.stack([stay, step, jump]), dim=0) + emit[:, t]
        alpha = torch.where((t < lengths_t).unsqueeze(1), nxt, alpha)

    losses = []
    for b, lab in enumerate(labels):
        last = 2 * len(lab)
        if last == 0:
            ll = alpha[b, 0]
        else:
            ll = torch.logsumexp(alpha[b, last - 1:last + 1], dim=0)
        losses.append(-ll)
    out = torch.stack(losses)
    if reduction == "mean":
        return out.mean()
    if reduction == "sum":
        return out.sum()
    return out


def ctc_loss(logits: torch.Tensor, label: Sequence[int], blank: int | None = None) -> torch.Tensor:
    """-log P(label | softmax(logits)) for one (T, V) utterance."""
    return ctc_loss_batch(logits.unsqueeze(0), [list(label)], blank=blank, reduction="none")[0]


def focal_loss(logits: torch.Tensor, gold: torch.Tensor | Sequence[int] | int, gamma: float = 10.0) -> torch.Tensor:
    """Batch mean of ``-(1 - p_t)**gamma * log p_t`` with ``p_t = softmax(logits)[gold]``."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    gold = torch.as_tensor(gold, dtype=torch.long).reshape(-1)
    n_cls = logits.shape[-1]
    if gold.shape[0] != logits.shape[0]:
        raise ValueError(f"{gold.shape[0]} targets for batch of {logits.shape[0]}")
    if (gold < 0).any() or (gold >= n_cls).any():
        raise IndexError(f"target id out of range [0, {n_cls})")
    logp = torch.log_softmax(logits, dim=-1).gather(1, gold.unsqueeze(1)).squeeze(1)
    if gamma == 0:
        return (-logp).mean()
    p = logp.exp()
    # clamp keeps (1 - p)**gamma differentiable when p rounds to exactly 1
    weight = torch.clamp(1.0 - p, min=0.0) ** gamma
    return (-weight * logp).mean()


def ccc(pred: torch.Tensor, gold: torch.Tensor) -> torch.Tensor:
    """Lin's concordance correlation coefficient with population moments."""
    pred = pred.reshape(-1)
    gold = gold.reshape(-1)
    if pred.shape != gold.shape:
        raise ValueError(f"pred {tuple(pred.shape)} vs gold {tuple(gold.shape)}")
    if pred.numel() < 2:
        raise InsufficientBatchError(f"CCC needs >= 2 elements, got {pred.numel()}")
    mp, mg = pred.mean(), gold.mean()
    vp = ((pred - mp) ** 2).mean()
    vg = ((gold - mg) ** 2).mean()
    cov = ((pred - mp) * (gold - mg)).mean()
    denom = torch.clamp(vp + vg + (mp - mg) ** 2, min=1e-12)
    return 2.0 * cov / denom


def ccc_loss(pred: torch.Tensor, gold: torch.Tensor) -> torch.Tensor:
    return 1.0 - ccc(pred, gold)


def clip_eis(x: torch.Tensor) -> torch.Tensor:
    return torch.clamp(x, EIS_MIN, EIS_MAX)


def mask_eis(gold: torch.Tensor, pred: torch.Tensor) -> torch.Tensor:
    """Replace sentinel (negative) gold entries by the clipped, detached prediction."""
    gold = gold.to(pred.dtype).reshape(pred.shape)
    masked = gold < 0
    return torch.where(masked, clip_eis(pred.detach()), gold)


@dataclass
class EisLoss:
    value: torch.Tensor
    skipped: bool
    n_labelled: int


def eis_loss(pred: torch.Tensor, gold: torch.Tensor) -> EisLoss:
    """``1 - CCC`` over a mini-batch whose gold may hold ``-1`` sentinels.

    Masked slots take the clipped prediction as gold and their prediction is
    detached, so they add no error and no gradient while still sitting in the
    batch moments.  With fewer than two labelled elements the term is skipped
    (value 0, no graph).
    """
    pred = pred.reshape(-1)
    gold = gold.to(pred.dtype).reshape(-1)
    masked = gold < 0
    n_lab = int((~masked).sum().item())
    if n_lab < 2:
        return EisLoss(pred.new_zeros(()), True, n_lab)
    filled = mask_eis(gold, pred)
    used = torch.where(masked, pred.detach(), pred)
    return EisLoss(ccc_loss(used, filled), False, n_lab)


def combined_loss(l_e, l_eis, l_p, l_g, weights: LossWeights = LossWeights()):
    return l_e + weights.alpha * l_eis + weights.beta * l_p + weights.eta * l_g
