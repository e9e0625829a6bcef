"""Slow, obviously-correct reference implementations used by the tests."""

import itertools
import math

import numpy as np


def ctc_brute_force(logits: np.ndarray, label, blank: int) -> float:
    """-log sum over every length-T path that collapses to ``label``."""
    T, V = logits.shape
    logp = logits - np.logaddexp.reduce(logits, axis=1, keepdims=True)
    target = tuple(label)
    scores = []
    for path in itertools.product(range(V), repeat=T):
        collapsed, prev = [], None
        for k in path:
            if k != prev and k != blank:
                collapsed.append(k)
            prev = k
        if tuple(collapsed) == target:
            scores.append(sum(logp[t, k] for t, k in enumerate(path)))
    if not scores:
        return math.inf
    return -float(np.logaddexp.reduce(scores))


def naive_metrics(gold, pred, n_classes=9, important=(0, 2, 4, 6)):
    """Recount WA/UA/UAi from scratch with plain loops."""
    correct = sum(1 for g, p in zip(gold, pred) if g == p)
    wa = correct / len(gold)
    recalls = {}
    for c in range(n_classes):
        idx = [i for i, g in enumerate(gold) if g == c]
        if idx:
            recalls[c] = sum(1 for i in idx if pred[i] == c) / len(idx)
    ua = sum(recalls.values()) / len(recalls)
    imp = [recalls[c] for c in important if c in recalls]
    uai = sum(imp) / len(imp) if imp else float("nan")
    return wa, ua, uai
