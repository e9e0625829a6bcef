"""Finite-difference gradient suites for core ops, losses and the full model."""

from __future__ import annotations

from typing import Iterator

import torch

from . import diffcore, losses
from .diffcore import CHECK_DTYPE, GradCheckReport, grad_check
from .model import ModelConfig, build_model

H = 1e-4
OP_TOL = 1e-3
MODEL_TOL = 1e-2


def core_op_suite(seed: int = 0) -> Iterator[GradCheckReport]:
    for name, (f, inputs) in diffcore.core_op_cases(seed).items():
        yield grad_check(f, inputs, h=H, tol=OP_TOL, name=f"op/{name}")


def loss_suite(seed: int = 0) -> Iterator[GradCheckReport]:
    g = torch.Generator().manual_seed(seed)

    def r(*shape):
        return torch.randn(*shape, generator=g, dtype=CHECK_DTYPE)

    yield grad_check(lambda x: losses.ctc_loss(x, [0, 1, 1]), [r(6, 4)], H, OP_TOL, name="loss/ctc")
    yield grad_check(lambda x: losses.ctc_loss(x, []), [r(3, 3)], H, OP_TOL, name="loss/ctc-empty")
    yield grad_check(
        lambda x: losses.ctc_loss_batch(x, [[1, 2], [0]], input_lengths=[5, 3]),
        [r(2, 5, 4)], H, OP_TOL, name="loss/ctc-batch",
    )
    gold = torch.tensor([0, 3, 8])
    yield grad_check(lambda x: losses.focal_loss(x, gold, 2.0), [r(3, 9)], H, OP_TOL, name="loss/focal-g2")
    yield grad_check(lambda x: losses.focal_loss(x, gold, 10.0), [r(3, 9) * 0.3], H, OP_TOL, name="loss/focal-g10")
    gold_eis = torch.tensor([1.5, 2.5, 3.5, 0.0, 2.0], dtype=CHECK_DTYPE)
    yield grad_check(lambda p: losses.ccc_loss(p, gold_eis), [r(5) + 2], H, OP_TOL, name="loss/ccc")
    masked_gold = torch.tensor([1.5, -1.0, 3.5, -1.0, 2.0], dtype=CHECK_DTYPE)
    keep = masked_gold >= 0
    frozen_pred = r(5) + 2

    def with_frozen(p_lab, gold=masked_gold, frozen=frozen_pred):
        # masked slots are stop-gradient in the loss; hold them constant here
        full = frozen.clone()
        full = full.masked_scatter(gold >= 0, p_lab)
        return full

    yield grad_check(lambda p: losses.eis_loss(with_frozen(p), masked_gold).value, [(r(5) + 2)[keep]],
                     H, OP_TOL, name="loss/ccc-masked")

    w = losses.LossWeights()
    gold_g = torch.tensor([0, 1])

    gold3 = masked_gold[:3]

    def combined(e_logits, g_logits, p_logits, eis_lab):
        return losses.combined_loss(
            losses.focal_loss(e_logits, gold, 10.0),
            losses.eis_loss(with_frozen(eis_lab, gold3, frozen_pred[:3]), gold3).value,
            losses.ctc_loss(p_logits, [1, 0]),
            losses.focal_loss(g_logits, gold_g, 10.0),
            w,
        )

    yield grad_check(combined, [r(3, 9) * 0.3, r(2, 2), r(4, 3), r(2) + 2], H, OP_TOL, name="loss/combined-masked")


def model_suite(seed: int = 0, n_coords: int = 100, frames: int = 12) -> Iterator[GradCheckReport]:
    """Combined multitask loss of a tiny model (C=16, T=12, d_p=5) against central differences.

    The emotion batch holds one masked intensity label.  Its replacement is
    detached in the real loss, so the difference quotient is taken on a
    surrogate in which the masked prediction is frozen at its base value; the
    surrogate's autograd gradient is first checked to equal the real one.
    """
    cfg = ModelConfig.tiny(lexicon_size=5)
    model = build_model(cfg, seed, dtype=CHECK_DTYPE)
    g = torch.Generator().manual_seed(seed + 1)
    x_g = torch.randn(2, frames, cfg.n_mels, generator=g, dtype=CHECK_DTYPE)
    x_p = torch.randn(2, frames, cfg.n_mels, generator=g, dtype=CHECK_DTYPE)
    x_e = torch.randn(3, frames, cfg.n_mels, generator=g, dtype=CHECK_DTYPE)
    y_g = torch.tensor([0, 1])
    y_p = [[1, 2, 3], [4, 0]]
    y_e = torch.tensor([2, 4, 0])
    y_eis = torch.tensor([2.5, -1.0, 0.0], dtype=CHECK_DTYPE)
    masked = y_eis < 0
    names = [n for n, _ in model.named_parameters()]
    weights = losses.LossWeights()

    def loss(params, frozen_eis=None):
        state = dict(zip(names, params))
        out_g = torch.func.functional_call(model, state, (x_g,))
        out_p = torch.func.functional_call(model, state, (x_p,))
        out_e = torch.func.functional_call(model, state, (x_e,))
        eis = out_e.eis if frozen_eis is None else torch.where(masked, frozen_eis, out_e.eis)
        return losses.combined_loss(
            losses.focal_loss(out_e.esc_logits, y_e, 10.0),
            losses.eis_loss(eis, y_eis).value,
            losses.ctc_loss_batch(out_p.phoneme_logits, y_p),
            losses.focal_loss(out_g.gender_logits, y_g, 10.0),
            weights,
        )

    params = [p.detach() for p in model.parameters()]
    with torch.no_grad():
        frozen = model(x_e).eis.detach()

    leaves = [p.clone().requires_grad_(True) for p in params]
    real = torch.autograd.grad(loss(leaves), leaves, allow_unused=True)
    leaves2 = [p.clone().requires_grad_(True) for p in params]
    surrogate = torch.autograd.grad(loss(leaves2, frozen), leaves2, allow_unused=True)
    same = all(
        (a is None and b is None) or (a is not None and b is not None and torch.equal(a, b))
        for a, b in zip(real, surrogate)
    )
    yield GradCheckReport("model/detach-surrogate", 0.0 if same else float("inf"), 0.0, len(params), MODEL_TOL)
    yield grad_check(lambda *ps: loss(ps, frozen), params, H, MODEL_TOL, max_coords=n_coords, seed=seed,
                     name="model/end-to-end")


def run_all(seed: int = 0) -> list[GradCheckReport]:
    return [*core_op_suite(seed), *loss_suite(seed), *model_suite(seed)]
