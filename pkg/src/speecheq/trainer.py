"""Multitask training loop: gender, phoneme and emotion streams feeding one shared model."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import torch

from . import audio, augment, features, losses, model as model_mod
from .augment import AugmentPolicy
from .losses import LossWeights
from .model import ModelConfig, SpeechEQModel
from .seqm import UtteranceRecord

logger = logging.getLogger(__name__)

STREAMS = ("gender", "phoneme", "emotion")
GENDER_IDS = {"male": 0, "female": 1}


class StreamExhaustedError(RuntimeError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


class ResumeMismatchError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 1e-5
    alpha: float = 1.0
    beta: float = 0.1
    eta: float = 0.1
    gamma: float = 10.0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    steps: int | None = None
    epochs: int = 1
    finetune_steps: int = 0
    finetune_beta: float = 0.01
    finetune_eta: float = 0.01
    finetune_lr: float = 1e-6
    stage: str = "initial"
    seed: int = 0
    checkpoint_every: int = 0
    grad_clip: float | None = None
    augment: AugmentPolicy | None = None

    # keys that may change between a run and its resumption
    _RESUMABLE = ("steps", "epochs", "finetune_steps", "checkpoint_every")

    def __post_init__(self) -> None:
        if isinstance(self.augment, Mapping):
            self.augment = AugmentPolicy(**self.augment)
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.stage not in ("initial", "fine-tune"):
            raise ValueError(f"stage must be 'initial' or 'fine-tune', got {self.stage!r}")
        LossWeights(self.alpha, self.beta, self.eta)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.eta)

    def to_dict(self) -> dict[str, Any]:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["adam_betas"] = list(self.adam_betas)
        d["augment"] = None if self.augment is None else {
            k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.augment).items()
        }
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown train config keys: {sorted(extra)}")
        return cls(**d)

    def fingerprint(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in self._RESUMABLE}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Schedule:
    lr: float
    beta: float
    eta: float


def schedule_at(config: TrainConfig, step: int, initial_steps: int) -> Schedule:
    """Constant during the initial stage, then linear towards the fine-tune targets."""
    start = 0 if config.stage == "fine-tune" else initial_steps
    if step < start:
        return Schedule(config.lr, config.beta, config.eta)
    n = max(config.finetune_steps, 1)
    frac = min(1.0, (step - start + 1) / n)

    def lerp(a: float, b: float) -> float:
        return a + (b - a) * frac

    return Schedule(
        lerp(config.lr, config.finetune_lr),
        lerp(config.beta, config.finetune_beta),
        lerp(config.eta, config.finetune_eta),
    )


# -- optimizer -----------------------------------------------------------------

@dataclass
class OptimizerState:
    exp_avg: dict[str, torch.Tensor]
    exp_avg_sq: dict[str, torch.Tensor]
    step: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Mapping[str, torch.Tensor], betas=(0.9, 0.999), eps=1e-8) -> "OptimizerState":
        return cls(
            {k: torch.zeros_like(p) for k, p in params.items()},
            {k: torch.zeros_like(p) for k, p in params.items()},
            0, tuple(betas), eps,
        )


@torch.no_grad()
def adam_update(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor | None],
    state: OptimizerState,
    lr: float,
    weight_decay: float = 0.0,
) -> None:
    """Bias-corrected Adam with decoupled weight decay, applied in place."""
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        m, v = state.exp_avg[name], state.exp_avg_sq[name]
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        if weight_decay:
            p.mul_(1.0 - lr * weight_decay)
        p.addcdiv_(m / c1, (v / c2).sqrt_().add_(state.eps), value=-lr)


# -- data streams --------------------------------------------------------------

@dataclass
class Example:
    uid: str
    feats: torch.Tensor  # (T, 80)
    target: Any
    wav: audio.Waveform | None = field(default=None, repr=False)


@dataclass
class Stream:
    name: str
    examples: list[Example]

    def __len__(self) -> int:
        return len(self.examples)

    def n_batches(self, batch_size: int) -> int:
        return max(1, math.ceil(len(self.examples) / batch_size))

    def batch(self, step: int, batch_size: int, seed: int) -> list[Example]:
        """Deterministic batch for a global step: epochs of seeded permutations, cycling as needed."""
        if not self.examples:
            raise StreamExhaustedError(f"stream {self.name!r} has no examples")
        nb = self.n_batches(batch_size)
        epoch, pos = divmod(step, nb)
        rng = np.random.default_rng([seed, _stable_id(self.name), epoch])
        order = rng.permutation(len(self.examples))
        idx = order[pos * batch_size:(pos + 1) * batch_size]
        return [self.examples[i] for i in idx]


def _stable_id(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")


def featurize_record(rec: UtteranceRecord) -> tuple[torch.Tensor, audio.Waveform]:
    w = audio.canonicalize(audio.load_wav(rec.audio_path))
    return torch.from_numpy(features.mel_fbank(w).frames), w


def build_streams(
    emotion: Sequence[UtteranceRecord],
    lexicon: features.PhonemeLexicon,
    gender: Sequence[UtteranceRecord] | None = None,
    phoneme: Sequence[UtteranceRecord] | None = None,
    keep_audio: bool = False,
) -> dict[str, Stream]:
    """Featurize records into the three training streams.

    The gender stream defaults to the emotion records; the phoneme stream
    defaults to emotion records whose transcripts tokenize cleanly.
    """
    cache: dict[str, tuple[torch.Tensor, audio.Waveform]] = {}

    def feats(rec: UtteranceRecord):
        if rec.audio_path not in cache:
            cache[rec.audio_path] = featurize_record(rec)
        f, w = cache[rec.audio_path]
        return f, (w if keep_audio else None)

    g2p = features.G2P.for_lexicon(lexicon.kind)
    emo = []
    for r in emotion:
        f, w = feats(r)
        emo.append(Example(r.id, f, (int(r.label.category), float(r.label.eis)), w))
    gen = []
    for r in (gender if gender is not None else emotion):
        f, w = feats(r)
        gen.append(Example(r.id, f, GENDER_IDS[r.gender], w))
    pho = []
    explicit = phoneme is not None
    for r in (phoneme if explicit else emotion):
        try:
            ids = features.tokenize(lexicon, r.transcript, g2p)
        except features.OOVError:
            if explicit:
                raise
            continue
        f, w = feats(r)
        if f.shape[0] < losses.ctc_min_frames(ids):
            logger.warning("dropping %s from phoneme stream: %d frames < label need", r.id, f.shape[0])
            continue
        pho.append(Example(r.id, f, ids, w))
    return {"gender": Stream("gender", gen), "phoneme": Stream("phoneme", pho), "emotion": Stream("emotion", emo)}


def _augmented(examples: list[Example], policy: AugmentPolicy, seed: int, step: int, stream: str) -> list[Example]:
    out = []
    for k, ex in enumerate(examples):
        if ex.wav is None:
            raise ValueError("augmentation needs streams built with keep_audio=True")
        rng = np.random.default_rng([seed, _stable_id(stream), step, k])
        w = augment.apply_policy(ex.wav, policy, rng)
        out.append(replace(ex, feats=torch.from_numpy(features.mel_fbank(w).frames)))
    return out


def forward_grouped(model: SpeechEQModel, examples: Sequence[Example]) -> list[model_mod.ModelOutputs]:
    """Run the model on equal-length groups; returns per-example outputs in input order."""
    by_len: dict[int, list[int]] = {}
    for i, ex in enumerate(examples):
        by_len.setdefault(ex.feats.shape[0], []).append(i)
    dtype = next(model.parameters()).dtype
    result: list[model_mod.ModelOutputs | None] = [None] * len(examples)
    for _, idx in sorted(by_len.items()):
        x = torch.stack([examples[i].feats for i in idx]).to(dtype)
        out = model(x)
        for j, i in enumerate(idx):
            result[i] = model_mod.ModelOutputs(
                out.phoneme_logits[j], out.gender_logits[j], out.esc_logits[j], out.eis[j], out.embedding[j]
            )
    return result  # type: ignore[return-value]


# -- one step ------------------------------------------------------------------

@dataclass
class StepReport:
    step: int
    loss_e: float
    loss_eis: float
    loss_p: float
    loss_g: float
    combined: float
    eis_skipped: bool
    lr: float
    alpha: float
    beta: float
    eta: float

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def compute_losses(model: SpeechEQModel, batches: Mapping[str, Sequence[Example]], weights: LossWeights,
                   gamma: float) -> tuple[torch.Tensor, dict[str, Any]]:
    """Three forward passes, label-ignore on intensity, four losses merged into one scalar."""
    for name in STREAMS:
        if not batches.get(name):
            raise StreamExhaustedError(f"empty {name} batch")

    g_out = forward_grouped(model, batches["gender"])
    p_out = forward_grouped(model, batches["phoneme"])
    e_out = forward_grouped(model, batches["emotion"])

    g_logits = torch.stack([o.gender_logits for o in g_out])
    l_g = losses.focal_loss(g_logits, [ex.target for ex in batches["gender"]], gamma)

    l_p = torch.stack([
        losses.ctc_loss(o.phoneme_logits, ex.target) for o, ex in zip(p_out, batches["phoneme"])
    ]).mean()

    e_logits = torch.stack([o.esc_logits for o in e_out])
    l_e = losses.focal_loss(e_logits, [ex.target[0] for ex in batches["emotion"]], gamma)

    pred = torch.stack([o.eis for o in e_out])
    gold = torch.tensor([ex.target[1] for ex in batches["emotion"]], dtype=pred.dtype)
    eis = losses.eis_loss(pred, gold)

    parts = [t.to(torch.float64) for t in (l_e, eis.value, l_p, l_g)]
    total = losses.combined_loss(*parts, weights)
    info = {
        "loss_e": parts[0].item(), "loss_eis": parts[1].item(), "loss_p": parts[2].item(),
        "loss_g": parts[3].item(), "combined": total.item(), "eis_skipped": eis.skipped,
    }
    return total, info


def train_step(
    model: SpeechEQModel,
    opt: OptimizerState,
    batches: Mapping[str, Sequence[Example]],
    config: TrainConfig,
    sched: Schedule | None = None,
    step: int = 0,
    dump_dir: str | Path | None = None,
) -> StepReport:
    sched = sched or Schedule(config.lr, config.beta, config.eta)
    weights = LossWeights(config.alpha, sched.beta, sched.eta)
    model.train()
    params = dict(model.named_parameters())
    for p in params.values():
        p.grad = None
    total, info = compute_losses(model, batches, weights, config.gamma)
    if not math.isfinite(info["combined"]):
        _dump(dump_dir, step, info, batches)
        raise NonFiniteLossError(f"step {step}: non-finite loss {info}")
    total.backward()
    grads = {k: p.grad for k, p in params.items()}
    if config.grad_clip:
        torch.nn.utils.clip_grad_norm_([g for g in grads.values() if g is not None], config.grad_clip)
    adam_update(params, grads, opt, sched.lr, config.weight_decay)
    return StepReport(step=step, lr=sched.lr, alpha=config.alpha, beta=sched.beta, eta=sched.eta, **info)


def _dump(dump_dir, step, info, batches) -> None:
    if dump_dir is None:
        return
    path = Path(dump_dir) / f"nonfinite_step{step}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({
        "step": step, "losses": info, "batch_ids": {k: [e.uid for e in v] for k, v in batches.items()},
    }, indent=2))


def make_batches(streams: Mapping[str, Stream], step: int, config: TrainConfig) -> dict[str, list[Example]]:
    batches = {name: streams[name].batch(step, config.batch_size, config.seed) for name in STREAMS}
    if config.augment is not None:
        batches = {k: _augmented(v, config.augment, config.seed, step, k) for k, v in batches.items()}
    return batches


# -- full run ------------------------------------------------------------------

@dataclass
class TrainState:
    model: SpeechEQModel
    opt: OptimizerState
    step: int = 0


def new_state(model_config: ModelConfig, config: TrainConfig) -> TrainState:
    m = model_mod.build_model(model_config, config.seed)
    opt = OptimizerState.zeros_like(dict(m.named_parameters()), config.adam_betas, config.adam_eps)
    return TrainState(m, opt, 0)


def save_state(path: str | Path, state: TrainState, config: TrainConfig) -> None:
    tensors = {f"param/{k}": v for k, v in state.model.state_dict().items()}
    tensors.update({f"adam_m/{k}": v for k, v in state.opt.exp_avg.items()})
    tensors.update({f"adam_v/{k}": v for k, v in state.opt.exp_avg_sq.items()})
    header = {
        "kind": "train-state",
        "config": state.model.config.to_dict(),
        "train_config": config.to_dict(),
        "fingerprint": config.fingerprint(),
        "seed": config.seed,
        "step": state.step,
        "opt_step": state.opt.step,
    }
    model_mod.save_checkpoint(path, tensors, header)


def load_state(path: str | Path, config: TrainConfig) -> TrainState:
    tensors, header = model_mod.load_checkpoint(path)
    if header.get("kind") != "train-state":
        raise model_mod.CheckpointError(f"{path}: not a training checkpoint")
    if header["fingerprint"] != config.fingerprint():
        raise ResumeMismatchError(f"{path}: training config differs from the checkpointed run")
    m = SpeechEQModel(ModelConfig.from_dict(header["config"]))
    m.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("param/")})
    params = dict(m.named_parameters())
    opt = OptimizerState(
        {k: tensors[f"adam_m/{k}"] for k in params},
        {k: tensors[f"adam_v/{k}"] for k in params},
        int(header["opt_step"]), tuple(config.adam_betas), config.adam_eps,
    )
    return TrainState(m, opt, int(header["step"]))


def total_steps(config: TrainConfig, streams: Mapping[str, Stream]) -> tuple[int, int]:
    """(initial-stage steps, total steps)."""
    initial = config.steps if config.steps is not None else config.epochs * streams["emotion"].n_batches(config.batch_size)
    if config.stage == "fine-tune":
        return 0, config.finetune_steps
    return initial, initial + config.finetune_steps


def run_training(
    streams: Mapping[str, Stream],
    model_config: ModelConfig,
    config: TrainConfig,
    out_dir: str | Path,
    resume: str | Path | None = None,
    callback=None,
) -> TrainState:
    """Train, writing ``metrics.jsonl`` (one record per step) and checkpoints under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)
    if resume is not None:
        state = load_state(resume, config)
        if state.model.config != model_config:
            raise ResumeMismatchError("model config differs from the checkpointed run")
    else:
        state = new_state(model_config, config)
    initial, total = total_steps(config, streams)
    log_path = out_dir / "metrics.jsonl"
    mode = "a" if resume is not None else "w"
    if resume is not None and log_path.exists():
        _truncate_log(log_path, state.step)
    with open(log_path, mode, encoding="utf-8") as log:
        if resume is None:
            log.write(json.dumps({"header": True, "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
                                  "seed": config.seed, "fingerprint": config.fingerprint()}) + "\n")
        while state.step < total:
            sched = schedule_at(config, state.step, initial)
            batches = make_batches(streams, state.step, config)
            report = train_step(state.model, state.opt, batches, config, sched, state.step, out_dir)
            state.step += 1
            log.write(json.dumps(report.to_dict(), sort_keys=True) + "\n")
            log.flush()
            if callback is not None:
                callback(state, report)
            if config.checkpoint_every and state.step % config.checkpoint_every == 0:
                save_state(out_dir / f"ckpt_step{state.step:06d}.bin", state, config)
    save_state(out_dir / "last.bin", state, config)
    model_mod.save_model(out_dir / "model.bin", state.model, config.seed, state.step)
    return state


def _truncate_log(path: Path, step: int) -> None:
    # a resume from an older checkpoint replays later steps; drop their stale rows
    kept = [
        line for line in path.read_text(encoding="utf-8").splitlines(keepends=True)
        if line.strip() and json.loads(line).get("step", -1) < step
    ]
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("".join(kept), encoding="utf-8")
    tmp.replace(path)


def read_metrics(path: str | Path) -> list[dict[str, Any]]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        rec = json.loads(line)
        if not rec.get("header"):
            rows.append(rec)
    return rows
