"""ECAPA-style backbone with residual BiGRU sub-blocks and four task heads."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch
from torch import nn

from . import diffcore

N_MELS = 80
D_GENDER = 2
D_ESC = 9


@dataclass(frozen=True)
class ModelConfig:
    lexicon_size: int = 202
    channels: int = 256
    bottleneck: int = 128
    scale: int = 8
    embedding: int = 192
    dilations: tuple[int, ...] = (2, 3, 4)
    front_kernel: int = 5
    res2_kernel: int = 3
    n_mels: int = N_MELS
    d_gender: int = D_GENDER
    d_esc: int = D_ESC

    def __post_init__(self) -> None:
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.channels % self.scale:
            raise ValueError(f"channels {self.channels} not divisible by res2 scale {self.scale}")
        if self.channels % 2:
            raise ValueError("channels must be even (split across two GRU directions)")
        if self.d_esc != D_ESC or self.d_gender != D_GENDER:
            raise ValueError("ESC head must have 9 classes and gender head 2")

    @property
    def gru_hidden(self) -> int:
        return self.channels // 2

    @property
    def vocab_size(self) -> int:
        """Phoneme head width: lexicon plus the CTC blank."""
        return self.lexicon_size + 1

    @property
    def min_frames(self) -> int:
        return self.front_kernel

    @classmethod
    def desk(cls, lexicon_size: int = 85, **kw) -> "ModelConfig":
        base = dict(channels=64, bottleneck=32, scale=8, embedding=64)
        base.update(kw)
        return cls(lexicon_size=lexicon_size, **base)

    @classmethod
    def tiny(cls, lexicon_size: int = 5, **kw) -> "ModelConfig":
        base = dict(channels=16, bottleneck=8, scale=4, embedding=8)
        base.update(kw)
        return cls(lexicon_size=lexicon_size, **base)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown model config keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class ModelOutputs:
    phoneme_logits: torch.Tensor  # (B, T, vocab)
    gender_logits: torch.Tensor  # (B, 2)
    esc_logits: torch.Tensor  # (B, 9)
    eis: torch.Tensor  # (B,)
    embedding: torch.Tensor  # (B, E)
    attention: torch.Tensor | None = field(default=None, repr=False)


class ChannelNorm(nn.Module):
    """LayerNorm over channels at each frame of a (B, C, T) tensor."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(x.transpose(1, 2)).transpose(1, 2)


class ResBiGRU(nn.Module):
    """``x + BiGRU(x)`` on (B, C, T); each direction has C/2 hidden units."""

    def __init__(self, channels: int):
        super().__init__()
        self.gru = nn.GRU(channels, channels // 2, batch_first=True, bidirectional=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y, _ = self.gru(x.transpose(1, 2))
        return x + y.transpose(1, 2)


def res_bigru(module: ResBiGRU, x: torch.Tensor) -> torch.Tensor:
    """Apply to a single (T, C) sequence."""
    return module(x.t().unsqueeze(0))[0].t()


class SEModule(nn.Module):
    def __init__(self, channels: int, bottleneck: int):
        super().__init__()
        self.down = nn.Linear(channels, bottleneck)
        self.up = nn.Linear(bottleneck, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        s = x.mean(dim=2)
        s = torch.sigmoid(self.up(torch.relu(self.down(s))))
        return x * s.unsqueeze(2)


class Res2Conv(nn.Module):
    def __init__(self, channels: int, kernel: int, dilation: int, scale: int):
        super().__init__()
        self.scale = scale
        width = channels // scale
        self.convs = nn.ModuleList(
            nn.Conv1d(width, width, kernel, dilation=dilation, padding="same") for _ in range(scale - 1)
        )
        self.norms = nn.ModuleList(ChannelNorm(width) for _ in range(scale - 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        chunks = torch.chunk(x, self.scale, dim=1)
        out = [chunks[0]]
        prev = None
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms), start=1):
            inp = chunks[i] if prev is None else chunks[i] + prev
            prev = torch.relu(norm(conv(inp)))
            out.append(prev)
        return torch.cat(out, dim=1)


class SERes2Block(nn.Module):
    """1x1 conv -> Res2 dilated conv -> 1x1 conv -> SE -> Res-BiGRU, plus the block skip.

    Every conv is followed by per-frame channel normalization, then ReLU.
    """

    def __init__(self, channels: int, kernel: int, dilation: int, scale: int, bottleneck: int):
        super().__init__()
        self.pre = nn.Conv1d(channels, channels, 1)
        self.pre_norm = ChannelNorm(channels)
        self.res2 = Res2Conv(channels, kernel, dilation, scale)
        self.post = nn.Conv1d(channels, channels, 1)
        self.post_norm = ChannelNorm(channels)
        self.se = SEModule(channels, bottleneck)
        self.bigru = ResBiGRU(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = torch.relu(self.pre_norm(self.pre(x)))
        y = self.res2(y)
        y = torch.relu(self.post_norm(self.post(y)))
        y = self.se(y)
        y = self.bigru(y)
        return x + y


class AttentiveStatsPool(nn.Module):
    def __init__(self, channels: int, bottleneck: int, eps: float = 1e-8):
        super().__init__()
        self.eps = eps
        self.attn_in = nn.Conv1d(channels, bottleneck, 1)
        self.attn_out = nn.Conv1d(bottleneck, channels, 1)

    def weights(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.attn_out(torch.tanh(self.attn_in(x))), dim=2)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        w = self.weights(x)
        mu = (w * x).sum(dim=2)
        var = (w * x * x).sum(dim=2) - mu * mu
        std = torch.sqrt(torch.clamp(var, min=self.eps))
        return torch.cat([mu, std], dim=1), w


def attentive_stat_pool(pool: AttentiveStatsPool, x: torch.Tensor) -> torch.Tensor:
    """Pool a single (T, C) sequence into a 2C vector."""
    out, _ = pool(x.t().unsqueeze(0))
    return out[0]


class SpeechEQModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config.channels
        self.front = nn.Conv1d(config.n_mels, c, config.front_kernel, padding="same")
        self.front_norm = ChannelNorm(c)
        self.blocks = nn.ModuleList(
            SERes2Block(c, config.res2_kernel, d, config.scale, config.bottleneck) for d in config.dilations
        )
        agg = c * len(config.dilations)
        self.aggregate = nn.Conv1d(agg, agg, 1)
        self.aggregate_norm = ChannelNorm(agg)
        self.pool = AttentiveStatsPool(agg, config.bottleneck)
        self.embed = nn.Linear(2 * agg, config.embedding)
        self.embed_norm = nn.LayerNorm(config.embedding)
        self.phoneme_head = nn.Linear(agg, config.vocab_size)
        self.gender_head = nn.Linear(config.embedding, config.d_gender)
        self.esc_head = nn.Linear(config.embedding, config.d_esc)
        self.eis_head = nn.Linear(config.embedding, 1)

    def frame_features(self, feats: torch.Tensor) -> torch.Tensor:
        """(B, T, n_mels) -> aggregated frame representation (B, 3C, T)."""
        if feats.dim() == 2:
            feats = feats.unsqueeze(0)
        if feats.dim() != 3 or feats.shape[-1] != self.config.n_mels:
            raise diffcore.ShapeError(
                f"expected (batch, T, {self.config.n_mels}) features, got {tuple(feats.shape)}"
            )
        if feats.shape[1] < self.config.min_frames:
            raise diffcore.ShapeError(f"need at least {self.config.min_frames} frames, got {feats.shape[1]}")
        x = torch.relu(self.front_norm(self.front(feats.transpose(1, 2))))
        outs = []
        for block in self.blocks:
            x = block(x)
            outs.append(x)
        return torch.relu(self.aggregate_norm(self.aggregate(torch.cat(outs, dim=1))))

    def forward(self, feats: torch.Tensor) -> ModelOutputs:
        h = self.frame_features(feats)
        phoneme = self.phoneme_head(h.transpose(1, 2))
        pooled, w = self.pool(h)
        emb = torch.relu(self.embed_norm(self.embed(pooled)))
        return ModelOutputs(
            phoneme_logits=phoneme,
            gender_logits=self.gender_head(emb),
            esc_logits=self.esc_head(emb),
            eis=self.eis_head(emb).squeeze(-1),
            embedding=emb,
            attention=w,
        )

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def init_parameters(model: nn.Module, seed: int) -> nn.Module:
    """Seeded init: uniform fan-in scaling for conv/affine weights, orthogonal recurrent matrices, zero biases."""
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if isinstance(_owner(model, name), nn.LayerNorm):
                p.fill_(1.0 if leaf == "weight" else 0.0)
            elif leaf.startswith("bias"):
                p.zero_()
            elif leaf.startswith("weight_hh"):
                hidden = p.shape[1]
                blocks = []
                for _ in range(p.shape[0] // hidden):
                    q, r = torch.linalg.qr(torch.randn(hidden, hidden, generator=g, dtype=torch.float64))
                    blocks.append(q * torch.sign(torch.diagonal(r)))
                p.copy_(torch.cat(blocks, dim=0).to(p.dtype))
            else:
                fan_in = p[0].numel() if p.dim() > 1 else p.numel()
                bound = (3.0 / fan_in) ** 0.5
                p.copy_((torch.rand(p.shape, generator=g, dtype=torch.float64) * 2 - 1).mul_(bound).to(p.dtype))
    return model


def _owner(model: nn.Module, param_name: str) -> nn.Module:
    mod = model
    for part in param_name.split(".")[:-1]:
        mod = getattr(mod, part)
    return mod


def build_model(config: ModelConfig, seed: int = 0, dtype: torch.dtype = diffcore.DTYPE) -> SpeechEQModel:
    model = SpeechEQModel(config)
    init_parameters(model, seed)
    return model.to(dtype)


# -- checkpoint file -----------------------------------------------------------

CKPT_MAGIC = b"SEQCKPT\x00"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, tensors: Mapping[str, torch.Tensor], header: Mapping[str, Any]) -> None:
    """Write ``magic | u32 version | u32 header_len | JSON header | f32 blobs | sha256``.

    The header carries the caller's metadata plus an index of
    ``{name, shape, offset}`` for each tensor blob.
    """
    index = []
    blobs = []
    offset = 0
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    head = dict(header)
    head["tensors"] = index
    head_bytes = json.dumps(head, sort_keys=True).encode("utf-8")
    body = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(head_bytes)) + head_bytes + b"".join(blobs)
    digest = hashlib.sha256(body).digest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body + digest)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    raw = Path(path).read_bytes()
    if len(raw) < len(CKPT_MAGIC) + 8 + 32 or not raw.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    version, hlen = struct.unpack("<II", body[len(CKPT_MAGIC):len(CKPT_MAGIC) + 8])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = len(CKPT_MAGIC) + 8
    header = json.loads(body[start:start + hlen].decode("utf-8"))
    payload = body[start + hlen:]
    tensors = {}
    for entry in header.pop("tensors"):
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=entry["offset"]).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy())
    return tensors, header


def save_model(path: str | Path, model: SpeechEQModel, seed: int = 0, step: int = 0, **meta) -> None:
    header = {"kind": "model", "config": model.config.to_dict(), "seed": seed, "step": step, **meta}
    save_checkpoint(path, {f"param/{k}": v for k, v in model.state_dict().items()}, header)


def load_model(path: str | Path, config: ModelConfig | None = None) -> tuple[SpeechEQModel, dict[str, Any]]:
    tensors, header = load_checkpoint(path)
    stored = ModelConfig.from_dict(header["config"])
    if config is not None and config != stored:
        raise CheckpointError(f"{path}: checkpoint config does not match requested model config")
    model = SpeechEQModel(stored)
    state = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    return model, header
