"""Superpixel transformer: patch embedding, masked pre-norm encoder, CLS head."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .posenc import PosEncConfig, build_posenc

PRESETS = {
    "ti": dict(hidden_dim=192, n_heads=3, mlp_dim=768),
    "s": dict(hidden_dim=384, n_heads=6, mlp_dim=1536),
    "b": dict(hidden_dim=768, n_heads=12, mlp_dim=3072),
}

LAYER_CHOICES = (1, 2, 4, 6, 8, 10, 12)


@dataclass(frozen=True)
class EncoderConfig:
    hidden_dim: int = 192
    n_layers: int = 4
    n_heads: int = 3
    mlp_dim: int = 768
    n_classes: int = 10
    dropout: float = 0.1
    h_chunk: int = 12
    w_chunk: int = 12
    max_patches: int = 98
    posenc: str = "sincos_xy"
    n_axes: int = 2
    printed_indexing: bool = False
    layer_norm_eps: float = 1e-6

    def __post_init__(self):
        if self.hidden_dim % self.n_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def patch_input_dim(self) -> int:
        # RGB plus the shape-mask channel
        return 4 * self.h_chunk * self.w_chunk

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "EncoderConfig":
        return cls(**{**PRESETS[name], **overrides})

    def posenc_config(self) -> PosEncConfig:
        return PosEncConfig(self.posenc, self.hidden_dim, self.n_axes, self.max_patches,
                            self.printed_indexing)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "EncoderConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for line in text.splitlines():
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            key, value = (s.strip() for s in line.split("=", 1))
            kind = types[key]
            if kind in ("bool", bool):
                kwargs[key] = value == "True"
            elif kind in ("int", int):
                kwargs[key] = int(value)
            elif kind in ("float", float):
                kwargs[key] = float(value)
            else:
                kwargs[key] = value
        return cls(**kwargs)


@dataclass
class PatchBatch:
    """Torch view of a batch of patch sets plus their attention masks."""

    present: torch.Tensor  # (B, M) bool
    centers: torch.Tensor  # (B, M, 2)
    patches: torch.Tensor  # (B, M, 3, h, w)
    patch_present: torch.Tensor  # (B, M, 1, h, w)
    mask: torch.Tensor  # (B, M+1, M+1) bool
    indices: torch.Tensor | None = None  # (B, M) long, slot ids for bert

    def to(self, dtype=None, device=None) -> "PatchBatch":
        def conv(t, floating):
            if t is None:
                return None
            return t.to(device=device, dtype=dtype if floating else None)
        return PatchBatch(conv(self.present, False), conv(self.centers, True), conv(self.patches, True),
                          conv(self.patch_present, True), conv(self.mask, False), conv(self.indices, False))

    def __len__(self):
        return self.present.shape[0]


@dataclass
class ForwardOutput:
    logits: torch.Tensor
    attentions: list | None = None
    scores: list | None = None


class MaskedSelfAttention(nn.Module):
    def __init__(self, hidden_dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = hidden_dim // n_heads
        self.query = nn.Linear(hidden_dim, hidden_dim)
        self.key = nn.Linear(hidden_dim, hidden_dim)
        self.value = nn.Linear(hidden_dim, hidden_dim)
        self.out = nn.Linear(hidden_dim, hidden_dim)

    def _split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.n_heads, self.head_dim).transpose(1, 2)

    def forward(self, x, mask, keep_scores: bool = False):
        q, k, v = self._split(self.query(x)), self._split(self.key(x)), self._split(self.value(x))
        scores = q @ k.transpose(-1, -2) * self.head_dim**-0.5
        if keep_scores and scores.requires_grad:
            scores.retain_grad()
        # exp() of this underflows to exactly 0
        blocked = torch.finfo(scores.dtype).min
        bias = torch.zeros(mask.shape, dtype=scores.dtype, device=scores.device).masked_fill(~mask, blocked)
        weights = torch.softmax(scores + bias[:, None], dim=-1)
        y = (weights @ v).transpose(1, 2).reshape(x.shape)
        return self.out(y), weights, scores


class EncoderBlock(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        h = config.hidden_dim
        self.ln_1 = nn.LayerNorm(h, eps=config.layer_norm_eps)
        self.attention = MaskedSelfAttention(h, config.n_heads)
        self.dropout = nn.Dropout(config.dropout)
        self.ln_2 = nn.LayerNorm(h, eps=config.layer_norm_eps)
        self.mlp = nn.Sequential(
            nn.Linear(h, config.mlp_dim),
            nn.GELU(),
            nn.Dropout(config.dropout),
            nn.Linear(config.mlp_dim, h),
            nn.Dropout(config.dropout),
        )

    def forward(self, x, mask, keep_scores: bool = False):
        a, weights, scores = self.attention(self.ln_1(x), mask, keep_scores)
        x = x + self.dropout(a)
        x = x + self.mlp(self.ln_2(x))
        return x, weights, scores


class SuperpixelTransformer(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        h = config.hidden_dim
        self.patch_projection = nn.Linear(config.patch_input_dim, h)
        self.cls_token = nn.Parameter(torch.zeros(h))
        self.posenc = build_posenc(config.posenc_config())
        self.dropout = nn.Dropout(config.dropout)
        self.layers = nn.ModuleList(EncoderBlock(config) for _ in range(config.n_layers))
        self.norm = nn.LayerNorm(h, eps=config.layer_norm_eps)
        self.head = nn.Linear(h, config.n_classes)
        self._init_weights()

    def _init_weights(self):
        """Same scheme as the reference ViT, so the grid/fcg/bert cell starts
        from the distribution that model starts from."""
        h = self.config.hidden_dim
        proj = self.patch_projection
        rgb = 3 * self.config.h_chunk * self.config.w_chunk
        with torch.no_grad():
            # RGB columns see the fan-in of an image patch; the shape channel starts silent
            nn.init.trunc_normal_(proj.weight, std=math.sqrt(1.0 / rgb))
            proj.weight[:, rgb:] = 0.0
        nn.init.zeros_(proj.bias)
        # xavier bound of the fused (3h, h) query/key/value matrix
        qkv_bound = math.sqrt(6.0 / (h + 3 * h))
        for block in self.layers:
            att = block.attention
            for lin in (att.query, att.key, att.value):
                nn.init.uniform_(lin.weight, -qkv_bound, qkv_bound)
                nn.init.zeros_(lin.bias)
            nn.init.zeros_(att.out.bias)
            for lin in (block.mlp[0], block.mlp[3]):
                nn.init.xavier_uniform_(lin.weight)
                nn.init.normal_(lin.bias, std=1e-6)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def embed_patches(self, batch: PatchBatch) -> torch.Tensor:
        x = torch.cat([batch.patches, batch.patch_present.to(batch.patches.dtype)], dim=2)
        x = self.patch_projection(x.flatten(2))
        return torch.where(batch.present[..., None], x, torch.zeros_like(x))

    def tokens(self, batch: PatchBatch) -> torch.Tensor:
        b, m = batch.present.shape
        indices = batch.indices
        if indices is None:
            indices = torch.arange(m, device=batch.present.device).expand(b, m)
        x = self.embed_patches(batch) + self.posenc(batch.centers, indices)
        x = torch.where(batch.present[..., None], x, torch.zeros_like(x))
        cls = self.cls_token.expand(b, 1, -1)
        return torch.cat([cls, x], dim=1)

    def forward(self, batch: PatchBatch, return_attention: bool = False,
                keep_scores: bool = False) -> ForwardOutput:
        m = batch.present.shape[1]
        if batch.mask.shape[-2:] != (m + 1, m + 1):
            raise ValueError(f"mask shape {tuple(batch.mask.shape)} does not fit {m} patches")
        x = self.dropout(self.tokens(batch))
        attentions, scores = [], []
        for layer in self.layers:
            x, w, s = layer(x, batch.mask, keep_scores)
            if return_attention:
                attentions.append(w)
            if keep_scores:
                scores.append(s)
        logits = self.head(self.norm(x)[:, 0])
        return ForwardOutput(logits, attentions if return_attention else None,
                             scores if keep_scores else None)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


_CKPT_MAGIC = b"SPTCKPT1"


def save_checkpoint(model: SuperpixelTransformer, path) -> None:
    """Write ``path`` (manifest + float32 LE payload) and ``path.config.txt``."""
    path = Path(path)
    manifest, chunks, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        data = tensor.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
        manifest.append({"name": name, "shape": list(tensor.shape), "dtype": "float32", "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = json.dumps(manifest).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for chunk in chunks:
            f.write(chunk)
    tmp.replace(path)
    path.with_name(path.name + ".config.txt").write_text(model.config.to_text())


def load_state(path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:8] != _CKPT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16:16 + hlen])
    base = 16 + hlen
    state = {}
    for entry in manifest:
        count = 1
        for s in entry["shape"]:
            count *= s
        arr = np.frombuffer(raw, "<f4", count, base + entry["offset"]).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy())
    return state


def load_checkpoint(path) -> SuperpixelTransformer:
    path = Path(path)
    config = EncoderConfig.from_text(path.with_name(path.name + ".config.txt").read_text())
    model = SuperpixelTransformer(config)
    model.load_state_dict(load_state(path))
    return model
