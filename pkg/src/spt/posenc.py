"""Positional encodings summed with patch content embeddings.

Three strategies:

* ``bert``: a learned table indexed by patch slot.
* ``linear_xy``: an affine map of the (y, x) patch centre.
* ``sincos_xy``: per-axis sine/cosine features of the centre, followed by a
  learned square mixing matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

POSENC_STRATEGIES = ("bert", "linear_xy", "sincos_xy")


@dataclass(frozen=True)
class PosEncConfig:
    strategy: str
    hidden_dim: int
    n_axes: int = 2
    max_positions: int = 0
    printed_indexing: bool = False

    def __post_init__(self):
        if self.strategy not in POSENC_STRATEGIES:
            raise ValueError(f"unknown positional encoding {self.strategy!r}")
        if self.hidden_dim % 2:
            raise ValueError("hidden_dim must be even")
        if self.hidden_dim < 2 * self.n_axes:
            raise ValueError("hidden_dim must be at least 2 * n_axes")
        if self.strategy == "bert" and self.max_positions < 1:
            raise ValueError("bert encoding needs max_positions >= 1")


def sincos_div_term(hidden_dim: int, dtype=torch.float64) -> torch.Tensor:
    return torch.exp(torch.arange(hidden_dim, dtype=dtype) * (-math.log(10000.0) / hidden_dim))


def sincos_index_sets(hidden_dim: int, n_axes: int, printed: bool = False) -> dict:
    """Output indices written as cosine/sine for each axis.

    The default interleave gives axis ``i`` cosines at ``2i + 2d*t`` and sines
    at ``2i + 1 + 2d*t``. ``printed=True`` uses cosines at ``i + 2d*t`` and
    sines at ``i + 1 + 2d*t``, which overlap between axes once ``d >= 2``.
    """
    step = 2 * n_axes
    sets = {}
    for i in range(n_axes):
        base = i if printed else 2 * i
        sets[i] = (list(range(base, hidden_dim, step)), list(range(base + 1, hidden_dim, step)))
    return sets


def sincos_layout(hidden_dim: int, n_axes: int, printed: bool = False):
    """Resolve index sets into per-output (axis, is_sine) after all writes.

    Writes happen axis by axis, cosine before sine, so later writes win.
    Unwritten outputs get axis ``-1`` and stay zero.
    """
    axis = np.full(hidden_dim, -1, dtype=np.int64)
    is_sin = np.zeros(hidden_dim, dtype=bool)
    for i, (cos_idx, sin_idx) in sincos_index_sets(hidden_dim, n_axes, printed).items():
        axis[cos_idx] = i
        is_sin[cos_idx] = False
        axis[sin_idx] = i
        is_sin[sin_idx] = True
    return axis, is_sin


def sincos_features(centers: torch.Tensor, hidden_dim: int, n_axes: int = 2,
                    printed: bool = False) -> torch.Tensor:
    """Unmixed sine/cosine features, shape ``centers.shape[:-1] + (hidden_dim,)``."""
    d = min(n_axes, centers.shape[-1])
    axis, is_sin = sincos_layout(hidden_dim, d, printed)
    div = sincos_div_term(hidden_dim, centers.dtype).to(centers.device)
    written = torch.from_numpy(axis >= 0).to(centers.device)
    gather = torch.from_numpy(np.maximum(axis, 0)).to(centers.device)
    angles = centers[..., gather] * div
    feats = torch.where(torch.from_numpy(is_sin).to(centers.device), torch.sin(angles), torch.cos(angles))
    return torch.where(written, feats, torch.zeros_like(feats))


def encode_bert(patch_indices: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    if patch_indices.numel() and (patch_indices.min() < 0 or patch_indices.max() >= table.shape[0]):
        raise IndexError(f"patch index outside [0, {table.shape[0]})")
    return table[patch_indices]


def encode_linear_xy(centers: torch.Tensor, linear_map: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    return centers @ linear_map + bias


def encode_sincos_xy(centers: torch.Tensor, mixer: torch.Tensor, hidden_dim: int, n_axes: int = 2,
                     printed: bool = False) -> torch.Tensor:
    return sincos_features(centers, hidden_dim, n_axes, printed) @ mixer.T


class BertEncoding(nn.Module):
    def __init__(self, max_positions: int, hidden_dim: int):
        super().__init__()
        self.table = nn.Parameter(torch.empty(max_positions, hidden_dim))
        nn.init.trunc_normal_(self.table, std=0.02)

    def forward(self, centers, indices):
        return encode_bert(indices, self.table)


class LinearXYEncoding(nn.Module):
    def __init__(self, hidden_dim: int, n_axes: int = 2):
        super().__init__()
        self.proj = nn.Linear(n_axes, hidden_dim)
        nn.init.trunc_normal_(self.proj.weight, std=0.02)
        nn.init.zeros_(self.proj.bias)

    def forward(self, centers, indices):
        return encode_linear_xy(centers, self.proj.weight.T, self.proj.bias)


class SinCosXYEncoding(nn.Module):
    def __init__(self, hidden_dim: int, n_axes: int = 2, printed_indexing: bool = False):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.n_axes = n_axes
        self.printed_indexing = printed_indexing
        # plain dense-layer initialisation
        self.mixer = nn.Linear(hidden_dim, hidden_dim, bias=False)

    def forward(self, centers, indices):
        return encode_sincos_xy(centers, self.mixer.weight, self.hidden_dim, self.n_axes,
                                self.printed_indexing)


def build_posenc(config: PosEncConfig) -> nn.Module:
    if config.strategy == "bert":
        return BertEncoding(config.max_positions, config.hidden_dim)
    if config.strategy == "linear_xy":
        return LinearXYEncoding(config.hidden_dim, config.n_axes)
    return SinCosXYEncoding(config.hidden_dim, config.n_axes, config.printed_indexing)
