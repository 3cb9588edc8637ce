"""Activation-guided query selection on E4 plus learnable auxiliary queries."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn


def sine_embedding(coords: Tensor, dim: int, temperature: float = 10000.0) -> Tensor:
    """Sinusoidal embedding of normalized ``(x, y)`` coordinates, shape (..., dim).

    The first half of the channels encodes y, the second half x, each as
    interleaved sin/cos at geometric frequencies.
    """
    half = dim // 2
    idx = torch.arange(half, dtype=coords.dtype, device=coords.device)
    freqs = temperature ** (2 * torch.div(idx, 2, rounding_mode="floor") / max(half, 1))

    def enc(v):
        a = v[..., None] * 2 * math.pi / freqs
        return torch.where(idx % 2 == 0, a.sin(), a.cos())

    out = torch.cat([enc(coords[..., 1]), enc(coords[..., 0])], dim=-1)
    if out.shape[-1] < dim:
        out = F.pad(out, (0, dim - out.shape[-1]))
    return out


def cell_centers(height: int, width: int, dtype=torch.float32) -> Tensor:
    """Row-major (height*width, 2) normalized ``(x, y)`` cell centers."""
    ys = (torch.arange(height, dtype=dtype) + 0.5) / height
    xs = (torch.arange(width, dtype=dtype) + 0.5) / width
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx.flatten(), gy.flatten()], dim=-1)


@dataclass
class QuerySet:
    embeddings: Tensor  # (B, N, C)
    positions: Tensor  # (B, N, 2), normalized (x, y)
    n_activation: int
    n_auxiliary: int
    indices: Tensor  # (B, N_a) selected E4 cells, row-major

    @property
    def n(self) -> int:
        return self.n_activation + self.n_auxiliary


class ActivationHead(nn.Module):
    """1x1 conv to a single pair-ness logit per E4 cell."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, 1, 1)

    def forward(self, e4: Tensor) -> Tensor:
        return self.conv(e4)[:, 0]  # logits (B, h, w)


def activation_map(e4: Tensor, head: ActivationHead) -> Tensor:
    return torch.sigmoid(head(e4))


def select_cells(prob: np.ndarray, k: int) -> np.ndarray:
    """Pick ``k`` cells of a 2-D map: 3x3 local maxima first by descending
    probability, then the best remaining cells; ties go to row-major order."""
    h, w = prob.shape
    if k > h * w:
        raise ValueError(f"cannot select {k} queries from {h * w} cells")
    padded = np.pad(prob, 1, constant_values=-np.inf)
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3))
    is_max = (prob >= windows.max(axis=(-1, -2))).flatten()
    flat = prob.flatten()
    idx = np.arange(flat.size)
    order = np.lexsort((idx, -flat, ~is_max))
    return order[:k]


class QueryProposer(nn.Module):
    def __init__(self, channels: int, n_activation: int, n_auxiliary: int):
        super().__init__()
        self.n_activation = n_activation
        self.n_auxiliary = n_auxiliary
        self.head = ActivationHead(channels)
        self.aux_embed = nn.Parameter(torch.randn(n_auxiliary, channels) * 0.02)
        # learnable positions live in logit space; sigmoid keeps them in [0, 1]
        self.aux_pos = nn.Parameter(torch.randn(n_auxiliary, 2) * 0.5)

    def forward(self, e4: Tensor) -> tuple[Tensor, QuerySet]:
        logits = self.head(e4)
        return logits, self.propose(e4, torch.sigmoid(logits))

    def propose(self, e4: Tensor, activation: Tensor) -> QuerySet:
        return propose_queries(e4, activation, self.n_activation, self.n_auxiliary, self)


def propose_queries(e4: Tensor, activation: Tensor, n_activation: int, n_auxiliary: int, proposer: QueryProposer) -> QuerySet:
    b, c, h, w = e4.shape
    probs = activation.detach().cpu().double().numpy()
    picked = np.stack([select_cells(probs[i], n_activation) for i in range(b)])
    indices = torch.as_tensor(picked, dtype=torch.long, device=e4.device)
    flat = e4.flatten(2).transpose(1, 2)  # (B, h*w, C)
    chosen = torch.gather(flat, 1, indices[..., None].expand(-1, -1, c))
    centers = cell_centers(h, w, dtype=e4.dtype).to(e4.device)[indices]
    aux = proposer.aux_embed[:n_auxiliary].to(e4.dtype)[None].expand(b, -1, -1)
    aux_pos = torch.sigmoid(proposer.aux_pos[:n_auxiliary].to(e4.dtype))[None].expand(b, -1, -1)
    return QuerySet(
        embeddings=torch.cat([chosen, aux], dim=1),
        positions=torch.cat([centers, aux_pos], dim=1),
        n_activation=n_activation,
        n_auxiliary=n_auxiliary,
        indices=indices,
    )
