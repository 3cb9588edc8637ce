"""Association decoder: chained object/shadow dual-path layers and heads."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn


def num_heads_for(channels: int) -> int:
    """8 heads at 256 channels, scaled down proportionally, at least 1."""
    heads = max(1, channels * 8 // 256)
    while channels % heads:
        heads -= 1
    return heads


class Attention(nn.Module):
    """Multi-head scaled dot-product attention.

    ``mask`` is (B, Nq, Nk) bool, True where attending is allowed.  Rows that
    allow nothing are treated as unmasked.
    """

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q_proj = nn.Linear(channels, channels)
        self.k_proj = nn.Linear(channels, channels)
        self.v_proj = nn.Linear(channels, channels)
        self.out_proj = nn.Linear(channels, channels)

    def forward(self, query: Tensor, key: Tensor, value: Tensor, mask: Tensor | None = None) -> Tensor:
        b, nq, c = query.shape
        nk = key.shape[1]
        h = self.heads
        d = c // h
        q = self.q_proj(query).view(b, nq, h, d).transpose(1, 2)
        k = self.k_proj(key).view(b, nk, h, d).transpose(1, 2)
        v = self.v_proj(value).view(b, nk, h, d).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / d**0.5
        if mask is not None:
            if mask.shape != (b, nq, nk):
                raise ValueError(f"attention mask shape {tuple(mask.shape)} != {(b, nq, nk)}")
            empty = ~mask.any(dim=-1, keepdim=True)
            mask = mask | empty
            scores = scores.masked_fill(~mask[:, None], float("-inf"))
        out = scores.softmax(dim=-1) @ v
        return self.out_proj(out.transpose(1, 2).reshape(b, nq, c))


class FeedForward(nn.Module):
    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))


class DualPathLayer(nn.Module):
    """Pixel update (cross-attn on queries, FFN), then query update
    (masked cross-attn on pixels, self-attn, FFN). Post-norm residuals."""

    def __init__(self, channels: int, heads: int, ffn_hidden: int):
        super().__init__()
        self.pixel_cross = Attention(channels, heads)
        self.pixel_norm1 = nn.LayerNorm(channels)
        self.pixel_ffn = FeedForward(channels, ffn_hidden)
        self.pixel_norm2 = nn.LayerNorm(channels)
        self.query_cross = Attention(channels, heads)
        self.query_norm1 = nn.LayerNorm(channels)
        self.query_self = Attention(channels, heads)
        self.query_norm2 = nn.LayerNorm(channels)
        self.query_ffn = FeedForward(channels, ffn_hidden)
        self.query_norm3 = nn.LayerNorm(channels)

    def forward(self, q: Tensor, x: Tensor, q_pos: Tensor, x_pos: Tensor, attn_mask: Tensor | None):
        x = self.pixel_norm1(x + self.pixel_cross(x + x_pos, q + q_pos, q))
        x = self.pixel_norm2(x + self.pixel_ffn(x))
        q = self.query_norm1(q + self.query_cross(q + q_pos, x + x_pos, x, attn_mask))
        qp = q + q_pos
        q = self.query_norm2(q + self.query_self(qp, qp, q))
        q = self.query_norm3(q + self.query_ffn(q))
        return q, x


def dual_path_step(q, x, attn_mask, layer: DualPathLayer, q_pos=None, x_pos=None):
    q_pos = torch.zeros_like(q) if q_pos is None else q_pos
    x_pos = torch.zeros_like(x) if x_pos is None else x_pos
    return layer(q, x, q_pos, x_pos, attn_mask)


@dataclass
class LayerPrediction:
    object_mask_logits: Tensor  # (B, N, L)
    shadow_mask_logits: Tensor  # (B, N, L)
    class_logits: Tensor  # (B, N)
    layer_index: int


class PredictionHeads(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.mask_mlp = nn.Sequential(
            nn.Linear(channels, channels),
            nn.ReLU(),
            nn.Linear(channels, channels),
            nn.ReLU(),
            nn.Linear(channels, channels),
        )
        self.object_proj = nn.Linear(channels, channels)
        self.shadow_proj = nn.Linear(channels, channels)
        self.class_head = nn.Linear(channels, 1)

    def forward(self, q: Tensor, x_o: Tensor, x_s: Tensor, layer_index: int = 0) -> LayerPrediction:
        return predict_heads(self.mask_mlp(q), self.object_proj(x_o), self.shadow_proj(x_s), self.class_head(q)[..., 0], layer_index)


def predict_heads(mask_embed: Tensor, object_features: Tensor, shadow_features: Tensor, class_logits: Tensor, layer_index: int = 0) -> LayerPrediction:
    return LayerPrediction(
        object_mask_logits=mask_embed @ object_features.transpose(1, 2),
        shadow_mask_logits=mask_embed @ shadow_features.transpose(1, 2),
        class_logits=class_logits,
        layer_index=layer_index,
    )


@dataclass
class DecoderState:
    queries: Tensor  # (B, N, C)
    object_pixels: Tensor  # (B, L, C)
    shadow_pixels: Tensor  # (B, L, C)
    query_pos: Tensor
    pixel_pos: Tensor
    predictions: list[LayerPrediction] = field(default_factory=list)


def masks_from_logits(logits: Tensor) -> Tensor:
    """Attention masks from mask logits: allowed where probability >= 0.5."""
    return logits.detach() >= 0


class AssociationLayer(nn.Module):
    def __init__(self, channels: int, heads: int, ffn_hidden: int):
        super().__init__()
        self.object_path = DualPathLayer(channels, heads, ffn_hidden)
        self.shadow_path = DualPathLayer(channels, heads, ffn_hidden)

    def forward(
        self,
        state: DecoderState,
        heads: PredictionHeads,
        gt_attn_override: tuple[Tensor, Tensor] | None = None,
        override_rows: Tensor | None = None,
    ) -> DecoderState:
        """One association layer.

        ``gt_attn_override`` is an (object, shadow) pair of (B, N, L) bool masks.
        With ``override_rows`` (B, N) only those query rows are replaced.
        """
        if not state.predictions:
            raise ValueError("association layer needs a previous prediction")
        prev = state.predictions[-1]
        obj_mask = masks_from_logits(prev.object_mask_logits)
        sh_mask = masks_from_logits(prev.shadow_mask_logits)
        if gt_attn_override is not None:
            gt_obj, gt_sh = gt_attn_override
            if override_rows is None:
                obj_mask, sh_mask = gt_obj, gt_sh
            else:
                rows = override_rows[..., None]
                obj_mask = torch.where(rows, gt_obj, obj_mask)
                sh_mask = torch.where(rows, gt_sh, sh_mask)
        q, x_o = self.object_path(state.queries, state.object_pixels, state.query_pos, state.pixel_pos, obj_mask)
        q, x_s = self.shadow_path(q, state.shadow_pixels, state.query_pos, state.pixel_pos, sh_mask)
        pred = heads(q, x_o, x_s, layer_index=prev.layer_index + 1)
        return DecoderState(q, x_o, x_s, state.query_pos, state.pixel_pos, [*state.predictions, pred])


def association_layer(state, layer: AssociationLayer, heads: PredictionHeads, gt_attn_override=None, override_rows=None):
    return layer(state, heads, gt_attn_override, override_rows)


class OffsetHead(nn.Module):
    """3x3 conv on E3 to a 2-channel (dx, dy) map in normalized image units."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, 2, 3, padding=1)

    def forward(self, e3: Tensor) -> Tensor:
        return self.conv(e3)  # (B, 2, h, w)


def predict_offset_map(e3: Tensor, head: OffsetHead) -> Tensor:
    return head(e3)


def soft_centroid(prob: Tensor) -> Tensor:
    """Torch twin of ``masks.mask_centroid`` for (h, w) probabilities; returns (x, y)."""
    h, w = prob.shape
    weights = torch.where(prob >= 0.5, prob, torch.zeros_like(prob))
    total = weights.sum()
    ys = (torch.arange(h, dtype=prob.dtype, device=prob.device) + 0.5) / h
    xs = (torch.arange(w, dtype=prob.dtype, device=prob.device) + 0.5) / w
    if total <= 0:
        flat = int(torch.argmax(prob))
        return torch.stack([xs[flat % w], ys[flat // w]])
    return torch.stack([(weights.sum(0) * xs).sum() / total, (weights.sum(1) * ys).sum() / total])


def nearest_cell(center: Tensor, height: int, width: int) -> tuple[int, int]:
    """(row, col) of the cell whose center is nearest, clamped to the grid."""
    col = min(max(int(torch.floor(center[0] * width)), 0), width - 1)
    row = min(max(int(torch.floor(center[1] * height)), 0), height - 1)
    return row, col


def predicted_shadow_center(object_prob: Tensor, offsets: Tensor) -> Tensor:
    """Centroid of ``object_prob`` (h, w), held constant, plus the offset
    vector at the nearest cell of ``offsets`` (2, h, w)."""
    c = soft_centroid(object_prob.detach())
    row, col = nearest_cell(c, *offsets.shape[-2:])
    return c + offsets[:, row, col]
