from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

from .decoder import AssociationLayer, DecoderState, LayerPrediction, OffsetHead, PredictionHeads, num_heads_for
from .features import ExtractorConfig, FeatureExtractor, FeatureMaps, flatten_pixel_features
from .queries import QueryProposer, QuerySet, cell_centers, sine_embedding


@dataclass(frozen=True)
class ModelConfig:
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    num_layers: int = 1
    n_activation: int = 20
    n_auxiliary: int = 4
    ffn_ratio: int = 4

    def validate(self) -> None:
        self.extractor.validate()
        if self.num_layers < 1:
            raise ValueError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.n_activation < 0 or self.n_auxiliary < 0 or self.n_activation + self.n_auxiliary == 0:
            raise ValueError("query counts must be nonnegative with a positive total")


@dataclass
class ModelOutput:
    features: FeatureMaps
    activation_logits: Tensor  # (B, h4, w4)
    queries: QuerySet
    initial: DecoderState  # layer-0 state, reused by the GT-guided pass
    predictions: list[LayerPrediction]
    offsets: Tensor  # (B, 2, h3, w3)

    @property
    def grid(self) -> tuple[int, int]:
        return tuple(self.features.E3.shape[-2:])


class PairDetector(nn.Module):
    """Query-based detector of shadow-object pairs."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        c = config.extractor.channel_count
        heads = num_heads_for(c)
        self.extractor = FeatureExtractor(config.extractor)
        self.proposer = QueryProposer(c, config.n_activation, config.n_auxiliary)
        self.layers = nn.ModuleList(AssociationLayer(c, heads, c * config.ffn_ratio) for _ in range(config.num_layers))
        self.heads = PredictionHeads(c)
        self.offset_head = OffsetHead(c)

    def forward(self, images: Tensor) -> ModelOutput:
        feats = self.extractor(images)
        act_logits, queries = self.proposer(feats.E4)
        state = self.initial_state(feats, queries)
        final = self.decode(state)
        return ModelOutput(
            features=feats,
            activation_logits=act_logits,
            queries=queries,
            initial=state,
            predictions=final.predictions,
            offsets=self.offset_head(feats.E3),
        )

    def initial_state(self, feats: FeatureMaps, queries: QuerySet) -> DecoderState:
        c = feats.channel_count
        h, w = feats.E3.shape[-2:]
        x_o, x_s = flatten_pixel_features(feats.E3)
        pixel_pos = sine_embedding(cell_centers(h, w, dtype=x_o.dtype).to(x_o.device), c)[None].expand(x_o.shape[0], -1, -1)
        query_pos = sine_embedding(queries.positions, c)
        q = queries.embeddings
        pred0 = self.heads(q, x_o, x_s, layer_index=0)
        return DecoderState(q, x_o, x_s, query_pos, pixel_pos, [pred0])

    def decode(self, state: DecoderState, gt_attn_override=None, override_rows=None) -> DecoderState:
        for layer in self.layers:
            state = layer(state, self.heads, gt_attn_override, override_rows)
        return state
