"""Deformable-attention encoder/decoder over the fused feature levels.

The encoder self-attends over the flattened stride-8/16/32 tokens; the
decoder refines prompt-derived queries by sampling the encoded memory at
learned offsets around box-shaped reference points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import HIDDEN_DIM
from .errors import ValidationError
from .ops import inverse_sigmoid

NUM_LAYERS = 4  # encoder and decoder depth
NUM_HEADS = 8
NUM_POINTS = 4  # sampling points per level per head
FFN_DIM = 512
ENCODER_LEVEL_IDS = (2, 3, 4)  # strides 8/16/32


def deformable_sample(
    value: torch.Tensor,
    spatial_shapes: list[tuple[int, int]],
    sampling_locations: torch.Tensor,
    attention_weights: torch.Tensor,
) -> torch.Tensor:
    """Gather bilinear samples of multi-level value tokens and combine them.

    value: (total_tokens, n_heads, head_dim), levels concatenated in
        spatial_shapes order
    sampling_locations: (n_query, n_heads, n_levels, n_points, 2),
        normalized to [0, 1]; out-of-range locations clamp to the border
    attention_weights: (n_query, n_heads, n_levels, n_points)

    Returns (n_query, n_heads * head_dim).
    """
    n_query, n_heads, n_levels, n_points, _ = sampling_locations.shape
    head_dim = value.shape[-1]
    splits = [h * w for h, w in spatial_shapes]
    value_per_level = value.split(splits, dim=0)

    samples = []
    for lvl, (h, w) in enumerate(spatial_shapes):
        # (n_heads, head_dim, h, w)
        v = value_per_level[lvl].view(h, w, n_heads, head_dim).permute(2, 3, 0, 1)
        # grid_sample expects [-1, 1] coords; align_corners=False puts pixel
        # centers at (i + 0.5) / w, matching the normalized token grid
        grid = 2.0 * sampling_locations[:, :, lvl] - 1.0  # (n_query, n_heads, n_points, 2)
        grid = grid.permute(1, 0, 2, 3)  # (n_heads, n_query, n_points, 2)
        sampled = F.grid_sample(
            v, grid, mode="bilinear", padding_mode="border", align_corners=False
        )  # (n_heads, head_dim, n_query, n_points)
        samples.append(sampled)
    # (n_heads, head_dim, n_query, n_levels, n_points)
    stacked = torch.stack(samples, dim=3)
    weights = attention_weights.permute(1, 0, 2, 3).unsqueeze(1)
    out = (stacked * weights).sum(dim=(3, 4))  # (n_heads, head_dim, n_query)
    return out.permute(2, 0, 1).reshape(n_query, n_heads * head_dim)


class MultiScaleDeformableAttention(nn.Module):
    """Per query, K sampling offsets and weights per level and head, predicted
    linearly from the query; weights softmax-normalized over levels x points."""

    def __init__(
        self,
        hidden_dim: int = HIDDEN_DIM,
        num_heads: int = NUM_HEADS,
        num_levels: int = len(ENCODER_LEVEL_IDS),
        num_points: int = NUM_POINTS,
    ):
        super().__init__()
        if hidden_dim % num_heads:
            raise ValidationError("hidden_dim must be divisible by num_heads")
        self.num_heads = num_heads
        self.num_levels = num_levels
        self.num_points = num_points
        self.head_dim = hidden_dim // num_heads
        self.sampling_offsets = nn.Linear(hidden_dim, num_heads * num_levels * num_points * 2)
        self.attention_weights = nn.Linear(hidden_dim, num_heads * num_levels * num_points)
        self.value_proj = nn.Linear(hidden_dim, hidden_dim)
        self.output_proj = nn.Linear(hidden_dim, hidden_dim)
        self._reset_parameters()

    def _reset_parameters(self):
        nn.init.constant_(self.sampling_offsets.weight, 0.0)
        thetas = torch.arange(self.num_heads, dtype=torch.float32) * (
            2.0 * math.pi / self.num_heads
        )
        grid = torch.stack([thetas.cos(), thetas.sin()], dim=-1)
        grid = (grid / grid.abs().max(-1, keepdim=True)[0]).view(self.num_heads, 1, 1, 2)
        grid = grid.repeat(1, self.num_levels, self.num_points, 1)
        for p in range(self.num_points):
            grid[:, :, p, :] *= p + 1
        with torch.no_grad():
            self.sampling_offsets.bias.copy_(grid.reshape(-1))
        nn.init.constant_(self.attention_weights.weight, 0.0)
        nn.init.constant_(self.attention_weights.bias, 0.0)
        nn.init.xavier_uniform_(self.value_proj.weight)
        nn.init.constant_(self.value_proj.bias, 0.0)
        nn.init.xavier_uniform_(self.output_proj.weight)
        nn.init.constant_(self.output_proj.bias, 0.0)

    def sampling_locations(self, queries, reference_points, spatial_shapes):
        """Reference points plus predicted offsets, per head/level/point."""
        n = queries.shape[0]
        offsets = self.sampling_offsets(queries).view(
            n, self.num_heads, self.num_levels, self.num_points, 2
        )
        ref = reference_points.clamp(0.0, 1.0)
        if ref.shape[-1] == 2:
            normalizer = torch.tensor(
                [[w, h] for h, w in spatial_shapes],
                dtype=queries.dtype,
                device=queries.device,
            )  # (n_levels, 2) as (x, y)
            loc = ref[:, None, None, None, :] + offsets / normalizer[None, None, :, None, :]
        elif ref.shape[-1] == 4:
            # offsets scale with the reference box size
            loc = (
                ref[:, None, None, None, :2]
                + offsets / self.num_points * ref[:, None, None, None, 2:] * 0.5
            )
        else:
            raise ValidationError("reference points must have 2 or 4 coordinates")
        return loc

    def forward(self, queries, reference_points, memory_tokens, spatial_shapes, query_pos=None):
        """queries: (N, C); reference_points: (N, 2) or (N, 4) normalized;
        memory_tokens: (total, C). Returns (N, C)."""
        if not torch.isfinite(memory_tokens).all():
            raise ValidationError("non-finite memory tokens")
        q = queries if query_pos is None else queries + query_pos
        n = q.shape[0]
        value = self.value_proj(memory_tokens).view(-1, self.num_heads, self.head_dim)
        weights = self.attention_weights(q).view(
            n, self.num_heads, self.num_levels * self.num_points
        )
        weights = torch.softmax(weights, dim=-1).view(
            n, self.num_heads, self.num_levels, self.num_points
        )
        loc = self.sampling_locations(q, reference_points, spatial_shapes)
        out = deformable_sample(value, spatial_shapes, loc, weights)
        return self.output_proj(out)


def sine_position_2d(h: int, w: int, dim: int, device=None, dtype=torch.float32):
    """2D sine/cosine grid encoding, flattened to (h*w, dim)."""
    scale = 2.0 * math.pi
    ys = (torch.arange(h, dtype=dtype, device=device) + 0.5) / h * scale
    xs = (torch.arange(w, dtype=dtype, device=device) + 0.5) / w * scale
    half = dim // 2
    freq = torch.arange(half // 2, dtype=dtype, device=device)
    freq = 10000.0 ** (2 * freq / half)

    def encode(coords):
        ang = coords[:, None] / freq[None, :]
        return torch.stack([ang.sin(), ang.cos()], dim=2).flatten(1)

    pos_y = encode(ys)  # (h, half)
    pos_x = encode(xs)  # (w, half)
    grid = torch.cat(
        [
            pos_y[:, None, :].expand(h, w, half),
            pos_x[None, :, :].expand(h, w, half),
        ],
        dim=2,
    )
    return grid.reshape(h * w, dim)


@dataclass
class EncodedMemory:
    """Concatenated encoder tokens plus the per-level shape table."""

    tokens: torch.Tensor  # (total, C)
    spatial_shapes: list[tuple[int, int]]
    level_start: list[int]
    level_ids: tuple[int, ...]

    def validate(self) -> None:
        total = sum(h * w for h, w in self.spatial_shapes)
        if self.tokens.shape[0] != total:
            raise ValidationError(
                f"token count {self.tokens.shape[0]} != sum of level sizes {total}"
            )
        if not torch.isfinite(self.tokens).all():
            raise ValidationError("non-finite encoder memory")

    def level_slice(self, level_id: int) -> torch.Tensor:
        i = self.level_ids.index(level_id)
        start = self.level_start[i]
        h, w = self.spatial_shapes[i]
        return self.tokens[start : start + h * w]

    def replace_level(self, level_id: int, new_tokens: torch.Tensor) -> "EncodedMemory":
        i = self.level_ids.index(level_id)
        start = self.level_start[i]
        h, w = self.spatial_shapes[i]
        if new_tokens.shape != (h * w, self.tokens.shape[1]):
            raise ValidationError("replacement tokens have the wrong shape")
        tokens = torch.cat(
            [self.tokens[:start], new_tokens, self.tokens[start + h * w :]], dim=0
        )
        return EncodedMemory(tokens, self.spatial_shapes, self.level_start, self.level_ids)

    def level_maps(self) -> list[torch.Tensor]:
        """Tokens reshaped back to (C, h, w) maps, in level order."""
        maps = []
        for i, (h, w) in enumerate(self.spatial_shapes):
            start = self.level_start[i]
            maps.append(self.tokens[start : start + h * w].transpose(0, 1).reshape(-1, h, w))
        return maps


def grid_reference_points(spatial_shapes, device=None, dtype=torch.float32):
    """Normalized cell centers for every token, concatenated over levels."""
    refs = []
    for h, w in spatial_shapes:
        ys = (torch.arange(h, dtype=dtype, device=device) + 0.5) / h
        xs = (torch.arange(w, dtype=dtype, device=device) + 0.5) / w
        grid_x, grid_y = torch.meshgrid(xs, ys, indexing="xy")
        refs.append(torch.stack([grid_x, grid_y], dim=-1).reshape(-1, 2))
    return torch.cat(refs, dim=0)


class _EncoderLayer(nn.Module):
    def __init__(self, hidden_dim, num_heads, num_levels, num_points, ffn_dim):
        super().__init__()
        self.self_attn = MultiScaleDeformableAttention(
            hidden_dim, num_heads, num_levels, num_points
        )
        self.norm1 = nn.LayerNorm(hidden_dim)
        self.ffn = nn.Sequential(
            nn.Linear(hidden_dim, ffn_dim), nn.ReLU(inplace=True), nn.Linear(ffn_dim, hidden_dim)
        )
        self.norm2 = nn.LayerNorm(hidden_dim)

    def forward(self, tokens, pos, refs, spatial_shapes):
        attn = self.self_attn(tokens, refs, tokens, spatial_shapes, query_pos=pos)
        tokens = self.norm1(tokens + attn)
        tokens = self.norm2(tokens + self.ffn(tokens))
        return tokens


class DeformableEncoder(nn.Module):
    def __init__(
        self,
        hidden_dim: int = HIDDEN_DIM,
        num_heads: int = NUM_HEADS,
        num_points: int = NUM_POINTS,
        num_layers: int = NUM_LAYERS,
        ffn_dim: int = FFN_DIM,
        level_ids: tuple[int, ...] = ENCODER_LEVEL_IDS,
    ):
        super().__init__()
        self.level_ids = level_ids
        self.level_embed = nn.Parameter(torch.zeros(len(level_ids), hidden_dim))
        nn.init.normal_(self.level_embed)
        self.layers = nn.ModuleList(
            [
                _EncoderLayer(hidden_dim, num_heads, len(level_ids), num_points, ffn_dim)
                for _ in range(num_layers)
            ]
        )

    def positional_encoding(self, spatial_shapes, level_ids, device, dtype):
        parts = []
        for (h, w), lid in zip(spatial_shapes, level_ids):
            pos = sine_position_2d(h, w, self.level_embed.shape[1], device, dtype)
            parts.append(pos + self.level_embed[self.level_ids.index(lid)])
        return torch.cat(parts, dim=0)

    def forward(
        self, feature_maps: list[torch.Tensor], level_ids: tuple[int, ...] | None = None
    ) -> EncodedMemory:
        """feature_maps: one (C, h, w) map per level id, finest first by default."""
        level_ids = self.level_ids if level_ids is None else level_ids
        if len(feature_maps) != len(level_ids):
            raise ValidationError("one feature map per level id required")
        spatial_shapes = [tuple(m.shape[-2:]) for m in feature_maps]
        tokens = torch.cat([m.flatten(1).transpose(0, 1) for m in feature_maps], dim=0)
        pos = self.positional_encoding(spatial_shapes, level_ids, tokens.device, tokens.dtype)
        refs = grid_reference_points(spatial_shapes, tokens.device, tokens.dtype)
        for layer in self.layers:
            tokens = layer(tokens, pos, refs, spatial_shapes)
        starts = [0]
        for h, w in spatial_shapes[:-1]:
            starts.append(starts[-1] + h * w)
        memory = EncodedMemory(
            tokens=tokens,
            spatial_shapes=spatial_shapes,
            level_start=starts,
            level_ids=tuple(level_ids),
        )
        memory.validate()
        return memory


@dataclass
class QueryState:
    queries: torch.Tensor  # (N, C)
    base_boxes: torch.Tensor  # (N, 4) normalized (cx, cy, w, h)

    def validate(self) -> None:
        if self.queries.shape[0] != self.base_boxes.shape[0]:
            raise ValidationError("queries and base boxes disagree on N")
        if self.base_boxes.min() < 0 or self.base_boxes.max() > 1:
            raise ValidationError("base boxes must lie in [0, 1]^4")


class _DecoderLayer(nn.Module):
    def __init__(self, hidden_dim, num_heads, num_levels, num_points, ffn_dim):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(hidden_dim, num_heads, batch_first=True)
        self.norm1 = nn.LayerNorm(hidden_dim)
        self.cross_attn = MultiScaleDeformableAttention(
            hidden_dim, num_heads, num_levels, num_points
        )
        self.norm2 = nn.LayerNorm(hidden_dim)
        self.ffn = nn.Sequential(
            nn.Linear(hidden_dim, ffn_dim), nn.ReLU(inplace=True), nn.Linear(ffn_dim, hidden_dim)
        )
        self.norm3 = nn.LayerNorm(hidden_dim)

    def forward(self, queries, base_boxes, memory: EncodedMemory):
        q = queries.unsqueeze(0)
        sa, _ = self.self_attn(q, q, q, need_weights=False)
        queries = self.norm1(queries + sa.squeeze(0))
        ca = self.cross_attn(queries, base_boxes, memory.tokens, memory.spatial_shapes)
        queries = self.norm2(queries + ca)
        queries = self.norm3(queries + self.ffn(queries))
        return queries


class DeformableDecoder(nn.Module):
    """Self-attention over queries + deformable cross-attention into memory.

    Reference boxes stay fixed across layers (no iterative refinement)."""

    def __init__(
        self,
        hidden_dim: int = HIDDEN_DIM,
        num_heads: int = NUM_HEADS,
        num_points: int = NUM_POINTS,
        num_layers: int = NUM_LAYERS,
        ffn_dim: int = FFN_DIM,
        num_levels: int = len(ENCODER_LEVEL_IDS),
    ):
        super().__init__()
        self.layers = nn.ModuleList(
            [
                _DecoderLayer(hidden_dim, num_heads, num_levels, num_points, ffn_dim)
                for _ in range(num_layers)
            ]
        )

    def forward(self, state: QueryState, memory: EncodedMemory) -> torch.Tensor:
        state.validate()
        q = state.queries
        for layer in self.layers:
            q = layer(q, state.base_boxes, memory)
        return q


def _spread_base_boxes(n_queries: int) -> torch.Tensor:
    """Learned-box initialization: near the image center, w = h = 0.2."""
    boxes = torch.full((n_queries, 4), 0.2)
    boxes[0, :2] = 0.5
    for i in range(1, n_queries):
        ang = 2.0 * math.pi * (i - 1) / max(n_queries - 1, 1)
        boxes[i, 0] = 0.5 + 0.15 * math.cos(ang)
        boxes[i, 1] = 0.5 + 0.15 * math.sin(ang)
    return boxes


class QueryInitializer(nn.Module):
    """Builds the decoder query set for a frame.

    First frame: the pooled selected-prompt vector is repeated n_queries
    times, a learned per-slot embedding breaks the symmetry, and learned
    reference boxes provide the starting locations. Later frames receive a
    single transformed query and the previous best box, unless the
    corresponding propagation switch is off.
    """

    def __init__(self, n_queries: int = 5, hidden_dim: int = HIDDEN_DIM):
        super().__init__()
        self.n_queries = n_queries
        self.slot_embed = nn.Parameter(torch.empty(n_queries, hidden_dim))
        nn.init.normal_(self.slot_embed, std=0.02)
        self.base_box_logits = nn.Parameter(inverse_sigmoid(_spread_base_boxes(n_queries)))

    def fresh_state(self, prompt_words: torch.Tensor) -> QueryState:
        from .encoders import pool_prompt

        pooled = pool_prompt(prompt_words)
        queries = pooled.unsqueeze(0) + self.slot_embed
        return QueryState(queries=queries, base_boxes=torch.sigmoid(self.base_box_logits))

    def forward(
        self,
        prompt_words: torch.Tensor,
        packet=None,
        query_transform=None,
        propagate_box: bool = True,
        propagate_query: bool = True,
    ) -> QueryState:
        if packet is None:
            state = self.fresh_state(prompt_words)
        else:
            packet.validate()
            if propagate_query:
                if query_transform is None:
                    raise ValidationError("query propagation requires the transform network")
                queries = query_transform(packet.best_query_embed).unsqueeze(0)
                if propagate_box:
                    boxes = packet.best_box.unsqueeze(0)
                else:
                    boxes = torch.sigmoid(self.base_box_logits[:1])
                state = QueryState(queries=queries, base_boxes=boxes)
            else:
                state = self.fresh_state(prompt_words)
                if propagate_box:
                    boxes = packet.best_box.unsqueeze(0).expand(self.n_queries, 4)
                    state = QueryState(queries=state.queries, base_boxes=boxes)
        state.validate()
        return state
