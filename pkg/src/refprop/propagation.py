"""Carrying the best box, mask, and query embedding across frames.

The best prediction of frame t-1 seeds frame t three ways: its box becomes
the new reference box, its mask plus the previous encoder memory drive an
attention read that rewrites the finest (stride-8) memory level, and its
query embedding is transformed into the next frame's single query.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import HIDDEN_DIM
from .errors import ValidationError
from .heads import FramePrediction
from .ops import make_ffn
from .transformer import EncodedMemory

MEMORY_LEVEL_ID = 2  # the stride-8 level, finest present in the encoder


@dataclass
class PropagationPacket:
    best_box: torch.Tensor  # (4,) normalized
    best_mask: torch.Tensor  # (h8, w8) probabilities on the stride-8 grid
    best_query_embed: torch.Tensor  # (C,)
    prev_memory_level2: torch.Tensor  # (C, h8, w8)

    def validate(self) -> None:
        if self.best_box.shape != (4,):
            raise ValidationError("packet box must be a 4-vector")
        if self.best_box.min() < 0 or self.best_box.max() > 1:
            raise ValidationError("packet box must lie in [0, 1]^4")
        if self.best_mask.dim() != 2:
            raise ValidationError("packet mask must be 2-dimensional")
        if self.best_mask.min() < 0 or self.best_mask.max() > 1:
            raise ValidationError("packet mask values must lie in [0, 1]")
        if self.best_query_embed.dim() != 1:
            raise ValidationError("packet query embedding must be a vector")
        if self.prev_memory_level2.dim() != 3:
            raise ValidationError("packet memory must be (C, h, w)")
        if self.prev_memory_level2.shape[-2:] != self.best_mask.shape:
            raise ValidationError("packet mask and memory grids disagree")


def select_best_infer(pred: FramePrediction) -> int:
    """Index of the query with the highest class logit; ties -> lowest index."""
    if pred.num_queries < 1:
        raise ValidationError("need at least one prediction")
    return int(torch.argmax(pred.class_logits.reshape(-1)).item())


def select_best_train(pred: FramePrediction, gt_box, gt_mask_s4, coeffs):
    """Index of the query with the lowest matching loss, plus all breakdowns."""
    from .objectives import match_loss

    breakdowns = [
        match_loss(
            pred.boxes[i], pred.mask_logits[i], pred.class_logits[i].reshape(()), gt_box,
            gt_mask_s4, coeffs,
        )
        for i in range(pred.num_queries)
    ]
    totals = torch.stack([b.total for b in breakdowns])
    return int(torch.argmin(totals).item()), breakdowns


def make_packet(pred: FramePrediction, best_index: int, memory: EncodedMemory) -> PropagationPacket:
    """Extract the chosen prediction and the stride-8 memory slice."""
    if not (0 <= best_index < pred.num_queries):
        raise ValidationError(f"best index {best_index} out of range")
    if pred.q_embed is None:
        raise ValidationError("prediction is missing its query embeddings")
    i = memory.level_ids.index(MEMORY_LEVEL_ID)
    h8, w8 = memory.spatial_shapes[i]
    mask_prob = torch.sigmoid(pred.mask_logits[best_index]).unsqueeze(0).unsqueeze(0)
    mask_prob = F.interpolate(mask_prob, size=(h8, w8), mode="bilinear", align_corners=False)
    mem_map = memory.level_slice(MEMORY_LEVEL_ID).transpose(0, 1).reshape(-1, h8, w8)
    packet = PropagationPacket(
        best_box=pred.boxes[best_index],
        best_mask=mask_prob.squeeze(0).squeeze(0).clamp(0.0, 1.0),
        best_query_embed=pred.q_embed[best_index],
        prev_memory_level2=mem_map,
    )
    packet.validate()
    return packet


class MemoryReader(nn.Module):
    """Attention read from current stride-8 tokens into the previous frame's
    mask + memory, implemented with two parallel 3x3 key/value convolutions."""

    def __init__(self, hidden_dim: int = HIDDEN_DIM):
        super().__init__()
        self.key_conv = nn.Conv2d(hidden_dim + 1, hidden_dim, kernel_size=3, padding=1)
        self.value_conv = nn.Conv2d(hidden_dim + 1, hidden_dim, kernel_size=3, padding=1)

    def read(self, current_tokens: torch.Tensor, packet: PropagationPacket) -> torch.Tensor:
        """current_tokens: (h8*w8, C) -> same shape after the memory read."""
        packet.validate()
        c = current_tokens.shape[1]
        h8, w8 = packet.best_mask.shape
        if current_tokens.shape[0] != h8 * w8:
            raise ValidationError(
                f"token grid {current_tokens.shape[0]} != packet grid {h8 * w8}"
            )
        mem = torch.cat(
            [packet.best_mask.unsqueeze(0).to(current_tokens.dtype), packet.prev_memory_level2],
            dim=0,
        ).unsqueeze(0)
        key = self.key_conv(mem).squeeze(0).reshape(c, -1)  # (C, HW)
        value = self.value_conv(mem).squeeze(0).reshape(c, -1)
        scores = current_tokens @ key / math.sqrt(c)  # (HW, HW)
        attn = torch.softmax(scores, dim=-1)
        return attn @ value.transpose(0, 1)

    def forward(self, memory: EncodedMemory, packet: PropagationPacket) -> EncodedMemory:
        tokens = memory.level_slice(MEMORY_LEVEL_ID)
        return memory.replace_level(MEMORY_LEVEL_ID, self.read(tokens, packet))


def memory_read(reader: MemoryReader, current_tokens, packet) -> torch.Tensor:
    return reader.read(current_tokens, packet)


class QueryPropagator(nn.Module):
    """3-layer FFN carrying the best query embedding into the next frame."""

    def __init__(self, hidden_dim: int = HIDDEN_DIM):
        super().__init__()
        self.ffn = make_ffn(hidden_dim, hidden_dim)

    def forward(self, prev_embed: torch.Tensor) -> torch.Tensor:
        return self.ffn(prev_embed)


def propagate_query(propagator: QueryPropagator, prev_embed: torch.Tensor) -> torch.Tensor:
    return propagator(prev_embed)
