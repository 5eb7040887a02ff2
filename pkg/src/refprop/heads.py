"""Prediction heads: box offsets, dynamically generated mask convolutions
over FPN features, and the per-query referred-object score."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import HIDDEN_DIM
from .errors import ValidationError
from .ops import inverse_sigmoid, make_ffn
from .transformer import EncodedMemory

MASK_CHANNELS = 8
COORD_CHANNELS = 2

# three 1x1 conv layers generated per query: (8+2)->8, 8->8, 8->1
DYNAMIC_LAYOUT = (
    (MASK_CHANNELS + COORD_CHANNELS, MASK_CHANNELS),
    (MASK_CHANNELS, MASK_CHANNELS),
    (MASK_CHANNELS, 1),
)
DYNAMIC_PARAM_COUNT = sum(cin * cout + cout for cin, cout in DYNAMIC_LAYOUT)  # 169


@dataclass
class FramePrediction:
    boxes: torch.Tensor  # (N, 4) normalized (cx, cy, w, h)
    mask_logits: torch.Tensor  # (N, ceil(H/4), ceil(W/4))
    class_logits: torch.Tensor  # (N, 1)
    q_embed: torch.Tensor | None = None  # (N, C), kept for propagation

    @property
    def num_queries(self) -> int:
        return self.boxes.shape[0]

    def validate(self) -> None:
        n = self.num_queries
        if self.mask_logits.shape[0] != n or self.class_logits.shape != (n, 1):
            raise ValidationError("prediction fields disagree on query count")
        if self.boxes.min() < 0 or self.boxes.max() > 1:
            raise ValidationError("boxes must lie in [0, 1]^4")


class FeaturePyramid(nn.Module):
    """Top-down pathway over the encoded levels plus the raw stride-4 map,
    ending in a 3x3 conv down to the mask feature width at stride 4."""

    def __init__(self, hidden_dim: int = HIDDEN_DIM, mask_channels: int = MASK_CHANNELS):
        super().__init__()
        self.laterals = nn.ModuleList(
            [nn.Conv2d(hidden_dim, hidden_dim, kernel_size=1) for _ in range(4)]
        )
        self.out_conv = nn.Conv2d(hidden_dim, mask_channels, kernel_size=3, padding=1)

    def forward(self, memory: EncodedMemory, level1_map: torch.Tensor) -> torch.Tensor:
        """level1_map: (C, ceil(H/4), ceil(W/4)); returns (8, ceil(H/4), ceil(W/4))."""
        maps = memory.level_maps()  # strides 8/16/32, fine to coarse
        top = self.laterals[3](maps[2].unsqueeze(0))
        for lateral, feat in ((self.laterals[2], maps[1]), (self.laterals[1], maps[0])):
            up = F.interpolate(top, size=feat.shape[-2:], mode="bilinear", align_corners=False)
            top = lateral(feat.unsqueeze(0)) + up
        up = F.interpolate(top, size=level1_map.shape[-2:], mode="bilinear", align_corners=False)
        top = self.laterals[0](level1_map.unsqueeze(0)) + up
        return self.out_conv(top).squeeze(0)


def fpn_features(fpn: FeaturePyramid, memory: EncodedMemory, level1_map: torch.Tensor):
    return fpn(memory, level1_map)


def apply_box_offset(base_boxes: torch.Tensor, offsets: torch.Tensor) -> torch.Tensor:
    """Add offsets in the inverse-sigmoid space of the base box."""
    return torch.sigmoid(inverse_sigmoid(base_boxes) + offsets)


class BoxHead(nn.Module):
    def __init__(self, hidden_dim: int = HIDDEN_DIM):
        super().__init__()
        self.ffn = make_ffn(hidden_dim, hidden_dim, 4)
        nn.init.constant_(self.ffn[-1].weight, 0.0)
        nn.init.constant_(self.ffn[-1].bias, 0.0)

    def forward(self, q_embed: torch.Tensor, base_boxes: torch.Tensor) -> torch.Tensor:
        return apply_box_offset(base_boxes, self.ffn(q_embed))


class MaskController(nn.Module):
    """Generates the flattened dynamic-convolution parameters per query."""

    def __init__(self, hidden_dim: int = HIDDEN_DIM):
        super().__init__()
        self.ffn = make_ffn(hidden_dim, hidden_dim, DYNAMIC_PARAM_COUNT)
        # near-zero start keeps early masks flat without cutting the
        # gradient path into the FPN features
        nn.init.normal_(self.ffn[-1].weight, std=0.01)
        nn.init.constant_(self.ffn[-1].bias, 0.0)

    def forward(self, q_embed: torch.Tensor) -> torch.Tensor:
        return self.ffn(q_embed)  # (N, 169)


def split_dynamic_params(theta: torch.Tensor):
    """(169,) -> [(w1, b1), (w2, b2), (w3, b3)] with w as (cout, cin)."""
    if theta.shape[-1] != DYNAMIC_PARAM_COUNT:
        raise ValidationError(
            f"expected {DYNAMIC_PARAM_COUNT} dynamic parameters, got {theta.shape[-1]}"
        )
    layers = []
    offset = 0
    for cin, cout in DYNAMIC_LAYOUT:
        w = theta[offset : offset + cin * cout].reshape(cout, cin)
        offset += cin * cout
        b = theta[offset : offset + cout]
        offset += cout
        layers.append((w, b))
    return layers


def relative_coordinates(boxes: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Per-query coordinate channels relative to each box center.

    Grid positions are pixel centers normalized by the map size, so the
    channel is ~(0, 0) at the box center. Returns (N, 2, h, w).
    """
    dtype, device = boxes.dtype, boxes.device
    ys = (torch.arange(h, dtype=dtype, device=device) + 0.5) / h
    xs = (torch.arange(w, dtype=dtype, device=device) + 0.5) / w
    grid_y, grid_x = torch.meshgrid(ys, xs, indexing="ij")
    rel_x = grid_x[None] - boxes[:, 0, None, None]
    rel_y = grid_y[None] - boxes[:, 1, None, None]
    return torch.stack([rel_x, rel_y], dim=1)


def dynamic_mask(mask_features: torch.Tensor, boxes: torch.Tensor, theta: torch.Tensor):
    """Apply per-query generated 1x1 convolutions to the mask features.

    mask_features: (8, h, w); boxes: (N, 4); theta: (N, 169).
    Returns mask logits (N, h, w).
    """
    c, h, w = mask_features.shape
    if c != MASK_CHANNELS:
        raise ValidationError(f"mask features must have {MASK_CHANNELS} channels")
    coords = relative_coordinates(boxes, h, w)
    logits = []
    for n in range(boxes.shape[0]):
        x = torch.cat([mask_features, coords[n].to(mask_features.dtype)], dim=0)
        x = x.reshape(x.shape[0], h * w)
        layers = split_dynamic_params(theta[n])
        for i, (weight, bias) in enumerate(layers):
            x = weight @ x + bias[:, None]
            if i + 1 < len(layers):
                x = torch.relu(x)
        logits.append(x.reshape(h, w))
    return torch.stack(logits)


class ClassHead(nn.Module):
    def __init__(self, hidden_dim: int = HIDDEN_DIM):
        super().__init__()
        self.linear = nn.Linear(hidden_dim, 1)

    def forward(self, q_embed: torch.Tensor) -> torch.Tensor:
        return self.linear(q_embed)  # (N, 1) logits
