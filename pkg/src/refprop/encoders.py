"""Per-frame visual feature pyramid and per-prompt word-level text encoder."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ValidationError

HIDDEN_DIM = 256
FEATURE_STRIDES = (4, 8, 16, 32)
BACKBONE_CHANNELS = (32, 64, 128, 256)


@dataclass
class MultiScaleFeatureMap:
    """Four per-frame feature maps, fine to coarse, projected to HIDDEN_DIM.

    levels[l] has shape (C, ceil(H / stride_l), ceil(W / stride_l)) with
    strides (4, 8, 16, 32).
    """

    levels: list[torch.Tensor]
    strides: tuple[int, ...] = FEATURE_STRIDES

    def validate(self, h: int, w: int) -> None:
        if len(self.levels) != 4:
            raise ValidationError("expected exactly 4 feature levels")
        for feat, stride in zip(self.levels, self.strides):
            hl, wl = feat.shape[-2:]
            if hl != math.ceil(h / stride) or wl != math.ceil(w / stride):
                raise ValidationError(
                    f"level stride {stride}: got {hl}x{wl} for input {h}x{w}"
                )
            if not torch.isfinite(feat).all():
                raise ValidationError("non-finite feature values")


def _conv_block(cin, cout, stride):
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel_size=3, stride=stride, padding=1, bias=False),
        nn.GroupNorm(8, cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, kernel_size=3, stride=1, padding=1, bias=False),
        nn.GroupNorm(8, cout),
        nn.ReLU(inplace=True),
    )


class ImageEncoder(nn.Module):
    """4-stage convolutional pyramid with strides 4/8/16/32.

    Each stage's output is projected to the shared hidden width with a 1x1
    convolution before anything downstream consumes it.
    """

    def __init__(self, hidden_dim: int = HIDDEN_DIM):
        super().__init__()
        c1, c2, c3, c4 = BACKBONE_CHANNELS
        self.stem = nn.Sequential(
            nn.Conv2d(3, c1, kernel_size=3, stride=2, padding=1, bias=False),
            nn.GroupNorm(8, c1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c1, c1, kernel_size=3, stride=2, padding=1, bias=False),
            nn.GroupNorm(8, c1),
            nn.ReLU(inplace=True),
        )
        self.stage2 = _conv_block(c1, c2, stride=2)
        self.stage3 = _conv_block(c2, c3, stride=2)
        self.stage4 = _conv_block(c3, c4, stride=2)
        self.proj = nn.ModuleList(
            [
                nn.Sequential(
                    nn.Conv2d(c, hidden_dim, kernel_size=1),
                    nn.GroupNorm(32, hidden_dim),
                )
                for c in BACKBONE_CHANNELS
            ]
        )

    def forward(self, frame: torch.Tensor) -> MultiScaleFeatureMap:
        """frame: (3, H, W) or (1, 3, H, W), values in [0, 1]."""
        if frame.dim() == 3:
            frame = frame.unsqueeze(0)
        h, w = frame.shape[-2:]
        if h < 32 or w < 32:
            raise ValidationError(f"input must be at least 32x32, got {h}x{w}")
        if not torch.isfinite(frame).all():
            raise ValidationError("non-finite pixel values")
        f1 = self.stem(frame)
        f2 = self.stage2(f1)
        f3 = self.stage3(f2)
        f4 = self.stage4(f3)
        levels = [p(f).squeeze(0) for p, f in zip(self.proj, (f1, f2, f3, f4))]
        out = MultiScaleFeatureMap(levels=levels)
        out.validate(h, w)
        return out


def encode_image(encoder: ImageEncoder, frame: torch.Tensor) -> MultiScaleFeatureMap:
    return encoder(frame)


def sinusoidal_positions(length: int, dim: int, device=None) -> torch.Tensor:
    """Standard 1D sine/cosine position table, (length, dim)."""
    pos = torch.arange(length, dtype=torch.float32, device=device).unsqueeze(1)
    i = torch.arange(dim // 2, dtype=torch.float32, device=device)
    freq = torch.exp(-math.log(10000.0) * (2 * i / dim))
    ang = pos * freq
    table = torch.zeros(length, dim, device=device)
    table[:, 0::2] = torch.sin(ang)
    table[:, 1::2] = torch.cos(ang)
    return table


class _SelfAttentionBlock(nn.Module):
    def __init__(self, dim, heads, ffn_dim):
        super().__init__()
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, ffn_dim), nn.ReLU(inplace=True), nn.Linear(ffn_dim, dim)
        )
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x):
        attn_out, _ = self.attn(x, x, x, need_weights=False)
        x = self.norm1(x + attn_out)
        x = self.norm2(x + self.ffn(x))
        return x


class PromptEncoder(nn.Module):
    """Embedding lookup + sinusoidal positions + 2 self-attention blocks."""

    MAX_LEN = 24

    def __init__(self, vocab_size: int, hidden_dim: int = HIDDEN_DIM, heads: int = 8):
        super().__init__()
        self.embedding = nn.Embedding(vocab_size, hidden_dim)
        self.blocks = nn.ModuleList(
            [_SelfAttentionBlock(hidden_dim, heads, 2 * hidden_dim) for _ in range(2)]
        )

    def forward(self, token_ids: list[int] | torch.Tensor) -> torch.Tensor:
        """token_ids: length Len in [1, 24]; returns (Len, hidden_dim)."""
        if not torch.is_tensor(token_ids):
            token_ids = torch.as_tensor(token_ids, dtype=torch.long)
        if token_ids.dim() != 1 or token_ids.numel() == 0:
            raise ValidationError("token list must be non-empty and 1-dimensional")
        if token_ids.numel() > self.MAX_LEN:
            raise ValidationError(f"prompt longer than {self.MAX_LEN} tokens")
        x = self.embedding(token_ids)
        x = x + sinusoidal_positions(x.shape[0], x.shape[1], device=x.device).to(x.dtype)
        x = x.unsqueeze(0)
        for block in self.blocks:
            x = block(x)
        return x.squeeze(0)


def encode_prompt(encoder: PromptEncoder, token_ids) -> torch.Tensor:
    return encoder(token_ids)


def pool_prompt(word_embeddings: torch.Tensor) -> torch.Tensor:
    """Mean over the word axis: (Len, C) -> (C,)."""
    if word_embeddings.dim() != 2 or word_embeddings.shape[0] < 1:
        raise ValidationError("expected a (Len, C) array with Len >= 1")
    return word_embeddings.mean(dim=0)
