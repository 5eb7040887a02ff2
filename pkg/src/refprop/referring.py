"""Cross-modal referring interaction.

Per frame: attend from each feature level to each prompt's words, score the
three prompt-specific proposals with a shared MLP, fuse the last three
levels as a convex combination over prompts, and pick the single most
relevant prompt from the level-1 scores to drive the decoder queries.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .encoders import HIDDEN_DIM, MultiScaleFeatureMap
from .errors import ValidationError

NUM_PROMPTS = 3
FUSED_LEVELS = (1, 2, 3)  # list indices of strides 8/16/32; index 0 (stride 4) only scores prompts


@dataclass
class ProposalFeatures:
    """Attention outputs A for the fused levels: proposals[l][i] is (H_l*W_l, C)."""

    proposals: list[list[torch.Tensor]]

    def validate(self) -> None:
        if len(self.proposals) != len(FUSED_LEVELS):
            raise ValidationError("expected proposals for the three fused levels")
        for per_level in self.proposals:
            if len(per_level) != NUM_PROMPTS:
                raise ValidationError("expected one proposal per prompt")


@dataclass
class RelevanceWeights:
    """weights: (4, NUM_PROMPTS); rows sum to 1 over prompts, levels fine to coarse."""

    weights: torch.Tensor


@dataclass
class FusedFeatures:
    fused_levels: list[torch.Tensor]  # three maps (C, H_l, W_l), strides 8/16/32
    selected_prompt: torch.Tensor  # (Len, C) word embeddings of the chosen prompt
    selected_index: int


def fuse_features(
    visual_tokens: torch.Tensor,
    proposals: list[torch.Tensor] | torch.Tensor,
    weights: torch.Tensor,
) -> torch.Tensor:
    """Weighted sum over prompts of visual (x) proposal Hadamard products.

    visual_tokens: (HW, C); proposals: NUM_PROMPTS x (HW, C); weights: (NUM_PROMPTS,).
    """
    if len(proposals) != weights.shape[0]:
        raise ValidationError("one weight per proposal required")
    fused = torch.zeros_like(visual_tokens)
    for prop, w in zip(proposals, weights):
        if prop.shape != visual_tokens.shape:
            raise ValidationError(
                f"proposal shape {tuple(prop.shape)} != visual shape {tuple(visual_tokens.shape)}"
            )
        fused = fused + visual_tokens * prop * w
    return fused


def select_prompt(
    level1_weights: torch.Tensor, prompt_embeddings: list[torch.Tensor]
) -> tuple[int, torch.Tensor]:
    """Index of the highest level-1 weight (ties -> lowest index) and its words."""
    idx = int(torch.argmax(level1_weights).item())
    return idx, prompt_embeddings[idx]


class ReferringInteraction(nn.Module):
    def __init__(self, hidden_dim: int = HIDDEN_DIM, num_heads: int = 8):
        super().__init__()
        # one attention shared across levels and prompts; dropout 0
        self.attention = nn.MultiheadAttention(hidden_dim, num_heads, batch_first=True)
        self.relevance_mlp = nn.Sequential(
            nn.Linear(hidden_dim, hidden_dim),
            nn.ReLU(inplace=True),
            nn.Linear(hidden_dim, hidden_dim),
            nn.ReLU(inplace=True),
            nn.Linear(hidden_dim, 1),
        )

    def cross_modal_attention(
        self,
        visual_tokens: torch.Tensor,
        prompt_words: torch.Tensor,
        need_weights: bool = False,
    ):
        """MHA with visual tokens as queries and prompt words as keys/values.

        visual_tokens: (HW, C); prompt_words: (Len, C). Returns (HW, C), and
        the head-averaged attention matrix (HW, Len) when requested.
        """
        if visual_tokens.shape[-1] != prompt_words.shape[-1]:
            raise ValidationError("visual and prompt widths differ")
        if not torch.isfinite(visual_tokens).all() or not torch.isfinite(prompt_words).all():
            raise ValidationError("non-finite attention inputs")
        q = visual_tokens.unsqueeze(0)
        kv = prompt_words.unsqueeze(0)
        out, attn = self.attention(q, kv, kv, need_weights=need_weights)
        out = out.squeeze(0)
        if need_weights:
            return out, attn.squeeze(0)
        return out

    def prompt_relevance_weights(self, proposals: list[torch.Tensor]) -> torch.Tensor:
        """Mean-pool each proposal over space, score with the shared MLP, softmax."""
        if len(proposals) != NUM_PROMPTS:
            raise ValidationError(f"expected {NUM_PROMPTS} proposals, got {len(proposals)}")
        pooled = torch.stack([p.mean(dim=0) for p in proposals])  # (3, C)
        logits = self.relevance_mlp(pooled).squeeze(-1)  # (3,)
        return torch.softmax(logits, dim=0)

    def forward(
        self, features: MultiScaleFeatureMap, prompt_embeddings: list[torch.Tensor]
    ) -> tuple[ProposalFeatures, RelevanceWeights, FusedFeatures]:
        if len(prompt_embeddings) != NUM_PROMPTS:
            raise ValidationError(f"expected {NUM_PROMPTS} prompts")

        all_weights = []
        fused_maps = []
        kept_proposals = []
        for level_idx, level_map in enumerate(features.levels):
            c, hl, wl = level_map.shape
            tokens = level_map.flatten(1).transpose(0, 1)  # (HW, C)
            proposals = [self.cross_modal_attention(tokens, p) for p in prompt_embeddings]
            weights = self.prompt_relevance_weights(proposals)
            all_weights.append(weights)
            if level_idx in FUSED_LEVELS:
                kept_proposals.append(proposals)
                fused = fuse_features(tokens, proposals, weights)
                fused_maps.append(fused.transpose(0, 1).reshape(c, hl, wl))

        weights = RelevanceWeights(weights=torch.stack(all_weights))
        idx, selected = select_prompt(weights.weights[0], prompt_embeddings)
        proposals_out = ProposalFeatures(proposals=kept_proposals)
        proposals_out.validate()
        return proposals_out, weights, FusedFeatures(
            fused_levels=fused_maps, selected_prompt=selected, selected_index=idx
        )
