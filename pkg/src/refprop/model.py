"""Full model: per-frame forward pass and sequence-level orchestration."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import HIDDEN_DIM, ImageEncoder, PromptEncoder
from .errors import ValidationError
from .heads import BoxHead, ClassHead, FeaturePyramid, FramePrediction, MaskController, dynamic_mask
from .objectives import (
    LossCoefficients,
    downsample_mask,
    focal_loss,
    sequence_loss,
)
from .propagation import (
    MemoryReader,
    PropagationPacket,
    QueryPropagator,
    make_packet,
    select_best_infer,
    select_best_train,
)
from .referring import ReferringInteraction
from .transformer import DeformableDecoder, DeformableEncoder, EncodedMemory, QueryInitializer


class ReferringSequenceSegmenter(nn.Module):
    """Segment the object referred to by three text prompts in every frame."""

    def __init__(
        self,
        vocab_size: int,
        n_queries: int = 5,
        hidden_dim: int = HIDDEN_DIM,
        propagate_box: bool = True,
        propagate_mask: bool = True,
        propagate_query: bool = True,
    ):
        super().__init__()
        self.n_queries = n_queries
        self.propagate_box = propagate_box
        self.propagate_mask = propagate_mask
        self.propagate_query = propagate_query

        self.image_encoder = ImageEncoder(hidden_dim)
        self.prompt_encoder = PromptEncoder(vocab_size, hidden_dim)
        self.referring = ReferringInteraction(hidden_dim)
        self.encoder = DeformableEncoder(hidden_dim)
        self.decoder = DeformableDecoder(hidden_dim)
        self.query_init = QueryInitializer(n_queries, hidden_dim)
        self.query_propagator = QueryPropagator(hidden_dim)
        self.memory_reader = MemoryReader(hidden_dim)
        self.fpn = FeaturePyramid(hidden_dim)
        self.box_head = BoxHead(hidden_dim)
        self.mask_controller = MaskController(hidden_dim)
        self.class_head = ClassHead(hidden_dim)

    @property
    def any_propagation(self) -> bool:
        return self.propagate_box or self.propagate_mask or self.propagate_query

    def encode_prompts(self, token_lists: list[list[int]]) -> list[torch.Tensor]:
        if len(token_lists) != 3:
            raise ValidationError("expected exactly 3 prompts")
        return [self.prompt_encoder(ids) for ids in token_lists]

    def forward_frame(
        self,
        frame: torch.Tensor,
        prompt_embeds: list[torch.Tensor],
        packet: PropagationPacket | None = None,
    ) -> tuple[FramePrediction, EncodedMemory, int]:
        """frame: (3, H, W) in [0, 1]. Returns prediction, encoder memory,
        and the selected prompt index."""
        features = self.image_encoder(frame)
        _, _, fused = self.referring(features, prompt_embeds)
        memory = self.encoder(fused.fused_levels)
        if packet is not None and self.propagate_mask:
            memory = self.memory_reader(memory, packet)
        qs = self.query_init(
            fused.selected_prompt,
            packet=packet if (self.propagate_box or self.propagate_query) else None,
            query_transform=self.query_propagator,
            propagate_box=self.propagate_box,
            propagate_query=self.propagate_query,
        )
        q_embed = self.decoder(qs, memory)
        mask_features = self.fpn(memory, features.levels[0])
        boxes = self.box_head(q_embed, qs.base_boxes)
        theta = self.mask_controller(q_embed)
        mask_logits = dynamic_mask(mask_features, boxes, theta)
        pred = FramePrediction(
            boxes=boxes,
            mask_logits=mask_logits,
            class_logits=self.class_head(q_embed),
            q_embed=q_embed,
        )
        pred.validate()
        return pred, memory, fused.selected_index


@dataclass
class SequenceResult:
    predictions: list[FramePrediction]
    best_indices: list[int]
    total_loss: torch.Tensor | None = None
    frame_losses: list[torch.Tensor] = field(default_factory=list)


def frames_to_tensor(frames: np.ndarray, device=None) -> torch.Tensor:
    """(T, H, W) grayscale in [0, 1] -> (T, 3, H, W) float tensor."""
    t = torch.as_tensor(np.ascontiguousarray(frames), dtype=torch.float32, device=device)
    return t.unsqueeze(1).expand(-1, 3, -1, -1)


def run_sequence_train(
    model: ReferringSequenceSegmenter,
    frames: torch.Tensor,
    token_lists: list[list[int]],
    gt_boxes: torch.Tensor,
    gt_masks: torch.Tensor,
    coeffs: LossCoefficients,
) -> SequenceResult:
    """Forward a clip with propagation, matching each frame's best query.

    frames: (T, 3, H, W); gt_boxes: (T, 4); gt_masks: (T, H, W) binary at
    full resolution (downsampled to stride 4 here for the mask losses).
    Unmatched queries receive negative class supervision so the inference
    argmax over class scores is meaningful.
    """
    packet = None
    frame_losses: list[torch.Tensor] = []
    predictions: list[FramePrediction] = []
    best_indices: list[int] = []
    prompt_embeds = model.encode_prompts(token_lists)
    masks_s4 = [downsample_mask(gt_masks[t]) for t in range(frames.shape[0])]

    for t in range(frames.shape[0]):
        pred, memory, _ = model.forward_frame(frames[t], prompt_embeds, packet)
        best, breakdowns = select_best_train(pred, gt_boxes[t], masks_s4[t], coeffs)
        loss_t = breakdowns[best].total
        if pred.num_queries > 1:
            negatives = [
                focal_loss(pred.class_logits[i].reshape(()), torch.zeros(()))
                for i in range(pred.num_queries)
                if i != best
            ]
            loss_t = loss_t + coeffs.cls * torch.stack(negatives).mean()
        frame_losses.append(loss_t)
        predictions.append(pred)
        best_indices.append(best)
        packet = make_packet(pred, best, memory) if model.any_propagation else None

    return SequenceResult(
        predictions=predictions,
        best_indices=best_indices,
        total_loss=sequence_loss(frame_losses),
        frame_losses=frame_losses,
    )


@torch.no_grad()
def run_sequence_infer(
    model: ReferringSequenceSegmenter,
    frames: torch.Tensor,
    token_lists: list[list[int]],
) -> SequenceResult:
    """Frame-by-frame inference; the best query is the highest class score."""
    packet = None
    predictions: list[FramePrediction] = []
    best_indices: list[int] = []
    prompt_embeds = model.encode_prompts(token_lists)
    for t in range(frames.shape[0]):
        pred, memory, _ = model.forward_frame(frames[t], prompt_embeds, packet)
        best = select_best_infer(pred)
        predictions.append(pred)
        best_indices.append(best)
        packet = make_packet(pred, best, memory) if model.any_propagation else None
    return SequenceResult(predictions=predictions, best_indices=best_indices)


def full_resolution_mask(
    mask_logits: torch.Tensor, height: int, width: int, threshold: float = 0.5
) -> torch.Tensor:
    """Upsample stride-4 logits to (height, width) and threshold at 0.5."""
    prob = torch.sigmoid(mask_logits).unsqueeze(0).unsqueeze(0)
    prob = F.interpolate(prob, size=(height, width), mode="bilinear", align_corners=False)
    return prob[0, 0] >= threshold


def predict_masks(
    model: ReferringSequenceSegmenter,
    frames: torch.Tensor,
    token_lists: list[list[int]],
) -> torch.Tensor:
    """Binary (T, H, W) masks for a sequence."""
    result = run_sequence_infer(model, frames, token_lists)
    h, w = frames.shape[-2:]
    masks = [
        full_resolution_mask(pred.mask_logits[best], h, w)
        for pred, best in zip(result.predictions, result.best_indices)
    ]
    return torch.stack(masks)
