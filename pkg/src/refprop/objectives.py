"""Loss terms for query matching and the Dice evaluation metric."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ValidationError


@dataclass
class LossCoefficients:
    l1: float = 5.0
    giou: float = 2.0
    dice: float = 5.0
    focal: float = 2.0
    cls: float = 2.0

    def validate(self) -> None:
        for name, value in vars(self).items():
            if value < 0:
                raise ValidationError(f"loss coefficient {name} must be >= 0")


@dataclass
class LossBreakdown:
    l1: torch.Tensor
    giou: torch.Tensor
    dice: torch.Tensor
    mask_focal: torch.Tensor
    cls: torch.Tensor
    total: torch.Tensor


def box_cxcywh_to_xyxy(box: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = box.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def giou(box_a: torch.Tensor, box_b: torch.Tensor) -> torch.Tensor:
    """Generalized IoU of (cx, cy, w, h) boxes; broadcasts over leading dims.

    GIoU = IoU - (enclosure - union) / enclosure, in [-1, 1].
    """
    if (box_a[..., 2:] <= 0).any() or (box_b[..., 2:] <= 0).any():
        raise ValidationError("degenerate box: w and h must be positive")
    a = box_cxcywh_to_xyxy(box_a)
    b = box_cxcywh_to_xyxy(box_b)
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    ix0 = torch.maximum(a[..., 0], b[..., 0])
    iy0 = torch.maximum(a[..., 1], b[..., 1])
    ix1 = torch.minimum(a[..., 2], b[..., 2])
    iy1 = torch.minimum(a[..., 3], b[..., 3])
    inter = (ix1 - ix0).clamp(min=0) * (iy1 - iy0).clamp(min=0)
    union = area_a + area_b - inter
    ex0 = torch.minimum(a[..., 0], b[..., 0])
    ey0 = torch.minimum(a[..., 1], b[..., 1])
    ex1 = torch.maximum(a[..., 2], b[..., 2])
    ey1 = torch.maximum(a[..., 3], b[..., 3])
    enclosure = (ex1 - ex0) * (ey1 - ey0)
    iou = inter / union
    return iou - (enclosure - union) / enclosure


def giou_loss(box_a: torch.Tensor, box_b: torch.Tensor) -> torch.Tensor:
    return 1.0 - giou(box_a, box_b)


def dice_loss(mask_logits: torch.Tensor, gt_mask: torch.Tensor, eps: float = 1.0):
    """Soft Dice loss: 1 - (2 sum(p*g) + eps) / (sum(p) + sum(g) + eps)."""
    if mask_logits.shape != gt_mask.shape:
        raise ValidationError(
            f"mask shape {tuple(mask_logits.shape)} != target {tuple(gt_mask.shape)}"
        )
    p = torch.sigmoid(mask_logits).flatten()
    g = gt_mask.to(p.dtype).flatten()
    numerator = 2.0 * (p * g).sum() + eps
    denominator = p.sum() + g.sum() + eps
    return 1.0 - numerator / denominator


def focal_loss(
    logits: torch.Tensor, targets: torch.Tensor, alpha: float = 0.25, gamma: float = 2.0
):
    """Binary focal loss, mean-reduced over all elements."""
    targets = targets.to(logits.dtype)
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1.0 - p) * (1.0 - targets)
    alpha_t = alpha * targets + (1.0 - alpha) * (1.0 - targets)
    return (alpha_t * (1.0 - p_t) ** gamma * ce).mean()


def downsample_mask(gt_mask: torch.Tensor, stride: int = 4) -> torch.Tensor:
    """Stride-s area fraction: each cell holds its covered-pixel fraction.

    Soft targets keep the coarse mask head aware of sub-cell boundaries;
    a hard any-pixel pooling would dilate every object by up to a cell,
    capping the achievable full-resolution Dice well below what bilinear
    upsampling of fractional cells reconstructs.
    """
    m = gt_mask.to(torch.float32).unsqueeze(0).unsqueeze(0)
    return F.avg_pool2d(m, kernel_size=stride, stride=stride, ceil_mode=True)[0, 0]


def match_loss(
    pred_box: torch.Tensor,
    mask_logits: torch.Tensor,
    class_logit: torch.Tensor,
    gt_box: torch.Tensor,
    gt_mask_s4: torch.Tensor,
    coeffs: LossCoefficients,
) -> LossBreakdown:
    """Weighted sum of box, mask, and class terms for one query.

    The class target is 1: the matched query is supervised as the referred
    object. Negative supervision for unmatched first-frame queries is added
    separately by the training loop.
    """
    l1 = (pred_box - gt_box.to(pred_box.dtype)).abs().sum()
    g = giou_loss(pred_box, gt_box.to(pred_box.dtype))
    d = dice_loss(mask_logits, gt_mask_s4)
    mf = focal_loss(mask_logits, gt_mask_s4)
    one = torch.ones_like(class_logit)
    c = focal_loss(class_logit, one)
    total = coeffs.l1 * l1 + coeffs.giou * g + coeffs.dice * d + coeffs.focal * mf + coeffs.cls * c
    return LossBreakdown(l1=l1, giou=g, dice=d, mask_focal=mf, cls=c, total=total)


def sequence_loss(per_frame_losses: list[torch.Tensor]) -> torch.Tensor:
    """Mean of the selected per-frame matching losses."""
    if not per_frame_losses:
        raise ValidationError("need at least one frame loss")
    return torch.stack(per_frame_losses).mean()


def dice_score(pred_mask: torch.Tensor, gt_mask: torch.Tensor) -> float:
    """Overlap metric 2|P & G| / (|P| + |G|) on binary masks; 1 if both empty."""
    if pred_mask.shape != gt_mask.shape:
        raise ValidationError(
            f"mask shape {tuple(pred_mask.shape)} != {tuple(gt_mask.shape)}"
        )
    p = pred_mask.bool()
    g = gt_mask.bool()
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom
