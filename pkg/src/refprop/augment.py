"""Clip-consistent training augmentations.

All frames of a clip share the same draw so propagation sees a coherent
sequence. Boxes are recomputed from the augmented masks, and any transform
that would erase the target mask in some frame is skipped.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .synthetic import tight_box

RESIZE_SCALES = (0.75, 0.875, 1.0, 1.125, 1.25)


def _resize(frames: np.ndarray, masks: np.ndarray, height: int, width: int):
    ft = torch.from_numpy(frames).unsqueeze(1)
    resized = F.interpolate(ft, size=(height, width), mode="bilinear", align_corners=False)
    mt = torch.from_numpy(masks.astype(np.float32)).unsqueeze(1)
    masks_resized = F.interpolate(mt, size=(height, width), mode="nearest")
    return (
        resized.squeeze(1).clamp(0, 1).numpy(),
        masks_resized.squeeze(1).numpy() > 0.5,
    )


def augment_clip(frames: np.ndarray, masks: np.ndarray, rng: np.random.Generator):
    """frames: (T, H, W) float32; masks: (T, H, W) bool.

    Returns augmented (frames, masks, boxes) with boxes recomputed.
    """
    frames = frames.copy()
    masks = masks.copy()

    if rng.random() < 0.5:  # horizontal flip
        frames = frames[:, :, ::-1].copy()
        masks = masks[:, :, ::-1].copy()

    scale = RESIZE_SCALES[rng.integers(0, len(RESIZE_SCALES))]
    if scale != 1.0:
        h = max(32, int(round(frames.shape[1] * scale)))
        w = max(32, int(round(frames.shape[2] * scale)))
        new_frames, new_masks = _resize(frames, masks, h, w)
        if all(m.any() for m in new_masks):
            frames, masks = new_frames, new_masks

    if rng.random() < 0.5:  # crop around the target's union box
        t, h, w = frames.shape
        ys, xs = np.nonzero(masks.any(axis=0))
        y0, y1 = int(ys.min()), int(ys.max()) + 1
        x0, x1 = int(xs.min()), int(xs.max()) + 1
        min_h, min_w = max(32, int(0.75 * h)), max(32, int(0.75 * w))
        crop_h = int(rng.integers(max(min_h, y1 - y0), h + 1))
        crop_w = int(rng.integers(max(min_w, x1 - x0), w + 1))
        if crop_h <= h and crop_w <= w:
            top_lo, top_hi = max(0, y1 - crop_h), min(y0, h - crop_h)
            left_lo, left_hi = max(0, x1 - crop_w), min(x0, w - crop_w)
            if top_hi >= top_lo and left_hi >= left_lo:
                top = int(rng.integers(top_lo, top_hi + 1))
                left = int(rng.integers(left_lo, left_hi + 1))
                new_frames = frames[:, top : top + crop_h, left : left + crop_w]
                new_masks = masks[:, top : top + crop_h, left : left + crop_w]
                if all(m.any() for m in new_masks):
                    frames, masks = new_frames.copy(), new_masks.copy()

    # photometric jitter: brightness shift and contrast scale
    brightness = rng.uniform(-0.08, 0.08)
    contrast = rng.uniform(0.92, 1.08)
    frames = np.clip((frames - 0.5) * contrast + 0.5 + brightness, 0.0, 1.0)

    boxes = np.stack([tight_box(m) for m in masks])
    return frames.astype(np.float32), masks, boxes
