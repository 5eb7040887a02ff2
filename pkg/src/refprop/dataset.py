"""Dataset loading helpers shared by training and evaluation."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .seq_io import list_sequence_dirs, read_sequence
from .synthetic import ImageSequence, generate_prompts


def load_dataset(data_dir) -> list[ImageSequence]:
    return [read_sequence(d) for d in list_sequence_dirs(data_dir)]


def prompt_tokens(seq: ImageSequence, mode: str) -> list[list[int]]:
    """Token lists for a sequence under the requested prompt mode."""
    if mode == "full":
        return seq.prompts.prompts
    target = seq.meta.object_specs[seq.meta.target_index]
    return generate_prompts(target, mode=mode).prompts


def sample_clip(seq: ImageSequence, clip_length: int, rng: np.random.Generator):
    """Random ordered window of consecutive frames."""
    t_total = seq.num_frames
    length = min(clip_length, t_total)
    start = int(rng.integers(0, t_total - length + 1))
    sl = slice(start, start + length)
    return seq.frames[sl], seq.gt_masks[sl], seq.gt_boxes[sl]


def resize_max_side(frames: np.ndarray, masks: np.ndarray, max_side: int):
    """Scale so that max(H, W) == max_side, preserving aspect ratio."""
    t, h, w = frames.shape
    scale = max_side / max(h, w)
    nh, nw = max(32, int(round(h * scale))), max(32, int(round(w * scale)))
    ft = torch.from_numpy(frames).unsqueeze(1)
    frames_r = F.interpolate(ft, size=(nh, nw), mode="bilinear", align_corners=False)
    mt = torch.from_numpy(masks.astype(np.float32)).unsqueeze(1)
    masks_r = F.interpolate(mt, size=(nh, nw), mode="nearest")
    return frames_r.squeeze(1).clamp(0, 1).numpy(), masks_r.squeeze(1).numpy() > 0.5
