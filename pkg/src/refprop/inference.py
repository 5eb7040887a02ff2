"""Single-sequence inference: predicted mask files plus contour overlays."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import prompt_tokens
from .evaluate import model_from_checkpoint
from .model import frames_to_tensor, predict_masks
from .seq_io import read_sequence


def mask_boundary(mask: np.ndarray) -> np.ndarray:
    """Pixels of the mask whose 4-neighborhood leaves the mask."""
    eroded = mask.copy()
    eroded[1:, :] &= mask[:-1, :]
    eroded[:-1, :] &= mask[1:, :]
    eroded[:, 1:] &= mask[:, :-1]
    eroded[:, :-1] &= mask[:, 1:]
    return mask & ~eroded


def overlay_contour(frame: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Grayscale frame to RGB with the predicted contour drawn in red."""
    rgb = np.repeat((np.clip(frame, 0, 1) * 255).astype(np.uint8)[:, :, None], 3, axis=2)
    boundary = mask_boundary(mask)
    rgb[boundary] = (255, 48, 48)
    return rgb


def infer(checkpoint_path, sequence_dir, out_dir) -> list[Path]:
    """Write pred/%04d.png (0/255 masks) and overlay/%04d.png for a sequence."""
    model, config = model_from_checkpoint(checkpoint_path)
    seq = read_sequence(sequence_dir)
    masks = predict_masks(
        model, frames_to_tensor(seq.frames), prompt_tokens(seq, config.prompt_mode)
    ).numpy()

    out = Path(out_dir)
    (out / "pred").mkdir(parents=True, exist_ok=True)
    (out / "overlay").mkdir(parents=True, exist_ok=True)
    written = []
    for t in range(seq.num_frames):
        pred_path = out / "pred" / f"{t:04d}.png"
        Image.fromarray(masks[t].astype(np.uint8) * 255, mode="L").save(pred_path)
        overlay_path = out / "overlay" / f"{t:04d}.png"
        Image.fromarray(overlay_contour(seq.frames[t], masks[t]), mode="RGB").save(overlay_path)
        written.extend([pred_path, overlay_path])
    return written
