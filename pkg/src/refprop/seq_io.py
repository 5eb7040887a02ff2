"""On-disk layout for generated sequences.

    <dir>/frames/%04d.png   8-bit grayscale
    <dir>/masks/%04d.png    values {0, 255}
    <dir>/meta.json         canvas, T, prompts, gt_boxes, object_specs, seed

Frames are quantized to 8 bits on write; read(write(seq)) reproduces the
sequence exactly after that quantization.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import SequenceIOError, ValidationError
from .synthetic import ImageSequence, ObjectSpec, PromptSet, SceneSpec


def quantize_frames(frames: np.ndarray) -> np.ndarray:
    """Round float frames in [0, 1] to the 8-bit grid used on disk."""
    return np.round(np.clip(frames, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_sequence(seq: ImageSequence, out_dir) -> Path:
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)

    frames8 = quantize_frames(seq.frames)
    for t in range(seq.num_frames):
        Image.fromarray(frames8[t], mode="L").save(out / "frames" / f"{t:04d}.png")
        mask8 = (seq.gt_masks[t].astype(np.uint8)) * 255
        Image.fromarray(mask8, mode="L").save(out / "masks" / f"{t:04d}.png")

    spec = seq.meta
    meta = {
        "canvas": list(spec.canvas_size),
        "T": spec.num_frames,
        "prompts": [
            {"tag": tag, "text": text, "token_ids": ids}
            for tag, text, ids in zip(
                seq.prompts.attribute_tags, seq.prompts.texts, seq.prompts.prompts
            )
        ],
        "vocab_version": seq.prompts.vocab_version,
        "gt_boxes": [[float(v) for v in box] for box in seq.gt_boxes],
        "object_specs": [
            {
                "profile": o.profile,
                "shape": o.shape,
                "intensity_band": o.intensity_band,
                "trajectory": np.asarray(o.trajectory).tolist(),
                "scale_path": np.asarray(o.scale_path).tolist(),
                "texture_noise": o.texture_noise,
            }
            for o in spec.object_specs
        ],
        "target_index": spec.target_index,
        "seed": spec.rng_seed,
    }
    with open(out / "meta.json", "w") as f:
        json.dump(meta, f, indent=1)
    return out


def _load_png(path: Path) -> np.ndarray:
    if not path.is_file():
        raise SequenceIOError(f"missing file: {path}")
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("L"))
    except (OSError, SyntaxError) as exc:
        raise SequenceIOError(f"corrupt image file: {path}") from exc


def read_sequence(seq_dir) -> ImageSequence:
    root = Path(seq_dir)
    meta_path = root / "meta.json"
    if not meta_path.is_file():
        raise SequenceIOError(f"missing file: {meta_path}")
    try:
        with open(meta_path) as f:
            meta = json.load(f)
    except json.JSONDecodeError as exc:
        raise SequenceIOError(f"corrupt metadata: {meta_path}") from exc

    try:
        canvas = tuple(int(v) for v in meta["canvas"])
        t_total = int(meta["T"])
        prompts = PromptSet(
            prompts=[list(map(int, p["token_ids"])) for p in meta["prompts"]],
            attribute_tags=[p["tag"] for p in meta["prompts"]],
            texts=[p["text"] for p in meta["prompts"]],
            vocab_version=meta.get("vocab_version", "unknown"),
        )
        object_specs = [
            ObjectSpec(
                profile=o["profile"],
                shape=o["shape"],
                intensity_band=o["intensity_band"],
                trajectory=np.asarray(o["trajectory"], dtype=np.float64),
                scale_path=np.asarray(o["scale_path"], dtype=np.float64),
                texture_noise=float(o["texture_noise"]),
            )
            for o in meta["object_specs"]
        ]
        spec = SceneSpec(
            canvas_size=(canvas[0], canvas[1]),
            num_frames=t_total,
            object_specs=object_specs,
            target_index=int(meta["target_index"]),
            rng_seed=int(meta["seed"]),
        )
        gt_boxes = np.asarray(meta["gt_boxes"], dtype=np.float64)
    except (KeyError, TypeError, IndexError) as exc:
        raise SequenceIOError(f"malformed metadata in {meta_path}: {exc}") from exc

    frames = np.zeros((t_total, canvas[0], canvas[1]), dtype=np.float32)
    masks = np.zeros((t_total, canvas[0], canvas[1]), dtype=bool)
    for t in range(t_total):
        frame = _load_png(root / "frames" / f"{t:04d}.png")
        mask = _load_png(root / "masks" / f"{t:04d}.png")
        if frame.shape != canvas or mask.shape != canvas:
            raise SequenceIOError(f"frame {t} shape mismatch in {root}")
        bad = set(np.unique(mask)) - {0, 255}
        if bad:
            raise SequenceIOError(f"mask {t} in {root} has non-binary values {sorted(bad)}")
        frames[t] = frame.astype(np.float32) / 255.0
        masks[t] = mask == 255

    prompts.validate()
    if gt_boxes.shape != (t_total, 4):
        raise SequenceIOError(f"gt_boxes must be ({t_total}, 4) in {meta_path}")
    return ImageSequence(frames=frames, gt_masks=masks, gt_boxes=gt_boxes, prompts=prompts, meta=spec)


def list_sequence_dirs(data_dir) -> list[Path]:
    """All immediate subdirectories that look like sequences, sorted by name."""
    root = Path(data_dir)
    if not root.is_dir():
        raise SequenceIOError(f"dataset directory not found: {root}")
    dirs = sorted(p for p in root.iterdir() if (p / "meta.json").is_file())
    if not dirs:
        raise SequenceIOError(f"no sequences found under {root}")
    return dirs


def write_dataset(out_dir, num_sequences: int, num_frames: int, seed: int, canvas: int = 96):
    """Generate and serialize a dataset of sampled scenes."""
    from .synthetic import generate_sequence, sample_scene

    if num_sequences < 1:
        raise ValidationError("num_sequences must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(num_sequences):
        scene_seed = int(np.random.SeedSequence((seed, i)).generate_state(1)[0])
        spec = sample_scene(scene_seed, canvas=canvas, num_frames=num_frames)
        seq = generate_sequence(spec)
        paths.append(write_sequence(seq, out / f"seq_{i:04d}"))
    return paths
