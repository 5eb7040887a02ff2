"""Synthetic benchmark generator: moving, deforming geometric objects.

Every scene contains one referred target plus distractors. The target is
identified only by the intersection of its three attributes (profile,
shape, intensity band): each single attribute is shared with at least one
distractor, so no prompt alone suffices to pick the target.

Attributes have direct visual correlates so the prompts are groundable:

* profile  -> fill style: mass-like = solid, organ-like = radial gradient,
              vessel-like = striped, cavity-like = hollow ring
* shape    -> outer contour: circle, square, triangle, ellipse
* color    -> grayscale band: dark < 0.33, mid, bright > 0.66 (frames are
              single channel; they are replicated to 3 channels at model
              input)
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from . import vocab

PROFILES = ("mass-like", "organ-like", "vessel-like", "cavity-like")
SHAPES = ("circle", "square", "triangle", "ellipse")
BANDS = ("dark", "mid", "bright")
ATTRIBUTE_TAGS = ("profile", "shape", "color")

NUM_PROMPTS = 3
MIN_PROMPT_LEN = 3
MAX_PROMPT_LEN = 24

# Base-intensity ranges per band, chosen with margin around the 0.33 / 0.66
# boundaries so texture modulation (+-0.04) cannot cross a band edge.
BAND_RANGES = {"dark": (0.10, 0.25), "mid": (0.42, 0.58), "bright": (0.72, 0.90)}
BACKGROUND_BASE = 0.33
TEXTURE_AMPLITUDE = 0.04

SHAPE_ADJECTIVES = {
    "circle": "circular",
    "square": "square",
    "triangle": "triangular",
    "ellipse": "elliptical",
}

# A distractor may hide at most this fraction of the target per frame.
# Kept below the stride-4 mask head's resolution pain threshold: heavier
# occlusion leaves sliver-shaped visible regions no coarse mask can score.
MAX_TARGET_OCCLUSION = 0.25

# Hollow-profile rings keep their wall at least this fraction of the size so
# the wall spans multiple stride-4 cells.
CAVITY_INNER_FRACTION = 0.40


@dataclass
class ObjectSpec:
    """One rendered object: attributes plus its per-frame motion."""

    profile: str
    shape: str
    intensity_band: str
    trajectory: np.ndarray  # (T, 2) normalized (cx, cy)
    scale_path: np.ndarray  # (T,) fraction of min(H, W), in [0.05, 0.3]
    texture_noise: float

    def validate(self, num_frames: int) -> None:
        if self.profile not in PROFILES:
            raise ValidationError(f"unknown profile {self.profile!r}")
        if self.shape not in SHAPES:
            raise ValidationError(f"unknown shape {self.shape!r}")
        if self.intensity_band not in BANDS:
            raise ValidationError(f"unknown intensity band {self.intensity_band!r}")
        traj = np.asarray(self.trajectory, dtype=np.float64)
        scales = np.asarray(self.scale_path, dtype=np.float64)
        if traj.shape != (num_frames, 2):
            raise ValidationError(f"trajectory must be ({num_frames}, 2), got {traj.shape}")
        if scales.shape != (num_frames,):
            raise ValidationError(f"scale_path must be ({num_frames},), got {scales.shape}")
        if np.any(scales < 0.05 - 1e-9) or np.any(scales > 0.3 + 1e-9):
            raise ValidationError("scale_path values must lie in [0.05, 0.3]")
        if np.any(traj < 0.0) or np.any(traj > 1.0):
            raise ValidationError("trajectory centers must lie in [0, 1]^2")
        if self.texture_noise < 0:
            raise ValidationError("texture_noise must be >= 0")

    def attribute_triple(self) -> tuple[str, str, str]:
        return (self.profile, self.shape, self.intensity_band)


@dataclass
class SceneSpec:
    """Full description of one synthetic sequence."""

    canvas_size: tuple[int, int]  # (H, W)
    num_frames: int
    object_specs: list[ObjectSpec]
    target_index: int
    rng_seed: int

    @property
    def num_objects(self) -> int:
        return len(self.object_specs)

    def validate(self) -> None:
        h, w = self.canvas_size
        if h < 32 or w < 32:
            raise ValidationError(f"canvas must be at least 32x32, got {h}x{w}")
        if self.num_frames < 1:
            raise ValidationError("num_frames must be >= 1")
        if not (2 <= self.num_objects <= 4):
            raise ValidationError(f"num_objects must be in [2, 4], got {self.num_objects}")
        if not (0 <= self.target_index < self.num_objects):
            raise ValidationError(f"target_index {self.target_index} out of range")
        for spec in self.object_specs:
            spec.validate(self.num_frames)
        target = self.object_specs[self.target_index].attribute_triple()
        for i, spec in enumerate(self.object_specs):
            if i == self.target_index:
                continue
            triple = spec.attribute_triple()
            if triple == target:
                raise ValidationError("target attribute triple must be unique in the scene")
            if not any(a == b for a, b in zip(triple, target)):
                raise ValidationError(f"distractor {i} shares no attribute with the target")


@dataclass
class PromptSet:
    prompts: list[list[int]]  # NUM_PROMPTS token-id lists
    attribute_tags: list[str]
    texts: list[str]
    vocab_version: str = vocab.VOCAB_VERSION

    def validate(self) -> None:
        if len(self.prompts) != NUM_PROMPTS or len(self.attribute_tags) != NUM_PROMPTS:
            raise ValidationError(f"expected exactly {NUM_PROMPTS} prompts")
        for ids in self.prompts:
            if not (MIN_PROMPT_LEN <= len(ids) <= MAX_PROMPT_LEN):
                raise ValidationError("prompt length must be in [3, 24] tokens")


@dataclass
class ImageSequence:
    frames: np.ndarray  # (T, H, W) float in [0, 1]
    gt_masks: np.ndarray  # (T, H, W) bool, target visible region
    gt_boxes: np.ndarray  # (T, 4) normalized (cx, cy, w, h)
    prompts: PromptSet
    meta: SceneSpec

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def generate_prompts(target: ObjectSpec, mode: str = "full") -> PromptSet:
    """Instantiate the three attribute prompt templates for a target.

    ``mode`` selects the prompt variation used by the ablation harness:
    ``full`` gives one prompt per attribute, ``class-name-only`` names only
    the profile (the class-like attribute), ``none`` gives uninformative
    prompts. All modes return exactly three prompts.
    """
    for value, options, name in (
        (target.profile, PROFILES, "profile"),
        (target.shape, SHAPES, "shape"),
        (target.intensity_band, BANDS, "intensity band"),
    ):
        if value not in options:
            raise ValidationError(f"unknown {name} value {value!r}")

    if mode == "full":
        texts = [
            f"a sequence showing the {target.profile} structure",
            f"the object with a {SHAPE_ADJECTIVES[target.shape]} shape",
            f"the {target.intensity_band} region in the image",
        ]
    elif mode == "class-name-only":
        texts = [f"an image of the {target.profile} structure"] * NUM_PROMPTS
    elif mode == "none":
        texts = ["an image of an object"] * NUM_PROMPTS
    else:
        raise ValidationError(f"unknown prompt mode {mode!r}")

    prompt_set = PromptSet(
        prompts=[vocab.tokenize(t) for t in texts],
        attribute_tags=list(ATTRIBUTE_TAGS),
        texts=texts,
    )
    prompt_set.validate()
    return prompt_set


def _pixel_grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    ys = np.arange(h, dtype=np.float64) + 0.5
    xs = np.arange(w, dtype=np.float64) + 0.5
    return np.meshgrid(xs, ys)  # xx, yy each (H, W)


def _shape_mask(shape, cx, cy, size, rotation, h, w, ellipse_ratio):
    """Binary mask of one shape instance; coordinates in pixels."""
    xx, yy = _pixel_grid(h, w)
    dx, dy = xx - cx, yy - cy
    cos_t, sin_t = math.cos(rotation), math.sin(rotation)
    xr = cos_t * dx + sin_t * dy
    yr = -sin_t * dx + cos_t * dy
    half = size / 2.0
    if shape == "circle":
        return dx * dx + dy * dy <= half * half
    if shape == "ellipse":
        a, b = half, half / ellipse_ratio
        return (xr / a) ** 2 + (yr / b) ** 2 <= 1.0
    if shape == "square":
        s = half * 0.9
        return np.maximum(np.abs(xr), np.abs(yr)) <= s
    if shape == "triangle":
        # equilateral triangle, circumradius = half, apex along +y before rotation
        verts = []
        for k in range(3):
            ang = math.pi / 2 + k * 2 * math.pi / 3
            verts.append((half * math.cos(ang), half * math.sin(ang)))
        inside = np.ones((h, w), dtype=bool)
        for k in range(3):
            x0, y0 = verts[k]
            x1, y1 = verts[(k + 1) % 3]
            cross = (x1 - x0) * (yr - y0) - (y1 - y0) * (xr - x0)
            inside &= cross >= 0
        return inside
    raise ValidationError(f"unknown shape {shape!r}")


def _object_fill(spec: ObjectSpec, base: float, mask, cx, cy, size, rotation, h, w, rng):
    """Per-pixel intensities for one object, restricted to ``mask``."""
    xx, yy = _pixel_grid(h, w)
    dx, dy = xx - cx, yy - cy
    values = np.full((h, w), base, dtype=np.float64)
    amp = TEXTURE_AMPLITUDE
    if spec.profile == "organ-like":
        dist = np.sqrt(dx * dx + dy * dy) / max(size / 2.0, 1.0)
        values += amp * (1.0 - 2.0 * np.clip(dist, 0.0, 1.0))
    elif spec.profile == "vessel-like":
        cos_t, sin_t = math.cos(rotation), math.sin(rotation)
        xr = cos_t * dx + sin_t * dy
        values += amp * np.sin(2.0 * math.pi * 2.5 * xr / max(size, 1.0))
    # mass-like and cavity-like fill uniformly
    values += rng.normal(0.0, spec.texture_noise, size=(h, w))
    return np.where(mask, values, 0.0)


def _render_object_mask(spec: ObjectSpec, t: int, h: int, w: int, rotation, ellipse_ratio):
    cx = spec.trajectory[t][0] * w
    cy = spec.trajectory[t][1] * h
    size = spec.scale_path[t] * min(h, w)
    outer = _shape_mask(spec.shape, cx, cy, size, rotation, h, w, ellipse_ratio)
    if spec.profile == "cavity-like":
        inner = _shape_mask(
            spec.shape, cx, cy, size * CAVITY_INNER_FRACTION, rotation, h, w, ellipse_ratio
        )
        ring = outer & ~inner
        # guard against a degenerate all-inner ring at tiny scales
        return ring if ring.any() else outer
    return outer


def tight_box(mask: np.ndarray) -> np.ndarray:
    """Tight normalized (cx, cy, w, h) box around a non-empty binary mask."""
    if not mask.any():
        raise ValidationError("cannot compute a box for an empty mask")
    h, w = mask.shape
    ys, xs = np.nonzero(mask)
    x0, x1 = xs.min(), xs.max()
    y0, y1 = ys.min(), ys.max()
    bw = (x1 - x0 + 1) / w
    bh = (y1 - y0 + 1) / h
    cx = (x0 + x1 + 1) / (2.0 * w)
    cy = (y0 + y1 + 1) / (2.0 * h)
    return np.array([cx, cy, bw, bh], dtype=np.float64)


def _render_scene(spec: SceneSpec):
    """Render frames plus per-object visible masks; deterministic in rng_seed."""
    h, w = spec.canvas_size
    t_total = spec.num_frames
    rng = np.random.default_rng(np.random.SeedSequence((spec.rng_seed, 0xC0FFEE)))

    # Per-object static rendering draws, in list order.
    rotations, ratios, bases = [], [], []
    for obj in spec.object_specs:
        rotations.append(rng.uniform(0.0, math.pi / 4))
        ratios.append(rng.uniform(1.6, 2.2))
        lo, hi = BAND_RANGES[obj.intensity_band]
        bases.append(rng.uniform(lo, hi))
    bg_base = BACKGROUND_BASE + rng.uniform(-0.015, 0.015)

    frames = np.zeros((t_total, h, w), dtype=np.float64)
    own_masks = np.zeros((t_total, spec.num_objects, h, w), dtype=bool)
    for t in range(t_total):
        canvas = bg_base + rng.normal(0.0, 0.01, size=(h, w))
        for i, obj in enumerate(spec.object_specs):
            mask = _render_object_mask(obj, t, h, w, rotations[i], ratios[i])
            own_masks[t, i] = mask
            fill = _object_fill(
                obj, bases[i], mask,
                obj.trajectory[t][0] * w, obj.trajectory[t][1] * h,
                obj.scale_path[t] * min(h, w), rotations[i], h, w, rng,
            )
            canvas = np.where(mask, fill, canvas)
        frames[t] = np.clip(canvas, 0.0, 1.0)

    # Visibility honors list order: later objects occlude earlier ones.
    visible = own_masks.copy()
    for t in range(t_total):
        for i in range(spec.num_objects):
            for j in range(i + 1, spec.num_objects):
                visible[t, i] &= ~own_masks[t, j]
    return frames, own_masks, visible


def generate_sequence(spec: SceneSpec) -> ImageSequence:
    """Render a scene spec into frames, target masks, boxes, and prompts."""
    spec.validate()
    frames, own_masks, visible = _render_scene(spec)
    ti = spec.target_index
    t_total = spec.num_frames

    gt_masks = visible[:, ti]
    for t in range(t_total):
        if not own_masks[t, ti].any():
            raise ValidationError(f"target renders empty at frame {t}")
        if not gt_masks[t].any():
            raise ValidationError(f"target fully occluded at frame {t}")
    gt_boxes = np.stack([tight_box(gt_masks[t]) for t in range(t_total)])

    prompts = generate_prompts(spec.object_specs[ti])
    return ImageSequence(
        frames=frames.astype(np.float32),
        gt_masks=gt_masks,
        gt_boxes=gt_boxes,
        prompts=prompts,
        meta=spec,
    )


def _smooth_path(rng, t_total, lo, hi, start_lo, start_hi, step_sigma, momentum=0.8):
    """Smooth random walk clipped to [lo, hi]."""
    pos = rng.uniform(start_lo, start_hi)
    vel = rng.normal(0.0, step_sigma)
    path = []
    for _ in range(t_total):
        path.append(pos)
        vel = momentum * vel + rng.normal(0.0, step_sigma)
        pos = float(np.clip(pos + vel, lo, hi))
    return np.array(path)


def _sample_object(rng, triple, t_total, is_target):
    profile, shape, band = triple
    cx = _smooth_path(rng, t_total, 0.15, 0.85, 0.2, 0.8, 0.02)
    cy = _smooth_path(rng, t_total, 0.15, 0.85, 0.2, 0.8, 0.02)
    # targets stay large enough for the stride-4 mask grid to resolve them
    base_scale = rng.uniform(0.25, 0.295) if is_target else rng.uniform(0.10, 0.28)
    wiggle = _smooth_path(rng, t_total, -0.08, 0.08, -0.04, 0.04, 0.012)
    scale_path = np.clip(base_scale * (1.0 + wiggle), 0.05, 0.3)
    return ObjectSpec(
        profile=profile,
        shape=shape,
        intensity_band=band,
        trajectory=np.stack([cx, cy], axis=1),
        scale_path=scale_path,
        texture_noise=float(rng.uniform(0.005, 0.015)),
    )


def _other(rng, options, value):
    choices = [v for v in options if v != value]
    return choices[rng.integers(0, len(choices))]


def sample_scene(seed: int, canvas: int = 96, num_frames: int = 8) -> SceneSpec:
    """Draw a random valid scene.

    Guarantees the full attribute-intersection property: the target triple
    is unique, and each of the three attributes is shared by at least one
    distractor. Rejection-resamples trajectories until the target is never
    occluded beyond MAX_TARGET_OCCLUSION and never fully hidden.
    """
    for attempt in range(128):
        rng = np.random.default_rng(np.random.SeedSequence((seed, attempt)))
        num_objects = int(rng.integers(3, 5))
        target_triple = (
            PROFILES[rng.integers(0, len(PROFILES))],
            SHAPES[rng.integers(0, len(SHAPES))],
            BANDS[rng.integers(0, len(BANDS))],
        )
        num_distractors = num_objects - 1
        # distribute the three attribute indices so every one is covered
        attr_order = list(rng.permutation(3))
        shared_sets = [set() for _ in range(num_distractors)]
        for k, attr in enumerate(attr_order):
            shared_sets[k % num_distractors].add(attr)

        distractor_triples = []
        for shared in shared_sets:
            triple = []
            for a, (value, options) in enumerate(
                zip(target_triple, (PROFILES, SHAPES, BANDS))
            ):
                triple.append(value if a in shared else _other(rng, options, value))
            distractor_triples.append(tuple(triple))

        objects = [_sample_object(rng, t, num_frames, False) for t in distractor_triples]
        target_index = int(rng.integers(0, num_objects))
        objects.insert(target_index, _sample_object(rng, target_triple, num_frames, True))

        spec = SceneSpec(
            canvas_size=(canvas, canvas),
            num_frames=num_frames,
            object_specs=objects,
            target_index=target_index,
            rng_seed=int(np.random.SeedSequence((seed, attempt, 1)).generate_state(1)[0]),
        )
        try:
            spec.validate()
        except ValidationError:
            continue
        _, own, visible = _render_scene(spec)
        ok = True
        for t in range(num_frames):
            own_area = own[t, target_index].sum()
            vis_area = visible[t, target_index].sum()
            if own_area == 0 or vis_area < (1.0 - MAX_TARGET_OCCLUSION) * own_area:
                ok = False
                break
        if ok:
            return spec
    raise ValidationError(f"could not sample a valid scene for seed {seed}")
