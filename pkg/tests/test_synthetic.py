import numpy as np
import pytest
from scipy import ndimage

from refprop import vocab
from refprop.errors import ValidationError
from refprop.synthetic import (
    ATTRIBUTE_TAGS,
    ImageSequence,
    ObjectSpec,
    SceneSpec,
    generate_prompts,
    generate_sequence,
    sample_scene,
    tight_box,
)


def _static_object(profile, shape, band, center, scale, t=3):
    return ObjectSpec(
        profile=profile,
        shape=shape,
        intensity_band=band,
        trajectory=np.tile(np.asarray(center, dtype=np.float64), (t, 1)),
        scale_path=np.full(t, scale),
        texture_noise=0.01,
    )


def _two_object_spec(t=3, seed=7, target_shape="circle"):
    target = _static_object("mass-like", target_shape, "bright", (0.3, 0.3), 0.2, t)
    distractor = _static_object("mass-like", "square", "dark", (0.72, 0.72), 0.18, t)
    return SceneSpec(
        canvas_size=(96, 96),
        num_frames=t,
        object_specs=[target, distractor],
        target_index=0,
        rng_seed=seed,
    )


def brute_force_box(mask):
    """Independent tight-box oracle: explicit min/max over mask pixels."""
    h, w = mask.shape
    xs, ys = [], []
    for y in range(h):
        for x in range(w):
            if mask[y, x]:
                xs.append(x)
                ys.append(y)
    x0, x1, y0, y1 = min(xs), max(xs), min(ys), max(ys)
    return np.array(
        [
            (x0 + x1 + 1) / (2 * w),
            (y0 + y1 + 1) / (2 * h),
            (x1 - x0 + 1) / w,
            (y1 - y0 + 1) / h,
        ]
    )


def test_same_spec_renders_identical_sequences():
    a = generate_sequence(_two_object_spec())
    b = generate_sequence(_two_object_spec())
    assert np.array_equal(a.frames, b.frames)
    assert np.array_equal(a.gt_masks, b.gt_masks)
    assert np.array_equal(a.gt_boxes, b.gt_boxes)


def test_unoccluded_circle_target_is_one_connected_component():
    seq = generate_sequence(_two_object_spec(target_shape="circle"))
    for t in range(seq.num_frames):
        _, count = ndimage.label(seq.gt_masks[t])
        assert count == 1


def test_boxes_match_brute_force_tight_box_oracle():
    seq = generate_sequence(_two_object_spec())
    for t in range(seq.num_frames):
        np.testing.assert_allclose(seq.gt_boxes[t], brute_force_box(seq.gt_masks[t]))


def test_tight_box_rejects_empty_mask():
    with pytest.raises(ValidationError):
        tight_box(np.zeros((8, 8), dtype=bool))


def test_out_of_range_counts_rejected():
    spec = _two_object_spec()
    spec.object_specs = spec.object_specs[:1]
    with pytest.raises(ValidationError):
        generate_sequence(spec)


def test_duplicate_target_triple_rejected():
    target = _static_object("mass-like", "circle", "dark", (0.3, 0.3), 0.2)
    clone = _static_object("mass-like", "circle", "dark", (0.7, 0.7), 0.2)
    spec = SceneSpec(
        canvas_size=(96, 96), num_frames=3, object_specs=[target, clone],
        target_index=0, rng_seed=1,
    )
    with pytest.raises(ValidationError):
        generate_sequence(spec)


def test_disjoint_distractor_rejected():
    target = _static_object("mass-like", "circle", "dark", (0.3, 0.3), 0.2)
    other = _static_object("organ-like", "square", "bright", (0.7, 0.7), 0.2)
    spec = SceneSpec(
        canvas_size=(96, 96), num_frames=3, object_specs=[target, other],
        target_index=0, rng_seed=1,
    )
    with pytest.raises(ValidationError):
        generate_sequence(spec)


def test_prompts_have_three_attribute_templates():
    target = _static_object("mass-like", "circle", "dark", (0.5, 0.5), 0.2)
    ps = generate_prompts(target)
    assert len(ps.prompts) == 3
    assert ps.attribute_tags == list(ATTRIBUTE_TAGS)
    assert ps.texts[0] == "a sequence showing the mass-like structure"
    assert ps.texts[1] == "the object with a circular shape"
    assert ps.texts[2] == "the dark region in the image"


def test_prompts_deterministic():
    target = _static_object("vessel-like", "ellipse", "mid", (0.5, 0.5), 0.2)
    assert generate_prompts(target).prompts == generate_prompts(target).prompts


def test_prompt_tokens_all_in_vocabulary():
    # scan every template output against the vocabulary file
    from refprop.synthetic import BANDS, PROFILES, SHAPES

    for profile in PROFILES:
        for shape in SHAPES:
            for band in BANDS:
                target = _static_object(profile, shape, band, (0.5, 0.5), 0.2)
                for mode in ("full", "class-name-only", "none"):
                    for ids, text in zip(
                        generate_prompts(target, mode).prompts,
                        generate_prompts(target, mode).texts,
                    ):
                        assert vocab.UNK_ID not in ids, text
                        assert 3 <= len(ids) <= 24


def test_unknown_attribute_rejected():
    target = _static_object("mass-like", "circle", "dark", (0.5, 0.5), 0.2)
    target.shape = "hexagon"
    with pytest.raises(ValidationError):
        generate_prompts(target)
    with pytest.raises(ValidationError):
        generate_prompts(_static_object("mass-like", "circle", "dark", (0.5, 0.5), 0.2), mode="bogus")


def test_sampled_scenes_have_unique_triple_and_full_attribute_cover():
    # exhaustive attribute comparison on a batch of sampled scenes
    for seed in range(8):
        spec = sample_scene(seed, canvas=64, num_frames=4)
        target = spec.object_specs[spec.target_index].attribute_triple()
        matches_all = 0
        covered = set()
        for i, obj in enumerate(spec.object_specs):
            triple = obj.attribute_triple()
            if triple == target:
                matches_all += 1
            if i != spec.target_index:
                for a in range(3):
                    if triple[a] == target[a]:
                        covered.add(a)
        assert matches_all == 1  # the target itself only
        assert covered == {0, 1, 2}


def test_sampled_scene_target_never_fully_hidden_and_occlusion_capped():
    from refprop.synthetic import MAX_TARGET_OCCLUSION, _render_scene

    spec = sample_scene(11, canvas=64, num_frames=6)
    _, own, visible = _render_scene(spec)
    for t in range(spec.num_frames):
        own_area = own[t, spec.target_index].sum()
        vis_area = visible[t, spec.target_index].sum()
        assert own_area > 0
        assert vis_area >= (1.0 - MAX_TARGET_OCCLUSION) * own_area


def test_generated_sequence_dice_identity_and_invariants():
    from refprop.objectives import dice_score
    import torch

    seq = generate_sequence(sample_scene(3, canvas=64, num_frames=4))
    assert seq.frames.min() >= 0.0 and seq.frames.max() <= 1.0
    for t in range(seq.num_frames):
        gt = torch.as_tensor(seq.gt_masks[t])
        assert dice_score(gt, gt) == 1.0
        np.testing.assert_allclose(seq.gt_boxes[t], tight_box(seq.gt_masks[t]))
