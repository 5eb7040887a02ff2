import pytest
import torch

from refprop.errors import ValidationError
from refprop.heads import (
    BoxHead,
    ClassHead,
    DYNAMIC_PARAM_COUNT,
    FeaturePyramid,
    MaskController,
    apply_box_offset,
    dynamic_mask,
    relative_coordinates,
    split_dynamic_params,
)
from refprop.transformer import DeformableEncoder


@pytest.fixture(scope="module")
def memory_96():
    torch.manual_seed(0)
    enc = DeformableEncoder()
    maps = [torch.randn(256, 12, 12), torch.randn(256, 6, 6), torch.randn(256, 3, 3)]
    return enc(maps)


def test_parameter_count_is_169():
    # (8 features + 2 coords) * 8 + 8, then 8*8 + 8, then 8*1 + 1
    assert (10 * 8 + 8) + (8 * 8 + 8) + (8 * 1 + 1) == 169
    assert DYNAMIC_PARAM_COUNT == 169


def test_fpn_output_stride_and_channels(memory_96):
    torch.manual_seed(1)
    fpn = FeaturePyramid()
    out = fpn(memory_96, torch.randn(256, 24, 24))
    assert out.shape == (8, 24, 24)
    assert torch.isfinite(out).all()


def test_box_head_zero_offsets_identity():
    base = torch.tensor([[0.3, 0.7, 0.2, 0.4], [0.5, 0.5, 0.9, 0.1]])
    out = apply_box_offset(base, torch.zeros(2, 4))
    torch.testing.assert_close(out, base, atol=1e-6, rtol=0)


def test_box_head_outputs_bounded():
    torch.manual_seed(2)
    head = BoxHead()
    for _ in range(5):
        out = head(torch.randn(6, 256) * 10, torch.rand(6, 4))
        assert (out >= 0).all() and (out <= 1).all()


def test_box_offset_moves_cx_monotonically():
    base = torch.tensor([[0.4, 0.5, 0.2, 0.2]])
    previous = -1.0
    for delta in torch.linspace(-6, 6, 25):
        offsets = torch.zeros(1, 4)
        offsets[0, 0] = delta
        cx = float(apply_box_offset(base, offsets)[0, 0])
        assert cx > previous
        previous = cx


def test_box_head_stable_near_saturation():
    head = BoxHead().eval()
    base = torch.tensor([[1e-12, 1.0 - 1e-12, 0.5, 0.5]])
    q = torch.zeros(1, 256)
    out1 = head(q, base)
    out2 = head(q, base + 1e-10)
    assert torch.isfinite(out1).all()
    torch.testing.assert_close(out1, out2, atol=1e-6, rtol=0)


def test_controller_output_layout():
    torch.manual_seed(3)
    ctrl = MaskController()
    theta = ctrl(torch.randn(4, 256))
    assert theta.shape == (4, DYNAMIC_PARAM_COUNT)
    assert torch.isfinite(theta).all()
    b = ctrl(torch.ones(2, 256))
    assert torch.equal(b[0], b[1])
    layers = split_dynamic_params(theta[0])
    assert [tuple(w.shape) for w, _ in layers] == [(8, 10), (8, 8), (1, 8)]
    with pytest.raises(ValidationError):
        split_dynamic_params(torch.zeros(100))


def test_dynamic_mask_zero_weights_collapse_to_bias():
    theta = torch.zeros(1, DYNAMIC_PARAM_COUNT)
    theta[0, -1] = 3.25  # final conv bias
    fm = torch.randn(8, 6, 6)
    out = dynamic_mask(fm, torch.tensor([[0.5, 0.5, 0.2, 0.2]]), theta)
    torch.testing.assert_close(out, torch.full((1, 6, 6), 3.25))


def test_dynamic_mask_matches_pointwise_loop_oracle():
    torch.manual_seed(4)
    fm = torch.randn(8, 8, 8, dtype=torch.float64)
    boxes = torch.tensor([[0.4, 0.6, 0.3, 0.3]], dtype=torch.float64)
    theta = torch.randn(1, DYNAMIC_PARAM_COUNT, dtype=torch.float64) * 0.3
    out = dynamic_mask(fm, boxes, theta)

    layers = split_dynamic_params(theta[0])
    coords = relative_coordinates(boxes, 8, 8)[0]
    for y in range(8):
        for x in range(8):
            vec = torch.cat([fm[:, y, x], coords[:, y, x]])
            for i, (w, b) in enumerate(layers):
                vec = w @ vec + b
                if i < 2:
                    vec = torch.relu(vec)
            assert abs(float(vec[0]) - float(out[0, y, x])) < 1e-5


def test_relative_coordinates_zero_at_box_center():
    h = w = 16
    boxes = torch.tensor([[0.53, 0.22, 0.3, 0.3]])
    coords = relative_coordinates(boxes, h, w)
    cx_pix = int(0.53 * w)
    cy_pix = int(0.22 * h)
    # the cell containing the center is within half a pixel of (0, 0)
    assert abs(float(coords[0, 0, cy_pix, cx_pix])) <= 0.5 / w + 1e-6
    assert abs(float(coords[0, 1, cy_pix, cx_pix])) <= 0.5 / h + 1e-6


def test_dynamic_mask_channel_requirement():
    with pytest.raises(ValidationError):
        dynamic_mask(torch.randn(4, 6, 6), torch.rand(1, 4), torch.zeros(1, DYNAMIC_PARAM_COUNT))


def test_class_head_shape_and_determinism():
    torch.manual_seed(5)
    head = ClassHead()
    q = torch.randn(7, 256)
    a = head(q)
    assert a.shape == (7, 1)
    assert torch.equal(a, head(q.clone()))
    assert ((torch.sigmoid(a) > 0) & (torch.sigmoid(a) < 1)).all()


def central_difference(fn, x, eps=1e-6):
    grad = torch.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + eps
        hi = float(fn())
        flat[i] = orig - eps
        lo = float(fn())
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def test_dice_gradient_through_dynamic_mask_matches_finite_differences():
    from refprop.objectives import dice_loss

    torch.manual_seed(6)
    gt = (torch.rand(8, 8) > 0.6).double()
    fm = torch.randn(8, 8, 8, dtype=torch.float64, requires_grad=True)
    theta = (torch.randn(1, DYNAMIC_PARAM_COUNT, dtype=torch.float64) * 0.3).requires_grad_(True)
    boxes = torch.tensor([[0.5, 0.5, 0.4, 0.4]], dtype=torch.float64)

    def loss_fn():
        return dice_loss(dynamic_mask(fm, boxes, theta)[0], gt)

    loss = loss_fn()
    grad_fm, grad_theta = torch.autograd.grad(loss, (fm, theta))
    with torch.no_grad():
        num_theta = central_difference(loss_fn, theta)
        num_fm_slice = central_difference(loss_fn, fm)
    for analytic, numeric in ((grad_theta, num_theta), (grad_fm, num_fm_slice)):
        denom = analytic.abs().clamp(min=1e-5)
        rel = ((analytic - numeric).abs() / denom)
        assert float(rel.max()) < 1e-3
