import pytest
import torch

from maskprop.regressor import (
    Regressor,
    RegressorSpec,
    SizeError,
    count_parameters,
    rollout,
)

TOY = RegressorSpec(encoder_channels=(4, 8), decoder_last_channels=8, global_conv_kernel=3, base_image_size=16)


def _inputs(b=2, size=64, k=None, dtype=torch.float32, seed=0):
    g = torch.Generator().manual_seed(seed)
    frame_shape = (b, 3, size, size) if k is None else (b, k, 3, size, size)
    return (
        torch.rand(frame_shape, generator=g, dtype=dtype),
        torch.rand(b, 3, size, size, generator=g, dtype=dtype),
        (torch.rand(b, 1, size, size, generator=g, dtype=dtype) > 0.5).to(dtype),
        torch.rand(b, 1, size, size, generator=g, dtype=dtype),
    )


@pytest.fixture
def model():
    torch.manual_seed(0)
    return Regressor(RegressorSpec())


def test_encode_shape(model):
    frame, _, mask, _ = _inputs()
    assert model.encode(frame, mask).shape == (2, 64, 4, 4)


def test_encode_deterministic(model):
    frame, _, mask, _ = _inputs()
    assert torch.equal(model.encode_reference(frame, mask), model.encode_reference(frame, mask))


def test_encode_size_error(model):
    with pytest.raises(SizeError):
        model.encode(torch.rand(1, 3, 63, 63), torch.rand(1, 1, 63, 63))


def test_global_match_shape_and_asymmetry(model):
    a, b = torch.randn(1, 64, 4, 4), torch.randn(1, 64, 4, 4)
    out = model.global_match(a, b)
    assert out.shape == (1, 64, 4, 4)
    assert not torch.allclose(out, model.global_match(b, a))


def test_global_match_shape_mismatch(model):
    with pytest.raises(SizeError):
        model.global_match(torch.randn(1, 64, 4, 4), torch.randn(1, 64, 2, 2))


def test_decode_empty_skip_equals_zero_skip(model):
    frame, _, _, prev = _inputs()
    feats = model.encoder(frame, prev)
    matched = model.global_match(feats[-1], feats[-1])
    raw = torch.cat([frame, prev], 1)
    logits_empty, skip = model.decode(matched, feats, raw, None)
    logits_zero, _ = model.decode(matched, feats, raw, torch.zeros(2, 2, 64, 64))
    assert torch.equal(logits_empty, logits_zero)
    assert logits_empty.shape == (2, 1, 64, 64)
    # last decoder layer has 16 channels; the skip keeps 1/8 of them
    assert skip.shape == (2, 16 // 8, 64, 64)


def test_decode_rejects_bad_skip(model):
    frame, _, _, prev = _inputs()
    feats = model.encoder(frame, prev)
    matched = model.global_match(feats[-1], feats[-1])
    with pytest.raises(SizeError):
        model.decode(matched, feats, torch.cat([frame, prev], 1), torch.zeros(2, 3, 64, 64))


def test_forward_range_and_determinism(model):
    frame, ref_frame, ref_mask, prev = _inputs()
    y1, s1 = model(frame, ref_frame, ref_mask, prev)
    y2, s2 = model(frame, ref_frame, ref_mask, prev)
    assert y1.shape == (2, 1, 64, 64)
    assert y1.min() >= 0 and y1.max() <= 1
    assert torch.equal(y1, y2) and torch.equal(s1, s2)


def test_forward_sensitive_to_prev_mask():
    torch.manual_seed(1)
    model = Regressor(TOY).double()
    frame, ref_frame, ref_mask, prev = _inputs(b=1, size=16, dtype=torch.float64)
    direction = torch.randn_like(prev)
    prev.requires_grad_(True)
    y, _ = model(frame, ref_frame, ref_mask, prev)
    (grad,) = torch.autograd.grad(y.sum(), prev)
    h = 1e-6
    with torch.no_grad():
        fd = (model(frame, ref_frame, ref_mask, prev + h * direction)[0].sum()
              - model(frame, ref_frame, ref_mask, prev - h * direction)[0].sum()) / (2 * h)
    analytic = (grad * direction).sum()
    assert abs(fd) > 1e-6
    assert abs(analytic - fd) / abs(fd) < 1e-5


def test_rollout_k1_is_single_forward(model):
    frames, ref_frame, ref_mask, prior = _inputs(k=1)
    masks, skip = rollout(model, frames, ref_frame, ref_mask, prior)
    y, s = model(frames[:, 0], ref_frame, ref_mask, prior)
    assert torch.equal(masks[:, 0], y[:, 0]) and torch.equal(skip, s)


def test_rollout_returns_k_masks(model):
    frames, ref_frame, ref_mask, prior = _inputs(k=4)
    masks, skip = rollout(model, frames, ref_frame, ref_mask, prior)
    assert masks.shape == (2, 4, 64, 64) and skip.shape == (2, 2, 64, 64)


def test_rollout_gradient_reaches_earlier_predictions():
    # the first frame influences the last prediction only through the mask/skip chain
    torch.manual_seed(2)
    model = Regressor(TOY).double()
    frames, ref_frame, ref_mask, prior = _inputs(b=1, size=16, k=3, dtype=torch.float64, seed=4)
    probe = torch.randn(1, 16, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(9))
    direction = torch.zeros_like(frames)
    direction[:, 0] = torch.randn(1, 3, 16, 16, dtype=torch.float64)

    def scalar(fr):
        return (rollout(model, fr, ref_frame, ref_mask, prior)[0][:, -1] * probe).sum()

    fr = frames.clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(scalar(fr), fr)
    analytic = (grad * direction).sum()
    h = 1e-6
    with torch.no_grad():
        fd = (scalar(frames + h * direction) - scalar(frames - h * direction)) / (2 * h)
    assert abs(analytic) > 1e-8
    assert abs(analytic - fd) / abs(fd) < 1e-5


def test_siamese_encoder_shares_parameters():
    shared = Regressor(RegressorSpec(), siamese=True)
    duplicated = Regressor(RegressorSpec(), siamese=False)
    assert count_parameters(shared) < count_parameters(duplicated)
    assert count_parameters(duplicated) - count_parameters(shared) == count_parameters(shared.encoder)


def test_spec_validation():
    with pytest.raises(ValueError):
        RegressorSpec(encoder_channels=(8,))
    with pytest.raises(ValueError):
        RegressorSpec(decoder_last_channels=12)
