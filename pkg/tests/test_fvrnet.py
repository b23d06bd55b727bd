import numpy as np
import pytest
import torch

from uvinpaint.attention import resolve_reference_indices
from uvinpaint.errors import ParameterError
from uvinpaint.fvrnet import (FVRNet, FeatureExtractorSpec, Stage2Batch,
                              assemble_stage2_input, build_feature_extractor,
                              composite, fvrnet_forward, perceptual_loss,
                              stage2_loss)
from uvinpaint.uvgeom import ImageFrameSet


def _img_frame(seed, h=64, w=64, mask_frac=0.15):
    rng = np.random.default_rng(seed)
    i_gt = rng.random((h, w, 3)).astype(np.float32)
    i_m = (rng.random((h, w, 1)) < mask_frac).astype(np.float32)
    i_in = (i_gt * (1 - i_m)).astype(np.float32)
    i_render = rng.random((h, w, 3)).astype(np.float32)
    i_valid = (rng.random((h, w, 1)) > 0.3).astype(np.float32)
    return ImageFrameSet(i_in=i_in, i_gt=i_gt, i_missing=i_m, i_valid=i_valid,
                         i_render=i_render,
                         i_render_masked=(i_m * i_render).astype(np.float32))


def test_assemble_shape_224():
    stack = assemble_stage2_input(_img_frame(0, 224, 224))
    assert stack.shape == (7, 224, 224)


def test_masked_render_zero_when_unmasked():
    frame = _img_frame(1)
    frame.i_missing = np.zeros_like(frame.i_missing)
    frame.i_render_masked = (frame.i_missing * frame.i_render).astype(np.float32)
    stack = assemble_stage2_input(frame)
    assert stack[3:6].abs().max() == 0.0


def test_assemble_channel_order():
    frame = _img_frame(2)
    stack = assemble_stage2_input(frame)
    assert torch.equal(stack[6], torch.from_numpy(frame.i_missing[:, :, 0]))
    assert torch.equal(stack[0:3], torch.from_numpy(frame.i_in).permute(2, 0, 1))


def test_assemble_requires_maps():
    frame = _img_frame(3)
    frame.i_render_masked = None
    with pytest.raises(ParameterError):
        assemble_stage2_input(frame)


def _batch(n=5, target=2, mask_frac=0.15):
    frames = [_img_frame(20 + i, mask_frac=mask_frac) for i in range(n)]
    refs = resolve_reference_indices(target, n, (-2, -1, 1, 2))
    return Stage2Batch(frames=frames, target_index=target,
                       reference_indices=refs, offsets=(-2, -1, 1, 2))


def test_forward_contract():
    net = FVRNet(base_width=8, seed=0)
    i_out, trace = fvrnet_forward(_batch(), net)
    assert i_out.shape == (3, 64, 64)
    assert float(i_out.min()) >= 0.0 and float(i_out.max()) <= 1.0
    assert trace.n_frames == 5      # target plus four references


def test_forward_fully_masked_still_defined():
    net = FVRNet(base_width=8, seed=1)
    batch = _batch(mask_frac=1.0)
    i_out, trace = fvrnet_forward(batch, net)
    assert torch.isfinite(i_out).all()
    assert (trace.argmax_ref_index == -1).all()     # empty support everywhere


def test_forward_deterministic():
    a = FVRNet(base_width=8, seed=7)
    b = FVRNet(base_width=8, seed=7)
    batch = _batch()
    with torch.no_grad():
        assert torch.equal(fvrnet_forward(batch, a)[0],
                           fvrnet_forward(batch, b)[0])


def test_ma_support_soundness():
    net = FVRNet(base_width=8, seed=2)
    batch = _batch()
    stacks = torch.stack([assemble_stage2_input(f) for f in batch.frames])
    missing = torch.stack([
        torch.from_numpy(f.i_missing).permute(2, 0, 1) for f in batch.frames])
    with torch.no_grad():
        _, traces = net.complete_clip(stacks, missing, [2],
                                      [batch.reference_indices])
    trace = traces[0]
    vmasks = net.valid_masks(missing)
    support = [vmasks[2, 0]] + [vmasks[r, 0] for r in batch.reference_indices]
    s = trace.window_s
    r = s // 2
    h, w = trace.argmax_ref_index.shape
    weights = trace.weights.reshape(h, w, trace.n_frames, s * s)
    for fi, mask in enumerate(support):
        m = mask.numpy()
        for y in range(h):
            for x in range(w):
                for j in range(s * s):
                    yy, xx = y + j // s - r, x + j % s - r
                    if 0 <= yy < h and 0 <= xx < w and m[yy, xx] < 0.5:
                        assert weights[y, x, fi, j] == 0.0


def test_image_frame_invariants():
    from uvinpaint.pipeline import build_image_frame
    rng = np.random.default_rng(9)
    gt = rng.random((16, 16, 3)).astype(np.float32)
    mask = (rng.random((16, 16, 1)) > 0.7).astype(np.float32)
    render = rng.random((16, 16, 3)).astype(np.float32)
    valid = (rng.random((16, 16, 1)) > 0.4).astype(np.float32)
    i_in = (gt * (1 - mask)).astype(np.float32)
    frame = build_image_frame(gt, i_in, mask, render, valid)
    assert np.array_equal(frame.i_render_masked, mask * render)
    assert np.array_equal(frame.i_in, frame.i_gt * (1 - frame.i_missing))


def test_composite_trivials():
    rng = np.random.default_rng(0)
    i_out = rng.random((8, 8, 3)).astype(np.float32)
    i_in = rng.random((8, 8, 3)).astype(np.float32)
    zeros = np.zeros((8, 8, 1), dtype=np.float32)
    ones = np.ones((8, 8, 1), dtype=np.float32)
    assert np.array_equal(composite(i_out, i_in, zeros), i_in)
    assert np.array_equal(composite(i_out, i_in, ones), i_out)


def test_composite_per_pixel_oracle_bitwise():
    rng = np.random.default_rng(1)
    i_out = rng.random((6, 7, 3)).astype(np.float32)
    i_in = rng.random((6, 7, 3)).astype(np.float32)
    m = (rng.random((6, 7, 1)) > 0.5).astype(np.float32)
    got = composite(i_out, i_in, m)
    for y in range(6):
        for x in range(7):
            expect = i_out[y, x] if m[y, x, 0] == 1.0 else i_in[y, x]
            assert np.array_equal(got[y, x], expect)


def test_composite_idempotent_and_exact_outside():
    rng = np.random.default_rng(2)
    i_out = rng.random((8, 8, 3)).astype(np.float32)
    i_in = rng.random((8, 8, 3)).astype(np.float32)
    m = (rng.random((8, 8, 1)) > 0.6).astype(np.float32)
    once = composite(i_out, i_in, m)
    twice = composite(once, i_in, m)
    assert np.array_equal(once, twice)
    outside = m[:, :, 0] == 0.0
    assert np.array_equal(once[outside], i_in[outside])


def test_extractor_spec_validation():
    with pytest.raises(ParameterError):
        FeatureExtractorSpec(kind="fancy_net")
    with pytest.raises(ParameterError):
        FeatureExtractorSpec(layer_index=4)
    with pytest.raises(ParameterError):
        build_feature_extractor(FeatureExtractorSpec(kind="external_pretrained"))


def test_extractor_frozen_and_seeded():
    a = build_feature_extractor(FeatureExtractorSpec(seed=3))
    b = build_feature_extractor(FeatureExtractorSpec(seed=3))
    for p1, p2 in zip(a.parameters(), b.parameters()):
        assert torch.equal(p1, p2)
        assert not p1.requires_grad


def test_perceptual_identity_and_nonnegative():
    phi = build_feature_extractor(FeatureExtractorSpec(seed=0))
    g = torch.Generator().manual_seed(0)
    x = torch.rand(3, 32, 32, generator=g)
    y = torch.rand(3, 32, 32, generator=g)
    assert float(perceptual_loss(x, x, phi)) == 0.0
    assert float(perceptual_loss(x, y, phi)) >= 0.0


def test_perceptual_quadratic_under_linear_extractor():
    lin = torch.nn.Conv2d(3, 4, 3, stride=2, padding=1, bias=False).double()
    torch.nn.init.normal_(lin.weight, generator=torch.Generator().manual_seed(1))
    for p in lin.parameters():
        p.requires_grad_(False)
    g = torch.Generator().manual_seed(2)
    x = torch.rand(3, 16, 16, dtype=torch.float64, generator=g)
    d = torch.rand(3, 16, 16, dtype=torch.float64, generator=g)
    base = float(perceptual_loss(x + d, x, lin))
    doubled = float(perceptual_loss(x + 2 * d, x, lin))
    assert abs(doubled - 4 * base) < 1e-9


def test_stage2_loss_identity():
    phi = build_feature_extractor(FeatureExtractorSpec(seed=0)).double()
    g = torch.Generator().manual_seed(3)
    x = torch.rand(3, 32, 32, dtype=torch.float64, generator=g)
    m = (torch.rand(1, 32, 32, generator=g) > 0.8).double()
    rep = stage2_loss(x, x, m, phi)
    assert abs(float(rep.total) + 1.0) < 1e-6


def test_stage2_loss_support_separation():
    phi = build_feature_extractor(FeatureExtractorSpec(seed=0)).double()
    g = torch.Generator().manual_seed(4)
    gt = torch.rand(3, 32, 32, dtype=torch.float64, generator=g)
    m = torch.zeros(1, 32, 32, dtype=torch.float64)
    m[:, :16] = 1.0
    out = gt.clone()
    out[:, 16:, :] += 0.3       # error strictly outside the mask
    rep = stage2_loss(out, gt, m, phi)
    assert float(rep.l1_masked) == 0.0
    assert float(rep.l1_full) > 0.0


def test_stage2_loss_recompute_oracle():
    phi = build_feature_extractor(FeatureExtractorSpec(seed=1)).double()
    g = torch.Generator().manual_seed(5)
    out = torch.rand(3, 24, 24, dtype=torch.float64, generator=g)
    gt = torch.rand(3, 24, 24, dtype=torch.float64, generator=g)
    m = (torch.rand(1, 24, 24, generator=g) > 0.5).double()
    rep = stage2_loss(out, gt, m, phi)
    from uvinpaint.mucnet import ssim
    l1_full = float((out - gt).abs().mean())
    l1_masked = float(((out - gt).abs() * m).sum() / (m.sum() * 3))
    expect = (l1_full + 2.0 * l1_masked) + float(-ssim(out, gt)) \
        + 0.1 * float(perceptual_loss(out, gt, phi))
    assert abs(float(rep.total) - expect) < 1e-9


def test_stage2_loss_empty_mask_is_zero_masked_term():
    phi = build_feature_extractor(FeatureExtractorSpec(seed=0)).double()
    x = torch.rand(3, 16, 16, dtype=torch.float64)
    y = torch.rand(3, 16, 16, dtype=torch.float64)
    rep = stage2_loss(x, y, torch.zeros(1, 16, 16, dtype=torch.float64), phi)
    assert float(rep.l1_masked) == 0.0
