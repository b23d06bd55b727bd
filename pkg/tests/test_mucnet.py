import numpy as np
import pytest
import torch

from uvinpaint import mucnet
from uvinpaint.errors import NumericError, ParameterError
from uvinpaint.mucnet import (MUCNet, Stage1Batch, assemble_stage1_input,
                              masked_l1, mucnet_forward, ssim, stage1_loss)
from uvinpaint.uvgeom import UVFrameSet


def _uv_frame(seed, h=64, w=64, missing_frac=0.15):
    rng = np.random.default_rng(seed)
    u_in = rng.random((h, w, 3)).astype(np.float32)
    u_valid = np.ones((h, w, 1), dtype=np.float32)
    u_missing = (rng.random((h, w, 1)) < missing_frac).astype(np.float32)
    u_in = (u_in * (1 - u_missing)).astype(np.float32)
    return UVFrameSet(u_in=u_in, u_in_flip=u_in[:, ::-1].copy(),
                      u_synth=rng.random((h, w, 3)).astype(np.float32),
                      u_valid=u_valid, u_missing=u_missing,
                      u_gt=rng.random((h, w, 3)).astype(np.float32))


def test_assemble_shape_256():
    frame = _uv_frame(0, 256, 256)
    stack = assemble_stage1_input(frame)
    assert stack.shape == (11, 256, 256)


def test_assemble_zero_frame_is_zero():
    z = np.zeros((32, 32, 3), dtype=np.float32)
    m = np.zeros((32, 32, 1), dtype=np.float32)
    frame = UVFrameSet(u_in=z, u_in_flip=z, u_synth=z, u_valid=m, u_missing=m)
    assert assemble_stage1_input(frame).abs().max() == 0.0


def test_assemble_channel_order():
    frame = _uv_frame(1)
    stack = assemble_stage1_input(frame)
    assert torch.equal(stack[0:3],
                       torch.from_numpy(frame.u_in).permute(2, 0, 1))
    assert torch.equal(stack[3:6],
                       torch.from_numpy(frame.u_in_flip).permute(2, 0, 1))
    assert torch.equal(stack[6:9],
                       torch.from_numpy(frame.u_synth).permute(2, 0, 1))
    assert torch.equal(stack[9], torch.from_numpy(frame.u_valid[:, :, 0]))
    assert torch.equal(stack[10], torch.from_numpy(frame.u_missing[:, :, 0]))


def test_assemble_missing_map_rejected():
    frame = _uv_frame(2)
    frame.u_synth = None
    with pytest.raises(ParameterError):
        assemble_stage1_input(frame)


def _batch(n_frames=5, target=2):
    frames = [_uv_frame(10 + i) for i in range(n_frames)]
    from uvinpaint.attention import resolve_reference_indices
    refs = resolve_reference_indices(target, n_frames, (-2, -1, 1, 2))
    return Stage1Batch(frames=frames, target_index=target,
                       reference_indices=refs, offsets=(-2, -1, 1, 2))


def test_forward_contract():
    net = MUCNet(base_width=8, seed=0)
    batch = _batch()
    assert len(batch.reference_indices) == 4
    u_out, trace = mucnet_forward(batch, net)
    assert u_out.shape == (3, 64, 64)
    assert float(u_out.min()) >= 0.0 and float(u_out.max()) <= 1.0
    assert trace.n_frames == 4


def test_batch_reference_count_invariant():
    with pytest.raises(ParameterError):
        Stage1Batch(frames=[_uv_frame(i) for i in range(5)], target_index=0,
                    reference_indices=[1, 2], offsets=(-2, -1, 1, 2))


def test_attention_inert_when_value_projection_zero():
    net = MUCNet(base_width=8, seed=1)
    with torch.no_grad():
        net.attention.proj_v.weight.zero_()
        net.attention.proj_v.bias.zero_()
    batch = _batch()
    stacks = torch.stack([assemble_stage1_input(f) for f in batch.frames])
    missing = torch.stack([
        torch.from_numpy(f.u_missing).permute(2, 0, 1) for f in batch.frames])
    with torch.no_grad():
        fused, _ = net.complete_clip(stacks, missing, [2],
                                     [batch.reference_indices])
        single, _ = net.complete_clip(stacks, missing, [2],
                                      [batch.reference_indices],
                                      use_attention=False)
    assert (fused - single).abs().max() < 1e-6


def test_ssim_identity():
    x = torch.rand(3, 32, 32, dtype=torch.float64,
                   generator=torch.Generator().manual_seed(0))
    val = ssim(x, x)
    assert abs(float(val) - 1.0) < 1e-6


def test_ssim_constant_images_analytic():
    x = torch.zeros(1, 16, 16, dtype=torch.float64)
    y = torch.ones(1, 16, 16, dtype=torch.float64)
    # means 0 and 1, zero variances: ssim = c1*c2 / ((1+c1)*c2) ~ 1e-4
    val = float(ssim(x, y))
    assert val < 0.01
    assert abs(val - (1e-4 / (1 + 1e-4))) < 1e-9


def test_ssim_symmetry():
    g = torch.Generator().manual_seed(1)
    x = torch.rand(3, 20, 20, dtype=torch.float64, generator=g)
    y = torch.rand(3, 20, 20, dtype=torch.float64, generator=g)
    assert abs(float(ssim(x, y)) - float(ssim(y, x))) < 1e-9


def test_ssim_shape_mismatch():
    with pytest.raises(ParameterError):
        ssim(torch.zeros(3, 16, 16), torch.zeros(3, 16, 17))
    with pytest.raises(ParameterError):
        ssim(torch.zeros(3, 8, 8), torch.zeros(3, 8, 8))   # below window size


def test_ssim_support_erosion():
    g = torch.Generator().manual_seed(2)
    x = torch.rand(1, 24, 24, dtype=torch.float64, generator=g)
    y = x.clone()
    y[:, :6, :] += 0.5          # corrupt outside the support
    support = torch.zeros(1, 24, 24, dtype=torch.float64)
    support[:, 8:, :] = 1.0     # windows fully inside rows >= 8
    assert abs(float(ssim(x, y, support=support)) - 1.0) < 1e-9
    with pytest.raises(NumericError):
        ssim(x, y, support=torch.zeros(1, 24, 24, dtype=torch.float64))


def test_stage1_loss_identity_case():
    g = torch.Generator().manual_seed(3)
    u = torch.rand(3, 32, 32, dtype=torch.float64, generator=g)
    i = torch.rand(3, 32, 32, dtype=torch.float64, generator=g)
    ones = torch.ones(1, 32, 32, dtype=torch.float64)
    rep = stage1_loss(u, u, ones, i, i, ones)
    assert abs(float(rep.uv_l1)) == 0.0
    assert abs(float(rep.uv_ssim) + 1.0) < 1e-6
    assert abs(float(rep.total) + 3.0) < 1e-5
    # total honors the declared combination exactly
    expect = 1.0 * (float(rep.uv_l1) + float(rep.uv_ssim)) \
        + 2.0 * (float(rep.img_l1) + float(rep.img_ssim))
    assert abs(float(rep.total) - expect) < 1e-12


def test_stage1_loss_empty_support_raises():
    u = torch.rand(3, 32, 32, dtype=torch.float64)
    zeros = torch.zeros(1, 32, 32, dtype=torch.float64)
    ones = torch.ones(1, 32, 32, dtype=torch.float64)
    with pytest.raises(NumericError):
        stage1_loss(u, u, zeros, u, u, ones)
    with pytest.raises(NumericError):
        stage1_loss(u, u, ones, u, u, zeros)


def test_stage1_loss_recompute_oracle():
    g = torch.Generator().manual_seed(4)
    u_out = torch.rand(3, 24, 24, dtype=torch.float64, generator=g)
    u_gt = torch.rand(3, 24, 24, dtype=torch.float64, generator=g)
    i_r = torch.rand(3, 24, 24, dtype=torch.float64, generator=g)
    i_gt = torch.rand(3, 24, 24, dtype=torch.float64, generator=g)
    uv = torch.zeros(1, 24, 24, dtype=torch.float64)
    uv[:, :, 4:] = 1.0
    iv = torch.zeros(1, 24, 24, dtype=torch.float64)
    iv[:, 2:20, :] = 1.0
    rep = stage1_loss(u_out, u_gt, uv, i_r, i_gt, iv)
    l_u = float((((u_out - u_gt).abs() * uv).sum() / (uv.sum() * 3)))
    l_i = float((((i_r - i_gt).abs() * iv).sum() / (iv.sum() * 3)))
    expect = 1.0 * (l_u + float(-ssim(u_out, u_gt, support=uv))) \
        + 2.0 * (l_i + float(-ssim(i_r, i_gt, support=iv)))
    assert abs(float(rep.total) - expect) < 1e-9


def test_masked_l1_locality():
    g = torch.Generator().manual_seed(5)
    u_gt = torch.rand(3, 16, 16, dtype=torch.float64, generator=g)
    u_out = torch.rand(3, 16, 16, dtype=torch.float64, generator=g)
    uv = torch.zeros(1, 16, 16, dtype=torch.float64)
    uv[:, :, :8] = 1.0
    before = float(masked_l1(u_out, u_gt, uv))
    tampered = u_out.clone()
    tampered[:, :, 8:] += 10.0       # only where the mask is zero
    assert float(masked_l1(tampered, u_gt, uv)) == before


@pytest.mark.slow
def test_loss_decreases_under_training():
    from uvinpaint import experiments, pipeline
    model, camera = experiments.make_toy_setup(0, image_size=(32, 32))
    _, _, clip = experiments.synth_training_clip(
        model, camera, clip_seed=3, mask_seed=4, uv_size=(32, 32))
    net = MUCNet(base_width=8, seed=0)
    history = pipeline.train_stage1(net, [clip], steps=200, lr=5e-4)
    ma = np.convolve(history, np.ones(20) / 20, mode="valid")
    assert np.all(np.diff(ma) <= 1e-6)
    assert ma[-1] < ma[0]
