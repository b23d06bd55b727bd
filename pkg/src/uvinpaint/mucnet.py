"""Stage I: multi-reference UV texture completion.

Input assembly (11 channels: observed texture, its mirror, synthesized
texture, validity, missing mask), the completion network (gated
encoder-decoder with reference-window attention at the bottleneck), the
SSIM primitive, and the stage losses.

Image-space loss terms reach the completed UV map through the fixed
bilinear sampling operator from uvgeom (a sparse linear map built from the
fitted mesh); gradients flow through that linear map but never through
geometry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import AttentionBlock, AttentionConfig, frame_attention
from .errors import NumericError, ParameterError
from .nnops import EncoderDecoderSpec, GatedDecoder, GatedEncoder
from .uvgeom import UVFrameSet, UVToImageTransport

STAGE1_CHANNELS = 11


def assemble_stage1_input(frame: UVFrameSet) -> torch.Tensor:
    """Fixed channel stack [11,H,W]: u_in(3), u_in_flip(3), u_synth(3),
    u_valid(1), u_missing(1)."""
    parts = [frame.u_in, frame.u_in_flip, frame.u_synth, frame.u_valid,
             frame.u_missing]
    if any(p is None for p in parts):
        raise ParameterError("UVFrameSet is missing a required map")
    chans = [torch.from_numpy(np.ascontiguousarray(p)).permute(2, 0, 1).float()
             for p in parts]
    return torch.cat(chans, dim=0)


class TorchTransport:
    """Differentiable application of a UVToImageTransport to a torch UV map."""

    def __init__(self, transport: UVToImageTransport, dtype=torch.float32):
        self.image_size = transport.image_size
        h, w = transport.image_size
        self.pix_flat = torch.from_numpy(
            (transport.pix_rows * w + transport.pix_cols).astype(np.int64))
        self.texel_flat = torch.from_numpy(transport.texel_flat.astype(np.int64))
        self.weights = torch.from_numpy(transport.weights).to(dtype)
        self.i_valid = torch.from_numpy(transport.i_valid).permute(2, 0, 1).to(dtype)

    def apply(self, uv_map: torch.Tensor) -> torch.Tensor:
        """[C,H_uv,W_uv] -> [C,H,W]; zero outside face coverage."""
        c = uv_map.shape[0]
        flat = uv_map.reshape(c, -1)
        gathered = flat[:, self.texel_flat]                       # [C,P,4]
        vals = (gathered * self.weights.to(uv_map.dtype)).sum(-1)  # [C,P]
        h, w = self.image_size
        out = uv_map.new_zeros(c, h * w)
        out = out.index_copy(1, self.pix_flat, vals)
        return out.reshape(c, h, w)


@dataclass
class Stage1Batch:
    """One completion sample: all frames of a clip window on a shared UV
    grid, the target frame, its resolved references, and (optionally) the
    target's image-space transport for the back-projected loss."""

    frames: list[UVFrameSet]
    target_index: int
    reference_indices: list[int]
    offsets: tuple[int, ...]
    transport: UVToImageTransport | None = None
    i_gt: np.ndarray | None = None
    i_valid: np.ndarray | None = None

    def __post_init__(self):
        if not (0 <= self.target_index < len(self.frames)):
            raise ParameterError("target index out of range")
        if len(self.reference_indices) != len(self.offsets):
            raise ParameterError("reference count must equal the offset count "
                                 "after boundary clamping")


@dataclass
class Stage1LossReport:
    uv_l1: torch.Tensor
    uv_ssim: torch.Tensor
    img_l1: torch.Tensor
    img_ssim: torch.Tensor
    total: torch.Tensor

    def item_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in
                ("uv_l1", "uv_ssim", "img_l1", "img_ssim", "total")}


class MUCNet(nn.Module):
    """Gated encoder-decoder with frame-wise window attention in between."""

    def __init__(self, base_width: int = 32, window_s: int = 3, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        spec = EncoderDecoderSpec(in_channels=STAGE1_CHANNELS, out_channels=3,
                                  base_width=base_width)
        self.spec = spec
        self.cfg = AttentionConfig(window_s=window_s)
        self.encoder = GatedEncoder(spec, gen)
        self.attention = AttentionBlock(spec.feature_channels, gen)
        self.decoder = GatedDecoder(spec, gen)

    def query_masks(self, missing: torch.Tensor) -> torch.Tensor:
        """Feature-resolution query masks: any missing texel inside a
        receptive cell makes that cell a query (max pooling)."""
        return F.max_pool2d(missing, 4)

    def complete_clip(self, stacks: torch.Tensor, missing: torch.Tensor,
                      target_indices: list[int],
                      reference_indices: list[list[int]],
                      use_attention: bool = True):
        """stacks [T,11,H,W], missing [T,1,H,W] -> (u_out [K,3,H,W], traces).

        Encodes every frame once and fuses/decodes each requested target.
        """
        feats = self.encoder(stacks)
        qmasks = self.query_masks(missing)
        fused, traces = [], []
        for t, refs in zip(target_indices, reference_indices):
            if use_attention:
                z, trace = frame_attention(feats[t], [feats[r] for r in refs],
                                           qmasks[t, 0], self.cfg, self.attention)
            else:
                z, trace = feats[t], None
            fused.append(z)
            traces.append(trace)
        return self.decoder(torch.stack(fused)), traces


def mucnet_forward(batch: Stage1Batch, net: MUCNet):
    """Complete the batch's target frame. Returns (u_out [3,H,W], trace)."""
    stacks = torch.stack([assemble_stage1_input(f) for f in batch.frames])
    missing = torch.stack([
        torch.from_numpy(np.ascontiguousarray(f.u_missing)).permute(2, 0, 1).float()
        for f in batch.frames])
    stacks = stacks.to(next(net.parameters()).dtype)
    missing = missing.to(stacks.dtype)
    u_out, traces = net.complete_clip(stacks, missing, [batch.target_index],
                                      [batch.reference_indices])
    return u_out[0], traces[0]


def _gaussian_window(size: int, sigma: float, dtype, device) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(x: torch.Tensor, y: torch.Tensor, c1: float = 0.01 ** 2,
         c2: float = 0.03 ** 2, support: torch.Tensor | None = None) -> torch.Tensor:
    """Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), averaged
    over valid window positions.

    x, y: [C,H,W] in [0,1]. With `support` ([1,H,W] or [H,W] binary), only
    windows lying entirely inside the support count; an empty support raises.
    """
    if x.shape != y.shape:
        raise ParameterError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.dim() != 3:
        raise ParameterError("ssim expects [C,H,W] maps")
    size, sigma = 11, 1.5
    if x.shape[1] < size or x.shape[2] < size:
        raise ParameterError(f"maps must be at least {size}x{size}")
    c = x.shape[0]
    win = _gaussian_window(size, sigma, x.dtype, x.device)
    kernel = win.expand(c, 1, size, size)

    def filt(t):
        return F.conv2d(t[None], kernel, groups=c)[0]

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x * mu_x
    syy = filt(y * y) - mu_y * mu_y
    sxy = filt(x * y) - mu_x * mu_y
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2))

    if support is None:
        return ssim_map.mean()
    sup = support
    if sup.dim() == 3:
        sup = sup[0]
    ones = torch.ones(1, 1, size, size, dtype=x.dtype, device=x.device)
    inside = F.conv2d(sup[None, None].to(x.dtype), ones)[0, 0]
    full = (inside >= size * size - 0.5).to(x.dtype)
    count = full.sum()
    if float(count) == 0:
        raise NumericError("ssim support contains no fully-valid window")
    return (ssim_map * full).sum() / (count * c)


def masked_l1(x: torch.Tensor, y: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over mask==1 positions (all channels).
    Raises on an empty mask."""
    if x.shape != y.shape:
        raise ParameterError("masked_l1 shape mismatch")
    m = mask.to(x.dtype)
    count = m.sum()
    if float(count) == 0:
        raise NumericError("empty mask support in masked_l1")
    return ((x - y).abs() * m).sum() / (count * x.shape[0])


def stage1_loss(u_out: torch.Tensor, u_gt: torch.Tensor, u_valid: torch.Tensor,
                i_render: torch.Tensor, i_gt: torch.Tensor, i_valid: torch.Tensor,
                lambda_uv: float = 1.0, lambda_img: float = 2.0) -> Stage1LossReport:
    """L1 + SSIM on the UV map and on the back-projected face, both
    restricted to their validity supports, combined with the stage weights."""
    uv_l1 = masked_l1(u_out, u_gt, u_valid)
    uv_ssim = -ssim(u_out, u_gt, support=u_valid)
    img_l1 = masked_l1(i_render, i_gt, i_valid)
    img_ssim = -ssim(i_render, i_gt, support=i_valid)
    total = lambda_uv * (uv_l1 + uv_ssim) + lambda_img * (img_l1 + img_ssim)
    return Stage1LossReport(uv_l1=uv_l1, uv_ssim=uv_ssim, img_l1=img_l1,
                            img_ssim=img_ssim, total=total)
