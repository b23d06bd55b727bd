"""Stage II: image-space refinement and compositing.

Takes the corrupted frame, the masked render of the completed UV texture,
and the occlusion mask (7 channels), inpaints background left uncovered by
the face model and refines the face region, then composites so that known
pixels pass through bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import AttentionBlock, AttentionConfig, mask_attention
from .errors import ParameterError
from .mucnet import ssim
from .nnops import EncoderDecoderSpec, GatedDecoder, GatedEncoder, init_conv_
from .uvgeom import ImageFrameSet

STAGE2_CHANNELS = 7


def assemble_stage2_input(frame: ImageFrameSet) -> torch.Tensor:
    """Fixed channel stack [7,H,W]: i_in(3), i_render_masked(3), i_missing(1)."""
    parts = [frame.i_in, frame.i_render_masked, frame.i_missing]
    if any(p is None for p in parts):
        raise ParameterError("ImageFrameSet is missing a required map")
    chans = [torch.from_numpy(np.ascontiguousarray(p)).permute(2, 0, 1).float()
             for p in parts]
    return torch.cat(chans, dim=0)


@dataclass
class Stage2Batch:
    frames: list[ImageFrameSet]
    target_index: int
    reference_indices: list[int]
    offsets: tuple[int, ...]

    def __post_init__(self):
        if not (0 <= self.target_index < len(self.frames)):
            raise ParameterError("target index out of range")
        for f in self.frames:
            if f.i_render_masked is None or f.i_missing is None:
                raise ParameterError("stage-two frames need i_render_masked and i_missing")


@dataclass(frozen=True)
class FeatureExtractorSpec:
    """Frozen feature net for the perceptual distance. The default surrogate
    is a fixed seeded conv stack; a pretrained extractor can be plugged in by
    passing any frozen module to perceptual_loss directly."""

    kind: str = "surrogate_fixed_random"
    layer_index: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("surrogate_fixed_random", "external_pretrained"):
            raise ParameterError(f"unknown extractor kind {self.kind!r}")
        if not (1 <= self.layer_index <= 3):
            raise ParameterError("layer_index must be in 1..3")


def build_feature_extractor(spec: FeatureExtractorSpec) -> nn.Module:
    """Seeded random stride-2 conv stack (channels 16/32/64), truncated at
    spec.layer_index, with every parameter frozen."""
    if spec.kind == "external_pretrained":
        raise ParameterError("external extractors are supplied by the caller; "
                             "pass the module to perceptual_loss directly")
    gen = torch.Generator().manual_seed(spec.seed)
    widths = [3, 16, 32, 64]
    layers: list[nn.Module] = []
    for i in range(spec.layer_index):
        conv = nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1)
        init_conv_(conv, gen)
        layers += [conv, nn.ELU()]
    net = nn.Sequential(*layers)
    for p in net.parameters():
        p.requires_grad_(False)
    return net.eval()


class FVRNet(nn.Module):
    """Gated encoder-decoder with mask-wise window attention in between."""

    def __init__(self, base_width: int = 32, window_s: int = 3, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        spec = EncoderDecoderSpec(in_channels=STAGE2_CHANNELS, out_channels=3,
                                  base_width=base_width)
        self.spec = spec
        self.cfg = AttentionConfig(window_s=window_s, mode="mask_wise")
        self.encoder = GatedEncoder(spec, gen)
        self.attention = AttentionBlock(spec.feature_channels, gen)
        self.decoder = GatedDecoder(spec, gen)

    def valid_masks(self, missing: torch.Tensor) -> torch.Tensor:
        """Feature-resolution validity: a cell is valid only when fully
        unmasked (min pooling, the conservative dual of the query rule)."""
        return 1.0 - F.max_pool2d(missing, 4)

    def complete_clip(self, stacks: torch.Tensor, missing: torch.Tensor,
                      target_indices: list[int],
                      reference_indices: list[list[int]],
                      use_attention: bool = True):
        """stacks [T,7,H,W], missing [T,1,H,W] -> (i_out [K,3,H,W], traces)."""
        feats = self.encoder(stacks)
        vmasks = self.valid_masks(missing)
        fused, traces = [], []
        for t, refs in zip(target_indices, reference_indices):
            if use_attention:
                masks = [vmasks[t, 0]] + [vmasks[r, 0] for r in refs]
                z, trace = mask_attention(feats[t], [feats[r] for r in refs],
                                          masks, self.cfg, self.attention)
            else:
                z, trace = feats[t], None
            fused.append(z)
            traces.append(trace)
        return self.decoder(torch.stack(fused)), traces


def fvrnet_forward(batch: Stage2Batch, net: FVRNet):
    """Refine the batch's target frame. Returns (i_out [3,H,W], trace)."""
    stacks = torch.stack([assemble_stage2_input(f) for f in batch.frames])
    missing = torch.stack([
        torch.from_numpy(np.ascontiguousarray(f.i_missing)).permute(2, 0, 1).float()
        for f in batch.frames])
    stacks = stacks.to(next(net.parameters()).dtype)
    missing = missing.to(stacks.dtype)
    i_out, traces = net.complete_clip(stacks, missing, [batch.target_index],
                                      [batch.reference_indices])
    return i_out[0], traces[0]


def composite(i_out, i_in, i_missing):
    """Per-pixel selection: network output inside the mask, input outside.
    Outside-mask pixels equal i_in exactly (0*x + 1*y == y in floats).
    Works on numpy arrays and torch tensors alike."""
    return i_missing * i_out + (1 - i_missing) * i_in


def perceptual_loss(i_out: torch.Tensor, i_gt: torch.Tensor,
                    extractor: nn.Module) -> torch.Tensor:
    """Squared distance between frozen feature maps, normalized by the
    feature volume C*H*W; i.e. the mean squared feature difference."""
    fx = extractor(i_out[None])[0]
    fy = extractor(i_gt[None])[0]
    return ((fx - fy) ** 2).mean()


@dataclass
class Stage2LossReport:
    l1_full: torch.Tensor
    l1_masked: torch.Tensor
    l1_plus: torch.Tensor
    img_ssim: torch.Tensor
    perceptual: torch.Tensor
    total: torch.Tensor

    def item_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in
                ("l1_full", "l1_masked", "l1_plus", "img_ssim", "perceptual",
                 "total")}


def stage2_loss(i_out: torch.Tensor, i_gt: torch.Tensor, i_missing: torch.Tensor,
                extractor: nn.Module, masked_weight: float = 2.0,
                perceptual_weight: float = 0.1) -> Stage2LossReport:
    """Full-image L1 plus double-weighted masked L1, SSIM, and the
    perceptual term at weight 0.1. An empty mask contributes zero to the
    masked term rather than raising."""
    diff = (i_out - i_gt).abs()
    l1_full = diff.mean()
    m = i_missing.to(i_out.dtype)
    count = m.sum().clamp(min=1.0)
    l1_masked = (diff * m).sum() / (count * i_out.shape[0])
    l1_plus = l1_full + masked_weight * l1_masked
    img_ssim = -ssim(i_out, i_gt)
    per = perceptual_loss(i_out, i_gt, extractor)
    total = l1_plus + img_ssim + perceptual_weight * per
    return Stage2LossReport(l1_full=l1_full, l1_masked=l1_masked, l1_plus=l1_plus,
                            img_ssim=img_ssim, perceptual=per, total=total)
