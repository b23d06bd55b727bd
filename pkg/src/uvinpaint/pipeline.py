"""Mid-level orchestration: turn clips into network-ready tensors and run
the two training stages.

Stage-one samples carry, per frame: the 11-channel UV stack, the UV-space
targets/supports, and the fixed UV->image transport used by the image-space
loss terms. Stage-two samples carry the 7-channel image stacks; the face
render defaults to teacher forcing from the ground-truth UV map unless a
completed map is supplied.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .attention import resolve_reference_indices
from .errors import ParameterError
from .facemodel import CameraSpec, FaceParams, MorphableModel, build_shape, \
    build_texture, pose_transform
from .fvrnet import FVRNet, Stage2LossReport, assemble_stage2_input, composite, \
    stage2_loss
from .mucnet import MUCNet, Stage1LossReport, TorchTransport, assemble_stage1_input, \
    masked_l1, stage1_loss
from .uvgeom import ImageFrameSet, UVFrameSet, build_uv_transport, \
    compute_visibility, flip_uv, project, rasterize_uv, sample_texture

DEFAULT_OFFSETS = (-2, -1, 1, 2)

# stage-one input stack layout (channel ranges)
AUX_CHANNELS = slice(3, 9)   # u_in_flip + u_synth


def build_uv_frame(model: MorphableModel, params: FaceParams, camera: CameraSpec,
                   i_in: np.ndarray, i_missing: np.ndarray | None,
                   uv_size: tuple[int, int] = (256, 256),
                   i_gt: np.ndarray | None = None) -> UVFrameSet:
    """Transport one corrupted frame into UV space.

    u_valid marks texels backed by visible mesh; u_missing marks the subset
    lost to the occlusion mask; u_in is zero outside its own validity.
    """
    posed = pose_transform(build_shape(model, params.alpha, params.beta),
                           params.rot, params.trans)
    projected = project(posed, camera)
    visible = compute_visibility(model, posed, projected, camera)

    colors_in, valid_in = sample_texture(i_in, i_missing, projected, visible)
    u_in, uin_valid = rasterize_uv(model, colors_in, valid_in, uv_size)
    u_valid = rasterize_uv(model, np.ones((model.n_vertices, 1)), visible,
                           uv_size)[1]
    u_missing = (u_valid * (1.0 - uin_valid)).astype(np.float32)

    synth = np.clip(build_texture(model, params.delta), 0.0, 1.0)
    u_synth = rasterize_uv(model, synth, np.ones(model.n_vertices, dtype=bool),
                           uv_size)[0]

    u_gt = None
    if i_gt is not None:
        colors_gt, valid_gt = sample_texture(i_gt, None, projected, visible)
        u_gt = rasterize_uv(model, colors_gt, valid_gt, uv_size)[0]

    return UVFrameSet(u_in=u_in, u_in_flip=flip_uv(u_in), u_synth=u_synth,
                      u_valid=u_valid, u_missing=u_missing, u_gt=u_gt)


def _chw(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr)).permute(2, 0, 1).float()


@dataclass
class Stage1ClipTensors:
    stacks: torch.Tensor            # [T,11,H,W]
    missing: torch.Tensor           # [T,1,H,W]
    u_gt: torch.Tensor              # [T,3,H,W]
    u_valid: torch.Tensor           # [T,1,H,W]
    u_missing: torch.Tensor         # [T,1,H,W]
    transports: list[TorchTransport]
    i_gt: torch.Tensor              # [T,3,H,W]
    i_valid: torch.Tensor           # [T,1,H,W]
    target_indices: list[int]
    reference_indices: list[list[int]]
    uv_frames: list[UVFrameSet]


def build_stage1_clip(model: MorphableModel, camera: CameraSpec,
                      frames: list[np.ndarray], masks: list[np.ndarray],
                      params: list[FaceParams],
                      uv_size: tuple[int, int] = (256, 256),
                      offsets: tuple[int, ...] = DEFAULT_OFFSETS) -> Stage1ClipTensors:
    """Precompute every tensor stage-one training needs for one clip.
    `frames` are ground-truth frames; inputs are formed as gt*(1-mask)."""
    n = len(frames)
    if not (len(masks) == len(params) == n):
        raise ParameterError("frames, masks and params must align")
    uv_frames, transports = [], []
    i_gts, i_valids = [], []
    for i in range(n):
        i_in = (frames[i] * (1.0 - masks[i])).astype(np.float32)
        uv_frames.append(build_uv_frame(model, params[i], camera, i_in, masks[i],
                                        uv_size, i_gt=frames[i]))
        transport = build_uv_transport(model, params[i], camera, uv_size)
        transports.append(TorchTransport(transport))
        i_gts.append(_chw(frames[i]))
        i_valids.append(_chw(transport.i_valid))
    stacks = torch.stack([assemble_stage1_input(f) for f in uv_frames])
    return Stage1ClipTensors(
        stacks=stacks,
        missing=torch.stack([_chw(f.u_missing) for f in uv_frames]),
        u_gt=torch.stack([_chw(f.u_gt) for f in uv_frames]),
        u_valid=torch.stack([_chw(f.u_valid) for f in uv_frames]),
        u_missing=torch.stack([_chw(f.u_missing) for f in uv_frames]),
        transports=transports,
        i_gt=torch.stack(i_gts), i_valid=torch.stack(i_valids),
        target_indices=list(range(n)),
        reference_indices=[resolve_reference_indices(t, n, offsets)
                           for t in range(n)],
        uv_frames=uv_frames,
    )


def stage1_clip_outputs(net: MUCNet, clip: Stage1ClipTensors,
                        use_attention: bool = True, zero_aux: bool = False):
    """Forward all targets of a clip. zero_aux blanks the mirrored and
    synthesized texture channels (ablation variant)."""
    stacks = clip.stacks
    if zero_aux:
        stacks = stacks.clone()
        stacks[:, AUX_CHANNELS] = 0.0
    return net.complete_clip(stacks, clip.missing, clip.target_indices,
                             clip.reference_indices, use_attention=use_attention)


def stage1_clip_loss(net: MUCNet, clip: Stage1ClipTensors,
                     use_attention: bool = True, zero_aux: bool = False):
    u_out, _ = stage1_clip_outputs(net, clip, use_attention, zero_aux)
    reports: list[Stage1LossReport] = []
    total = 0.0
    for j, t in enumerate(clip.target_indices):
        i_render = clip.transports[t].apply(u_out[j])
        rep = stage1_loss(u_out[j], clip.u_gt[t], clip.u_valid[t],
                          i_render, clip.i_gt[t], clip.i_valid[t])
        reports.append(rep)
        total = total + rep.total
    return total / len(reports), reports, u_out


def stage1_missing_l1(net: MUCNet, clip: Stage1ClipTensors,
                      use_attention: bool = True, zero_aux: bool = False) -> float:
    """Mean absolute error of the completed texture over the missing region."""
    with torch.no_grad():
        u_out, _ = stage1_clip_outputs(net, clip, use_attention, zero_aux)
        vals = []
        for j, t in enumerate(clip.target_indices):
            if float(clip.u_missing[t].sum()) == 0:
                continue
            vals.append(float(masked_l1(u_out[j], clip.u_gt[t], clip.u_missing[t])))
    if not vals:
        raise ParameterError("clip has no missing texels to evaluate")
    return float(np.mean(vals))


def train_stage1(net: MUCNet, clips: list[Stage1ClipTensors], steps: int,
                 lr: float = 1e-4, use_attention: bool = True,
                 zero_aux: bool = False, log_every: int = 0):
    """Adam loop cycling over clips; returns the per-step total-loss history."""
    opt = torch.optim.Adam(net.parameters(), lr=lr, betas=(0.9, 0.999))
    history = []
    for step in range(steps):
        clip = clips[step % len(clips)]
        opt.zero_grad()
        total, _, _ = stage1_clip_loss(net, clip, use_attention, zero_aux)
        total.backward()
        opt.step()
        history.append(float(total.detach()))
        if log_every and (step + 1) % log_every == 0:
            print(f"step {step + 1:5d}  loss {history[-1]:.4f}")
    return history


# ---------------------------------------------------------------------------
# stage two
# ---------------------------------------------------------------------------

def build_image_frame(frame_gt: np.ndarray | None, i_in: np.ndarray,
                      mask: np.ndarray, i_render: np.ndarray,
                      i_valid: np.ndarray) -> ImageFrameSet:
    i_render_masked = (mask * i_render).astype(np.float32)
    return ImageFrameSet(i_in=i_in, i_gt=frame_gt, i_missing=mask,
                         i_valid=i_valid, i_render=i_render,
                         i_render_masked=i_render_masked)


@dataclass
class Stage2ClipTensors:
    stacks: torch.Tensor            # [T,7,H,W]
    missing: torch.Tensor           # [T,1,H,W]
    i_gt: torch.Tensor              # [T,3,H,W]
    i_in: torch.Tensor              # [T,3,H,W]
    target_indices: list[int]
    reference_indices: list[list[int]]
    image_frames: list[ImageFrameSet]


def build_stage2_clip(model: MorphableModel, camera: CameraSpec,
                      frames: list[np.ndarray], masks: list[np.ndarray],
                      params: list[FaceParams],
                      uv_maps: list[np.ndarray] | None = None,
                      uv_size: tuple[int, int] = (256, 256),
                      offsets: tuple[int, ...] = DEFAULT_OFFSETS) -> Stage2ClipTensors:
    """Assemble stage-two tensors. When uv_maps is None the render is teacher
    forced from the ground-truth UV texture of each frame."""
    n = len(frames)
    image_frames = []
    for i in range(n):
        i_in = (frames[i] * (1.0 - masks[i])).astype(np.float32)
        if uv_maps is not None:
            uv_map = uv_maps[i]
        else:
            uv_frame = build_uv_frame(model, params[i], camera, frames[i], None,
                                      uv_size, i_gt=frames[i])
            uv_map = uv_frame.u_gt
        transport = build_uv_transport(model, params[i], camera, uv_size)
        i_render = transport.apply(uv_map.astype(np.float64)).astype(np.float32)
        image_frames.append(build_image_frame(frames[i], i_in, masks[i],
                                              i_render, transport.i_valid))
    return Stage2ClipTensors(
        stacks=torch.stack([assemble_stage2_input(f) for f in image_frames]),
        missing=torch.stack([_chw(f.i_missing) for f in image_frames]),
        i_gt=torch.stack([_chw(f.i_gt) for f in image_frames]),
        i_in=torch.stack([_chw(f.i_in) for f in image_frames]),
        target_indices=list(range(n)),
        reference_indices=[resolve_reference_indices(t, n, offsets)
                           for t in range(n)],
        image_frames=image_frames,
    )


def stage2_clip_loss(net: FVRNet, clip: Stage2ClipTensors, extractor,
                     use_attention: bool = True):
    i_out, _ = net.complete_clip(clip.stacks, clip.missing, clip.target_indices,
                                 clip.reference_indices, use_attention=use_attention)
    reports: list[Stage2LossReport] = []
    total = 0.0
    for j, t in enumerate(clip.target_indices):
        rep = stage2_loss(i_out[j], clip.i_gt[t], clip.missing[t], extractor)
        reports.append(rep)
        total = total + rep.total
    return total / len(reports), reports, i_out


def stage2_inside_mask_l1(net: FVRNet, clip: Stage2ClipTensors) -> float:
    """Mean absolute error of the composited frame inside the mask."""
    with torch.no_grad():
        i_out, _ = net.complete_clip(clip.stacks, clip.missing,
                                     clip.target_indices, clip.reference_indices)
        vals = []
        for j, t in enumerate(clip.target_indices):
            if float(clip.missing[t].sum()) == 0:
                continue
            i_comp = composite(i_out[j], clip.i_in[t], clip.missing[t])
            vals.append(float(masked_l1(i_comp, clip.i_gt[t], clip.missing[t])))
    if not vals:
        raise ParameterError("clip has no masked pixels to evaluate")
    return float(np.mean(vals))


def train_stage2(net: FVRNet, clips: list[Stage2ClipTensors], extractor,
                 steps: int, lr: float = 1e-4, log_every: int = 0):
    opt = torch.optim.Adam(net.parameters(), lr=lr, betas=(0.9, 0.999))
    history = []
    for step in range(steps):
        clip = clips[step % len(clips)]
        opt.zero_grad()
        total, _, _ = stage2_clip_loss(net, clip, extractor)
        total.backward()
        opt.step()
        history.append(float(total.detach()))
        if log_every and (step + 1) % log_every == 0:
            print(f"step {step + 1:5d}  loss {history[-1]:.4f}")
    return history
