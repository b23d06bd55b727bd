"""Reusable experiment harnesses: overfit checks, the stage-one input/fusion
ablation, fitter recovery trials, and the attention complexity benchmark.

Each harness is deterministic in its config seed and returns plain result
objects; the acceptance tests and the scripts/ entry points both run these.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import maskgen, pipeline, synthdata
from .attention import AttentionBlock, attention_cost, frame_attention, \
    nonlocal_attention
from .attention import AttentionConfig
from .facemodel import build_toy_model, default_camera
from .fvrnet import FVRNet, build_feature_extractor, FeatureExtractorSpec
from .mucnet import MUCNet


def make_toy_setup(seed: int = 0, image_size: tuple[int, int] = (64, 64),
                   n_subdiv: int = 2, dims: tuple[int, int, int] = (8, 4, 8)):
    model = build_toy_model(seed, n_subdiv=n_subdiv, dims=dims)
    camera = default_camera(image_size)
    return model, camera


def synth_training_clip(model, camera, clip_seed: int, mask_seed: int,
                        n_frames: int = 5, motion: str = "smooth",
                        mask_kind: str = "rect", mask_motion: str = "shifting",
                        yaw_deg: float = 35.0, detail_scale: float = 0.12,
                        uv_size=(64, 64), offsets=pipeline.DEFAULT_OFFSETS):
    clip = synthdata.generate_clip(
        model, synthdata.ClipSpec(n_frames=n_frames, seed=clip_seed,
                                  motion=motion, yaw_deg=yaw_deg,
                                  detail_scale=detail_scale), camera)
    masks = maskgen.make_mask_sequence(maskgen.MaskSpec(
        kind=mask_kind, motion=mask_motion, seed=mask_seed,
        n_frames=n_frames, image_size=camera.image_size))
    tensors = pipeline.build_stage1_clip(model, camera, clip.frames, masks,
                                         clip.params, uv_size=uv_size,
                                         offsets=offsets)
    return clip, masks, tensors


@dataclass
class OverfitResult:
    reached: bool
    steps_used: int
    final_metric: float
    history: list = field(default_factory=list)
    metric_history: list = field(default_factory=list)


def overfit_stage1(seed: int = 0, steps: int = 2000, lr: float = 2e-3,
                   base_width: int = 16, threshold: float = 0.05,
                   check_every: int = 25) -> OverfitResult:
    """Train stage one on a single 5-frame clip at 64x64 UV until the
    texture error over the missing region drops below the threshold."""
    torch.set_num_threads(max(torch.get_num_threads(), 1))
    model, camera = make_toy_setup(seed)
    _, _, clip = synth_training_clip(model, camera, clip_seed=seed + 10,
                                     mask_seed=seed + 20)
    net = MUCNet(base_width=base_width, seed=seed)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    history, metric_history = [], []
    reached, used = False, steps
    for step in range(steps):
        opt.zero_grad()
        total, _, _ = pipeline.stage1_clip_loss(net, clip)
        total.backward()
        opt.step()
        history.append(float(total.detach()))
        if (step + 1) % check_every == 0:
            m = pipeline.stage1_missing_l1(net, clip)
            metric_history.append((step + 1, m))
            if m < threshold:
                reached, used = True, step + 1
                break
    final = pipeline.stage1_missing_l1(net, clip)
    return OverfitResult(reached=reached or final < threshold, steps_used=used,
                         final_metric=final, history=history,
                         metric_history=metric_history)


def overfit_stage2(seed: int = 0, steps: int = 2000, lr: float = 2e-3,
                   base_width: int = 16, threshold: float = 0.05,
                   check_every: int = 25) -> OverfitResult:
    """Stage-two analogue at 64x64 image resolution: composite error inside
    the mask."""
    model, camera = make_toy_setup(seed)
    clip = synthdata.generate_clip(
        model, synthdata.ClipSpec(n_frames=5, seed=seed + 30, motion="smooth",
                                  yaw_deg=35.0), camera)
    masks = maskgen.make_mask_sequence(maskgen.MaskSpec(
        kind="rect", motion="shifting", seed=seed + 40, n_frames=5,
        image_size=camera.image_size))
    tensors = pipeline.build_stage2_clip(model, camera, clip.frames, masks,
                                         clip.params, uv_size=(64, 64))
    net = FVRNet(base_width=base_width, seed=seed)
    extractor = build_feature_extractor(FeatureExtractorSpec(seed=seed))
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    history, metric_history = [], []
    reached, used = False, steps
    for step in range(steps):
        opt.zero_grad()
        total, _, _ = pipeline.stage2_clip_loss(net, tensors, extractor)
        total.backward()
        opt.step()
        history.append(float(total.detach()))
        if (step + 1) % check_every == 0:
            m = pipeline.stage2_inside_mask_l1(net, tensors)
            metric_history.append((step + 1, m))
            if m < threshold:
                reached, used = True, step + 1
                break
    final = pipeline.stage2_inside_mask_l1(net, tensors)
    return OverfitResult(reached=reached or final < threshold, steps_used=used,
                         final_metric=final, history=history,
                         metric_history=metric_history)


@dataclass
class AblationResult:
    median_missing_l1: dict
    per_seed: dict


def ablation_stage1(seeds=(0, 1, 2), steps: int = 1200, lr: float = 3e-3,
                    base_width: int = 8, n_train_clips: int = 2,
                    detail_scale: float = 0.16) -> AblationResult:
    """Train the full stage-one model and two reduced variants on the same
    clips with the same budget, then compare missing-region error on a
    held-out clip with static masks.

    Variants: full; no cross-frame fusion (single frame); no mirrored /
    synthesized texture channels.
    """
    model, camera = make_toy_setup(0)
    train_clips = []
    for k in range(n_train_clips):
        _, _, tensors = synth_training_clip(
            model, camera, clip_seed=100 + k, mask_seed=200 + k,
            motion="smooth", mask_kind="rect", mask_motion="shifting",
            detail_scale=detail_scale)
        train_clips.append(tensors)
    _, _, heldout = synth_training_clip(
        model, camera, clip_seed=999, mask_seed=888, motion="sweep",
        yaw_deg=45.0, mask_kind="rect", mask_motion="static",
        detail_scale=detail_scale)

    variants = {
        "full": dict(use_attention=True, zero_aux=False),
        "single_frame": dict(use_attention=False, zero_aux=False),
        "no_aux_inputs": dict(use_attention=True, zero_aux=True),
    }
    per_seed = {name: [] for name in variants}
    for seed in seeds:
        for name, flags in variants.items():
            net = MUCNet(base_width=base_width, seed=seed)
            pipeline.train_stage1(net, train_clips, steps=steps, lr=lr, **flags)
            per_seed[name].append(
                pipeline.stage1_missing_l1(net, heldout, **flags))
    medians = {name: float(np.median(vals)) for name, vals in per_seed.items()}
    return AblationResult(median_missing_l1=medians, per_seed=per_seed)


@dataclass
class RecoveryResult:
    pose_errors_deg: list
    median_deg: float


def fit_recovery(n_trials: int = 20, masked: bool = False, seed0: int = 0,
                 steps: int = 120) -> RecoveryResult:
    """Perturb oracle parameters (pose sigma 5 deg, coefficient sigma 0.1),
    refit single frames, and report the median absolute pose-angle error."""
    model, camera = make_toy_setup(0, image_size=(128, 128), n_subdiv=2)
    errors = []
    for trial in range(n_trials):
        rng = np.random.default_rng(seed0 + 1000 + trial)
        clip = synthdata.generate_clip(
            model, synthdata.ClipSpec(n_frames=5, seed=seed0 + trial,
                                      motion="smooth", yaw_deg=30.0), camera)
        idx = int(rng.integers(5))
        truth = clip.params[idx]
        init = truth.copy()
        init.rot = truth.rot + rng.normal(0.0, np.deg2rad(5.0), 3)
        init.alpha = truth.alpha + rng.normal(0.0, 0.1, truth.alpha.shape)
        init.beta = truth.beta + rng.normal(0.0, 0.1, truth.beta.shape)
        init.delta = truth.delta + rng.normal(0.0, 0.1, truth.delta.shape)
        masks = None
        frame = clip.frames[idx]
        if masked:
            masks = maskgen.make_mask_sequence(maskgen.MaskSpec(
                kind="rect", motion="static", seed=seed0 + 500 + trial,
                n_frames=1, image_size=camera.image_size))
            frame = (frame * (1.0 - masks[0])).astype(np.float32)
        res = synthdata.fit_params([frame], masks, model, camera, init,
                                   landmarks=[clip.landmarks[idx]], steps=steps)
        err = np.rad2deg(np.abs(res.params[0].rot - truth.rot)).max()
        errors.append(float(err))
    return RecoveryResult(pose_errors_deg=errors,
                          median_deg=float(np.median(errors)))


@dataclass
class BenchRow:
    h_f: int
    w_f: int
    n: int
    s: int
    channels: int
    mac_frame_wise: int
    mac_non_local: int
    time_frame_wise_s: float
    time_non_local_s: float

    @property
    def mac_ratio(self) -> float:
        return self.mac_non_local / self.mac_frame_wise

    @property
    def time_ratio(self) -> float:
        return self.time_non_local_s / max(self.time_frame_wise_s, 1e-12)


def bench_attention(sizes=((32, 32), (64, 64), (96, 96)), n: int = 4, s: int = 3,
                    channels: int = 64, repeats: int = 3,
                    seed: int = 0) -> list[BenchRow]:
    """Analytic MAC counts plus measured single-thread wall times for the
    windowed and non-local attention paths over a size sweep."""
    torch.set_num_threads(1)
    rows = []
    gen = torch.Generator().manual_seed(seed)
    block = AttentionBlock(channels, gen)
    cfg = AttentionConfig(window_s=s)
    for h, w in sizes:
        ft = torch.randn(channels, h, w, generator=gen)
        refs = [torch.randn(channels, h, w, generator=gen) for _ in range(n)]
        qm = torch.ones(h, w)

        def run_fw():
            with torch.no_grad():
                frame_attention(ft, refs, qm, cfg, block)

        def run_nl():
            with torch.no_grad():
                nonlocal_attention(ft, refs, block)

        run_fw(), run_nl()    # warm up
        t_fw = min(_timed(run_fw) for _ in range(repeats))
        t_nl = min(_timed(run_nl) for _ in range(repeats))
        rows.append(BenchRow(
            h_f=h, w_f=w, n=n, s=s, channels=channels,
            mac_frame_wise=attention_cost(h, w, n, s, channels, "frame_wise"),
            mac_non_local=attention_cost(h, w, n, s, channels, "non_local"),
            time_frame_wise_s=t_fw, time_non_local_s=t_nl))
    return rows


def _timed(fn) -> float:
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0
