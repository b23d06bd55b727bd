"""Quantitative evaluation: l1, PSNR, SSIM per frame and per clip.

SSIM is the same implementation used by the training losses (one function,
two call sites). A video-perceptual score is deliberately not reported: the
schema reserves a `vfid` field marked unavailable rather than emitting a
surrogate number under that name.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import NumericError, ParameterError
from .mucnet import ssim as _ssim_torch


def psnr(x: np.ndarray, y: np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE); identical inputs give math.inf."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ParameterError("psnr shape mismatch")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def ssim_np(x: np.ndarray, y: np.ndarray, support: np.ndarray | None = None) -> float:
    """Numpy-facing wrapper over the loss-side SSIM."""
    xt = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float64)).permute(2, 0, 1)
    yt = torch.from_numpy(np.ascontiguousarray(y, dtype=np.float64)).permute(2, 0, 1)
    sup = None
    if support is not None:
        sup = torch.from_numpy(
            np.ascontiguousarray(support, dtype=np.float64)).permute(2, 0, 1)
    with torch.no_grad():
        return float(_ssim_torch(xt, yt, support=sup))


@dataclass
class FrameMetrics:
    l1: float
    psnr_db: float | None
    psnr_infinite: bool
    ssim: float
    mask_l1: float | None = None
    mask_psnr_db: float | None = None
    mask_psnr_infinite: bool = False
    mask_ssim: float | None = None


@dataclass
class MetricsReport:
    frames: list[FrameMetrics]
    clip_mean: dict
    metadata: dict = field(default_factory=dict)
    vfid: None = None   # unavailable at desk scale, reserved

    def to_json(self) -> str:
        doc = {
            "metadata": self.metadata,
            "vfid": "unavailable",
            "clip_mean": self.clip_mean,
            "frames": [vars(f) for f in self.frames],
        }
        return json.dumps(doc, indent=2)

    def to_csv(self) -> str:
        cols = ["frame", "l1", "psnr_db", "ssim", "mask_l1", "mask_psnr_db",
                "mask_ssim"]
        lines = [",".join(cols)]
        for i, f in enumerate(self.frames):
            row = [str(i), f"{f.l1:.6f}",
                   "inf" if f.psnr_infinite else f"{f.psnr_db:.4f}",
                   f"{f.ssim:.6f}"]
            row.append("" if f.mask_l1 is None else f"{f.mask_l1:.6f}")
            if f.mask_psnr_infinite:
                row.append("inf")
            else:
                row.append("" if f.mask_psnr_db is None else f"{f.mask_psnr_db:.4f}")
            row.append("" if f.mask_ssim is None else f"{f.mask_ssim:.6f}")
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    def pretty(self) -> str:
        head = f"{'frame':>5} {'l1':>10} {'psnr':>10} {'ssim':>8}"
        lines = [head, "-" * len(head)]
        for i, f in enumerate(self.frames):
            p = "inf" if f.psnr_infinite else f"{f.psnr_db:.2f}"
            lines.append(f"{i:>5} {f.l1:>10.5f} {p:>10} {f.ssim:>8.4f}")
        cm = self.clip_mean
        p = "inf" if cm["psnr_infinite"] else f"{cm['psnr_db']:.2f}"
        lines.append("-" * len(head))
        lines.append(f"{'mean':>5} {cm['l1']:>10.5f} {p:>10} {cm['ssim']:>8.4f}")
        return "\n".join(lines)


def _mask_stats(pred, gt, mask):
    m = mask[:, :, 0] > 0.5
    count = int(m.sum())
    if count == 0:
        return None, None, False, None
    d = (pred - gt)[m]
    l1 = float(np.abs(d).mean())
    mse = float((d ** 2).mean())
    p_inf = mse == 0.0
    p = None if p_inf else 10.0 * math.log10(1.0 / mse)
    try:
        s = ssim_np(pred, gt, support=mask)
    except NumericError:
        s = None   # mask too thin for a full SSIM window
    return l1, p, p_inf, s


def evaluate_clip(pred_frames: list[np.ndarray], gt_frames: list[np.ndarray],
                  masks: list[np.ndarray] | None = None,
                  metadata: dict | None = None) -> MetricsReport:
    """Per-frame l1 / PSNR / SSIM plus arithmetic clip means; mask-only
    variants restrict the support to mask==1."""
    if len(pred_frames) != len(gt_frames):
        raise ParameterError("pred/gt length mismatch")
    if masks is not None and len(masks) != len(pred_frames):
        raise ParameterError("mask count mismatch")
    frames = []
    for i, (pred, gt) in enumerate(zip(pred_frames, gt_frames)):
        pred = np.asarray(pred, dtype=np.float64)
        gt = np.asarray(gt, dtype=np.float64)
        l1 = float(np.abs(pred - gt).mean())
        p = psnr(pred, gt)
        fm = FrameMetrics(l1=l1, psnr_db=None if math.isinf(p) else p,
                          psnr_infinite=math.isinf(p), ssim=ssim_np(pred, gt))
        if masks is not None:
            fm.mask_l1, fm.mask_psnr_db, fm.mask_psnr_infinite, fm.mask_ssim = \
                _mask_stats(pred, gt, masks[i])
        frames.append(fm)

    def mean_of(vals):
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    any_inf = any(f.psnr_infinite for f in frames)
    clip_mean = {
        "l1": mean_of([f.l1 for f in frames]),
        "psnr_db": None if any_inf else mean_of([f.psnr_db for f in frames]),
        "psnr_infinite": any_inf,
        "ssim": mean_of([f.ssim for f in frames]),
        "mask_l1": mean_of([f.mask_l1 for f in frames]),
        "mask_ssim": mean_of([f.mask_ssim for f in frames]),
    }
    return MetricsReport(frames=frames, clip_mean=clip_mean,
                         metadata=metadata or {})
