"""Reference-window attention over feature maps.

Three flavors share one set of 1x1 q/k/v/output projections:

  frame_attention    each query (a masked feature position in the target
                     frame) attends to an s x s window at the same location
                     in every reference frame
  mask_attention     same mechanism, but the support also includes the
                     target frame's own window and is restricted to
                     positions marked valid (non-masked) per frame
  nonlocal_attention every position attends to all positions of all
                     reference frames; correctness and cost baseline

Support points are ordered frame-major then window-row-major, so index
// s^2 recovers the support-frame index. Out-of-bounds window entries are
excluded from the softmax support (not zero-padded); softmax uses
max-subtraction; a query with empty support passes its feature through
unchanged. The output projection carries no bias so that zero aggregate
means exact pass-through.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ParameterError
from .nnops import init_conv_

_BIG_NEG = -1e30


@dataclass(frozen=True)
class AttentionConfig:
    window_s: int = 3
    offsets: tuple[int, ...] = (-2, -1, 1, 2)
    mode: str = "frame_wise"

    def __post_init__(self):
        if self.window_s < 1 or self.window_s % 2 != 1:
            raise ParameterError("window_s must be odd and >= 1")
        if self.mode not in ("frame_wise", "mask_wise", "non_local"):
            raise ParameterError(f"unknown attention mode {self.mode!r}")
        if self.mode == "frame_wise" and 0 in self.offsets:
            raise ParameterError("offset 0 is not a reference in frame_wise mode")


@dataclass
class AttentionTrace:
    """Per-query attention record.

    argmax_ref_index [H,W] int32: support-frame index of the strongest key,
    -1 at non-queries and empty-support queries. weights [H,W,N] with
    N = s^2 * n_frames, frame-major. response [n_frames,H,W]: per-frame
    attention mass at each query.
    """

    argmax_ref_index: np.ndarray
    weights: np.ndarray
    response: np.ndarray
    n_frames: int
    window_s: int


class AttentionBlock(nn.Module):
    """Shared 1x1 projections for query/key/value plus the output embedding."""

    def __init__(self, channels: int, generator: torch.Generator | None = None):
        super().__init__()
        self.channels = channels
        self.proj_q = nn.Conv2d(channels, channels, 1)
        self.proj_k = nn.Conv2d(channels, channels, 1)
        self.proj_v = nn.Conv2d(channels, channels, 1)
        self.proj_out = nn.Conv2d(channels, channels, 1, bias=False)
        if generator is not None:
            for conv in (self.proj_q, self.proj_k, self.proj_v, self.proj_out):
                init_conv_(conv, generator)


def resolve_reference_indices(target: int, n_frames: int,
                              offsets: tuple[int, ...]) -> list[int]:
    """Clamp reference offsets at sequence boundaries: an offset landing out
    of range (or on the target, or on an already-chosen frame) is replaced by
    the nearest in-range frame distinct from the target and from previous
    picks; candidates at equal distance are tried lower-index first."""
    if n_frames < 2:
        raise ParameterError("need a sequence of length >= 2 for references")
    if not (0 <= target < n_frames):
        raise ParameterError("target index out of range")
    chosen: list[int] = []
    for off in offsets:
        cand = target + off
        if not (0 <= cand < n_frames) or cand == target or cand in chosen:
            anchor = min(max(target + off, 0), n_frames - 1)
            cand = None
            for dist in range(0, n_frames):
                for c in (anchor - dist, anchor + dist):
                    if 0 <= c < n_frames and c != target and c not in chosen:
                        cand = c
                        break
                if cand is not None:
                    break
            if cand is None:
                continue
        chosen.append(cand)
    if not chosen:
        raise ParameterError("could not resolve any reference frame")
    return chosen


def _window_view(x: torch.Tensor, s: int) -> torch.Tensor:
    """[F,C,H,W] -> [HW, F*s*s, C] window gather (zero padded), laid out
    frame-major then window-row-major along the support axis."""
    f, c, h, w = x.shape
    pad = s // 2
    xp = F.pad(x, (pad, pad, pad, pad))
    st = xp.stride()
    win = xp.as_strided((f, c, h, w, s, s), (st[0], st[1], st[2], st[3], st[2], st[3]))
    return win.permute(2, 3, 0, 4, 5, 1).reshape(h * w, f * s * s, c)


def _attend(block: AttentionBlock, f_target: torch.Tensor,
            support_frames: list[torch.Tensor], query_mask: torch.Tensor,
            valid_masks: list[torch.Tensor] | None, s: int):
    """Shared windowed-attention core. Shapes: feature maps [C,H,W],
    masks [H,W]. Returns (z [C,H,W], AttentionTrace)."""
    if not support_frames:
        raise ParameterError("attention needs at least one support frame")
    c, h, w = f_target.shape
    for fr in support_frames:
        if fr.shape != f_target.shape:
            raise ParameterError("all feature maps must share one shape")
    n = len(support_frames)
    hw = h * w
    n_sup = n * s * s

    stack = torch.stack(support_frames)                        # [n,C,H,W]
    q = block.proj_q(f_target[None])[0].reshape(c, hw).T       # [HW,C]
    k = _window_view(block.proj_k(stack), s)                   # [HW,N,C]
    v = _window_view(block.proj_v(stack), s)

    ones = torch.ones(1, 1, h, w, dtype=f_target.dtype, device=f_target.device)
    in_bounds = _window_view(ones, s)[:, :, 0] > 0.5           # [HW,s2]
    valid = in_bounds.repeat(1, n)
    if valid_masks is not None:
        if len(valid_masks) != n:
            raise ParameterError("one validity mask per support frame required")
        vm = torch.stack([m.to(f_target.dtype) for m in valid_masks])[:, None]
        valid = valid & (_window_view(vm, s)[:, :, 0] > 0.5)

    logits = torch.bmm(k, q[:, :, None])[:, :, 0]              # [HW,N]
    logits = torch.where(valid, logits, torch.full_like(logits, _BIG_NEG))
    m = logits.max(dim=1, keepdim=True).values
    e = torch.exp(logits - m) * valid.to(logits.dtype)
    denom = e.sum(dim=1, keepdim=True)
    alpha = e / torch.where(denom > 0, denom, torch.ones_like(denom))

    qm = query_mask.reshape(hw, 1).to(f_target.dtype)
    agg = torch.bmm((alpha * qm)[:, None, :], v)[:, 0, :]      # [HW,C], zero non-queries
    out = block.proj_out(agg.T.reshape(1, c, h, w))[0]
    z = f_target + out

    with torch.no_grad():
        aq = alpha * qm                                        # [HW,N] frame-major
        weights = aq.reshape(h, w, n_sup)
        total = weights.sum(dim=2)
        arg = weights.argmax(dim=2) // (s * s)
        argmax = torch.where(total > 1e-12, arg, torch.full_like(arg, -1))
        response = aq.reshape(hw, n, s * s).sum(dim=2).T.reshape(n, h, w)
    trace = AttentionTrace(
        argmax_ref_index=argmax.cpu().numpy().astype(np.int32),
        weights=weights.cpu().numpy().astype(np.float32),
        response=response.cpu().numpy().astype(np.float32),
        n_frames=n, window_s=s,
    )
    return z, trace


def frame_attention(f_target: torch.Tensor, f_refs: list[torch.Tensor],
                    query_mask: torch.Tensor, cfg: AttentionConfig,
                    block: AttentionBlock):
    """Windowed cross-frame attention; queries are the masked feature
    positions of the target frame, support is the s x s window in every
    reference frame."""
    if len(f_refs) == 0:
        raise ParameterError("frame_attention requires at least one reference")
    return _attend(block, f_target, list(f_refs), query_mask, None, cfg.window_s)


def mask_attention(f_target: torch.Tensor, f_refs: list[torch.Tensor],
                   valid_masks: list[torch.Tensor], cfg: AttentionConfig,
                   block: AttentionBlock):
    """Windowed attention with support restricted to valid (non-masked)
    positions of the target frame itself and every reference frame.
    valid_masks[0] belongs to the target; queries are its complement."""
    if len(f_refs) == 0:
        raise ParameterError("mask_attention requires at least one reference")
    if len(valid_masks) != len(f_refs) + 1:
        raise ParameterError("expected one validity mask for the target plus "
                             "one per reference")
    query_mask = 1.0 - valid_masks[0].to(f_target.dtype)
    support = [f_target] + list(f_refs)
    return _attend(block, f_target, support, query_mask, list(valid_masks),
                   cfg.window_s)


def nonlocal_attention(f_target: torch.Tensor, f_refs: list[torch.Tensor],
                       block: AttentionBlock, chunk: int = 1024) -> torch.Tensor:
    """Every position attends to all positions of all reference frames.
    Queries are processed in chunks to bound the score-matrix memory."""
    if len(f_refs) == 0:
        raise ParameterError("nonlocal_attention requires at least one reference")
    c, h, w = f_target.shape
    hw = h * w
    stack = torch.stack(list(f_refs))
    q = block.proj_q(f_target[None])[0].reshape(c, hw)
    k = block.proj_k(stack).reshape(len(f_refs), c, hw).permute(1, 0, 2).reshape(c, -1)
    v = block.proj_v(stack).reshape(len(f_refs), c, hw).permute(1, 0, 2).reshape(c, -1)

    pieces = []
    for lo in range(0, hw, chunk):
        hi = min(lo + chunk, hw)
        logits = k.T @ q[:, lo:hi]                             # [nHW, chunk]
        logits = logits - logits.max(dim=0, keepdim=True).values
        a = torch.exp(logits)
        a = a / a.sum(dim=0, keepdim=True)
        pieces.append(v @ a)
    agg = torch.cat(pieces, dim=1)
    out = block.proj_out(agg.reshape(1, c, h, w))[0]
    return f_target + out


def attention_cost(h_f: int, w_f: int, n: int, s: int, c: int, mode: str) -> int:
    """Analytic multiply-accumulate count of the score + aggregate stages,
    with every position queried. Projection costs are identical across modes
    and excluded."""
    if min(h_f, w_f, s, c) < 1 or n < 0:
        raise ParameterError("dimensions must be positive (n may be zero)")
    queries = h_f * w_f
    if mode == "frame_wise":
        support = min(s * s, h_f * w_f)
    elif mode == "non_local":
        support = h_f * w_f
    else:
        raise ParameterError(f"unknown cost mode {mode!r}")
    return queries * support * n * 2 * c


def argmax_viz(trace: AttentionTrace, ref_colors: list[tuple[float, float, float]]):
    """Color map of the winning support frame per query (black elsewhere),
    plus the per-frame response maps from the trace."""
    if len(ref_colors) != trace.n_frames:
        raise ParameterError(
            f"need {trace.n_frames} colors, got {len(ref_colors)}")
    h, w = trace.argmax_ref_index.shape
    img = np.zeros((h, w, 3), dtype=np.float32)
    for i, color in enumerate(ref_colors):
        img[trace.argmax_ref_index == i] = np.asarray(color, dtype=np.float32)
    return img, trace.response.copy()
