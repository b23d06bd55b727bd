"""Independent brute-force oracles used by the tests.

These are deliberately written as plain per-element loops so they share no
code with the implementations they check.
"""

import numpy as np


def conv1x1(conv, x):
    """Apply a torch 1x1 conv to a numpy [C,H,W] array with loops."""
    w = conv.weight.detach().numpy()[:, :, 0, 0]
    b = (conv.bias.detach().numpy() if conv.bias is not None
         else np.zeros(w.shape[0]))
    out = np.zeros((w.shape[0],) + x.shape[1:])
    for o in range(w.shape[0]):
        for c in range(w.shape[1]):
            out[o] += w[o, c] * x[c]
        out[o] += b[o]
    return out


def loop_window_attention(block, f_target, support_frames, query_mask,
                          valid_masks, s):
    """Per-query loop reference for the windowed attention family.

    support_frames: list of numpy [C,H,W]; valid_masks: None (bounds only)
    or one numpy [H,W] per support frame. Returns z [C,H,W].
    """
    c, h, w = f_target.shape
    q = conv1x1(block.proj_q, f_target)
    ks = [conv1x1(block.proj_k, fr) for fr in support_frames]
    vs = [conv1x1(block.proj_v, fr) for fr in support_frames]
    wz = block.proj_out.weight.detach().numpy()[:, :, 0, 0]
    r = s // 2
    z = f_target.copy()
    for y in range(h):
        for x in range(w):
            if query_mask[y, x] < 0.5:
                continue
            logits, vals = [], []
            for fi in range(len(support_frames)):
                for dy in range(-r, r + 1):
                    for dx in range(-r, r + 1):
                        yy, xx = y + dy, x + dx
                        if not (0 <= yy < h and 0 <= xx < w):
                            continue
                        if valid_masks is not None and valid_masks[fi][yy, xx] < 0.5:
                            continue
                        logits.append(float(ks[fi][:, yy, xx] @ q[:, y, x]))
                        vals.append(vs[fi][:, yy, xx])
            if not logits:
                continue
            logits = np.asarray(logits)
            e = np.exp(logits - logits.max())
            alpha = e / e.sum()
            agg = (np.asarray(vals) * alpha[:, None]).sum(axis=0)
            z[:, y, x] += wz @ agg
    return z


def loop_bilinear(image, x, y):
    h, w = image.shape[:2]
    x0 = min(max(int(np.floor(x)), 0), w - 2)
    y0 = min(max(int(np.floor(y)), 0), h - 2)
    dx = min(max(x - x0, 0.0), 1.0)
    dy = min(max(y - y0, 0.0), 1.0)
    return ((1 - dy) * (1 - dx) * image[y0, x0]
            + (1 - dy) * dx * image[y0, x0 + 1]
            + dy * (1 - dx) * image[y0 + 1, x0]
            + dy * dx * image[y0 + 1, x0 + 1])
