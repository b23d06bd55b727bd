"""Occlusion mask generation: {static, shifting} x {rectangular, irregular}.

Every generated frame covers between coverage_range[0] and coverage_range[1]
of the image. Static sequences repeat one mask verbatim; shifting sequences
move the mask by a per-frame random-walk displacement of up to 12 px per
axis with small shape jitter. Irregular masks are chained brush strokes
(each stroke starts on already-masked pixels), so they form a single
4-connected component by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GenerationError, ParameterError

SHIFT_MAX_PX = 12
_MAX_RETRIES = 40


@dataclass(frozen=True)
class MaskSpec:
    kind: str = "rect"                      # rect | irregular
    motion: str = "static"                  # static | shifting
    coverage_range: tuple[float, float] = (0.08, 0.20)
    seed: int = 0
    n_frames: int = 13
    image_size: tuple[int, int] = (224, 224)

    def __post_init__(self):
        if self.kind not in ("rect", "irregular"):
            raise ParameterError(f"unknown mask kind {self.kind!r}")
        if self.motion not in ("static", "shifting"):
            raise ParameterError(f"unknown mask motion {self.motion!r}")
        lo, hi = self.coverage_range
        if not (0.0 < lo <= hi < 1.0):
            raise ParameterError("coverage_range must satisfy 0 < lo <= hi < 1")
        if self.n_frames < 1:
            raise ParameterError("n_frames must be >= 1")


def coverage(mask: np.ndarray) -> float:
    """Fraction of masked pixels; the input must be binary."""
    arr = np.asarray(mask)
    if not np.all((arr == 0) | (arr == 1)):
        raise ParameterError("coverage expects a binary mask")
    return float(arr.mean())


def _rect_mask(size, cy, cx, half_h, half_w):
    h, w = size
    mask = np.zeros((h, w), dtype=np.float32)
    y0, y1 = int(round(cy - half_h)), int(round(cy + half_h))
    x0, x1 = int(round(cx - half_w)), int(round(cx + half_w))
    mask[max(y0, 0):min(y1, h), max(x0, 0):min(x1, w)] = 1.0
    return mask


def _sample_rect(rng, spec):
    h, w = spec.image_size
    lo, hi = spec.coverage_range
    target = rng.uniform(lo + 0.02, hi - 0.02) if hi - lo > 0.06 else (lo + hi) / 2
    aspect = rng.uniform(0.6, 1.7)
    area = target * h * w
    half_w = np.sqrt(area * aspect) / 2
    half_h = area / (4 * half_w)
    cy = rng.uniform(half_h + 1, h - half_h - 1)
    cx = rng.uniform(half_w + 1, w - half_w - 1)
    return cy, cx, half_h, half_w


def _stroke_points(rng, size, start, width):
    h, w = size
    n_steps = rng.integers(8, 22)
    step = max(width * 0.45, 2.0)
    ang = rng.uniform(0, 2 * np.pi)
    pts = [np.asarray(start, dtype=np.float64)]
    for _ in range(n_steps):
        ang += rng.uniform(-0.6, 0.6)       # bounded turning angle
        nxt = pts[-1] + step * np.array([np.sin(ang), np.cos(ang)])
        nxt[0] = np.clip(nxt[0], width, h - 1 - width)
        nxt[1] = np.clip(nxt[1], width, w - 1 - width)
        pts.append(nxt)
    return np.stack(pts)


def _draw_stroke(mask, pts, radius):
    h, w = mask.shape
    # dense points along each segment so successive disks overlap
    dense = [pts[0]]
    for a, b in zip(pts[:-1], pts[1:]):
        seg = np.linalg.norm(b - a)
        n = max(int(np.ceil(seg / max(radius * 0.5, 1.0))), 1)
        for t in np.linspace(0, 1, n + 1)[1:]:
            dense.append(a + t * (b - a))
    for cy, cx in dense:
        y0, y1 = max(int(cy - radius), 0), min(int(cy + radius) + 1, h)
        x0, x1 = max(int(cx - radius), 0), min(int(cx + radius) + 1, w)
        ys, xs = np.mgrid[y0:y1, x0:x1]
        mask[y0:y1, x0:x1][(ys - cy) ** 2 + (xs - cx) ** 2 <= radius ** 2] = 1.0


def _irregular_strokes(rng, spec):
    """Stroke polylines + widths whose union lands inside coverage_range.
    Strokes after the first start on an existing masked pixel."""
    h, w = spec.image_size
    lo, hi = spec.coverage_range
    for attempt in range(_MAX_RETRIES):
        shrink = 0.85 ** attempt
        width = rng.uniform(10, 25) * shrink
        mask = np.zeros((h, w), dtype=np.float32)
        strokes = []
        start = np.array([rng.uniform(h * 0.2, h * 0.8), rng.uniform(w * 0.2, w * 0.8)])
        target = rng.uniform(lo + 0.01, min(hi - 0.03, lo + 0.06))
        for _ in range(24):
            pts = _stroke_points(rng, (h, w), start, width)
            _draw_stroke(mask, pts, width / 2)
            strokes.append(pts)
            if mask.mean() >= target:
                break
            on = np.argwhere(mask > 0.5)
            start = on[rng.integers(len(on))].astype(np.float64)
        cov = mask.mean()
        if lo <= cov <= hi and len(strokes) >= 1:
            return strokes, width
    raise GenerationError("could not reach the requested irregular coverage")


def _render_strokes(size, strokes, width, offset, jitter_rng=None):
    h, w = size
    mask = np.zeros((h, w), dtype=np.float32)
    for pts in strokes:
        p = pts + np.asarray(offset, dtype=np.float64)
        if jitter_rng is not None:
            p = p + jitter_rng.uniform(-3, 3, size=p.shape)
        p[:, 0] = np.clip(p[:, 0], 0, h - 1)
        p[:, 1] = np.clip(p[:, 1], 0, w - 1)
        _draw_stroke(mask, p, width / 2)
    return mask


def make_mask_sequence(spec: MaskSpec) -> list[np.ndarray]:
    """Generate spec.n_frames binary masks [H,W,1]. Deterministic in
    spec.seed; raises GenerationError if the coverage constraint cannot be
    met within bounded retries."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.image_size
    lo, hi = spec.coverage_range

    if spec.kind == "rect":
        cy, cx, half_h, half_w = _sample_rect(rng, spec)
        base = _rect_mask((h, w), cy, cx, half_h, half_w)
        if not (lo <= base.mean() <= hi):
            raise GenerationError("rectangle coverage off range; image too small?")
        if spec.motion == "static":
            return [base.copy()[:, :, None] for _ in range(spec.n_frames)]
        frames = [base[:, :, None]]
        prev = base
        for _ in range(spec.n_frames - 1):
            for attempt in range(_MAX_RETRIES):
                dy, dx = rng.uniform(-SHIFT_MAX_PX, SHIFT_MAX_PX, size=2)
                jh = half_h * rng.uniform(0.9, 1.1)
                jw = half_w * rng.uniform(0.9, 1.1)
                ny = np.clip(cy + dy, jh + 1, h - jh - 1)
                nx = np.clip(cx + dx, jw + 1, w - jw - 1)
                m = _rect_mask((h, w), ny, nx, jh, jw)
                if lo <= m.mean() <= hi and not np.array_equal(m, prev):
                    cy, cx = ny, nx
                    break
            else:
                raise GenerationError("could not jitter rectangle within coverage")
            frames.append(m[:, :, None])
            prev = m
        return frames

    strokes, width = _irregular_strokes(rng, spec)
    base = _render_strokes((h, w), strokes, width, (0.0, 0.0))
    if spec.motion == "static":
        return [base.copy()[:, :, None] for _ in range(spec.n_frames)]
    frames = [base[:, :, None]]
    prev = base
    off = np.zeros(2)
    for _ in range(spec.n_frames - 1):
        for attempt in range(_MAX_RETRIES):
            step = rng.uniform(-SHIFT_MAX_PX, SHIFT_MAX_PX, size=2)
            jrng = np.random.default_rng(rng.integers(2 ** 63))
            m = _render_strokes((h, w), strokes, width, off + step, jitter_rng=jrng)
            if lo <= m.mean() <= hi and not np.array_equal(m, prev):
                off = off + step
                break
        else:
            raise GenerationError("could not shift strokes within coverage")
        frames.append(m[:, :, None])
        prev = m
    return frames
