"""Image-space <-> UV-space transport.

Projection, visibility, bilinear texture sampling, UV rasterization,
back-projection rendering of UV maps into the image, and flipping.

Conventions used throughout:
  - pixel/texel (row i, col j) has its center at continuous (x=j, y=i)
  - UV coordinate (u, v) maps to texel-grid position x = u*(W-1), y = v*(H-1),
    so a horizontal array mirror corresponds exactly to u -> 1-u
  - rasterization evaluates inclusive edge tests at pixel centers, interpolates
    attributes with screen-space barycentrics and resolves depth with a
    z-buffer (strictly closer wins; ties keep the first triangle), so results
    are deterministic across runs
  - nothing here is differentiable; training losses reach the image through
    the fixed sparse sampling map produced by build_uv_transport
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GeometryError, ParameterError
from .facemodel import CameraSpec, FaceParams, MorphableModel, build_shape, pose_transform

# z-buffer tolerance as a fraction of the scene depth range
Z_EPS_FRACTION = 1e-3


@dataclass
class ProjectedMesh:
    points2d: np.ndarray            # [V, 2] pixel coords (x, y)
    depth: np.ndarray               # [V] camera-space z
    visible: np.ndarray | None = None  # [V] bool, filled by compute_visibility


@dataclass
class UVFrameSet:
    """Per-frame maps on a common UV grid.

    u_in        observed face texture, zero outside u_valid support
    u_in_flip   horizontal mirror of u_in
    u_synth     texture synthesized from the linear model (clamped albedo)
    u_valid     texels backed by a visible mesh region        {0,1}, [H,W,1]
    u_missing   valid texels lost to the image-space mask     {0,1}, [H,W,1]
    u_gt        ground-truth texture (synthetic data only)
    u_out       completed texture, filled by the stage-one network
    """

    u_in: np.ndarray
    u_in_flip: np.ndarray
    u_synth: np.ndarray
    u_valid: np.ndarray
    u_missing: np.ndarray
    u_gt: np.ndarray | None = None
    u_out: np.ndarray | None = None


@dataclass
class ImageFrameSet:
    """Per-frame image-space maps.

    i_in             corrupted input frame (i_gt with masked pixels zeroed)
    i_gt             ground truth frame
    i_render         UV texture rendered back through the face model
    i_render_masked  i_missing * i_render
    i_missing        binary occlusion mask          [H,W,1]
    i_valid          face-model coverage mask       [H,W,1]
    i_out / i_comp   refinement output and final composite
    """

    i_in: np.ndarray
    i_gt: np.ndarray | None
    i_missing: np.ndarray
    i_valid: np.ndarray
    i_render: np.ndarray | None = None
    i_render_masked: np.ndarray | None = None
    i_out: np.ndarray | None = None
    i_comp: np.ndarray | None = None


def project(vertices: np.ndarray, camera: CameraSpec) -> ProjectedMesh:
    """Pinhole projection x = f*X/Z + cx, y = f*Y/Z + cy. All vertices must
    be strictly in front of the camera."""
    vertices = np.asarray(vertices, dtype=np.float64)
    z = vertices[:, 2]
    if np.any(z <= 1e-9):
        raise GeometryError("vertex at or behind the camera plane")
    cx, cy = camera.principal_point
    pts = np.stack([camera.focal * vertices[:, 0] / z + cx,
                    camera.focal * vertices[:, 1] / z + cy], axis=1)
    return ProjectedMesh(points2d=pts, depth=z.copy())


def _rasterize(points2d: np.ndarray, depth: np.ndarray, triangles: np.ndarray,
               size: tuple[int, int]):
    """Scanline-free per-triangle rasterizer.

    Returns (tri_id [H,W] int32 with -1 background, bary [H,W,3], zbuf [H,W]).
    """
    h, w = size
    tri_id = np.full((h, w), -1, dtype=np.int32)
    bary = np.zeros((h, w, 3), dtype=np.float64)
    zbuf = np.full((h, w), np.inf, dtype=np.float64)

    pts = points2d
    for t in range(triangles.shape[0]):
        i0, i1, i2 = triangles[t]
        x0, y0 = pts[i0]
        x1, y1 = pts[i1]
        x2, y2 = pts[i2]
        xmin = max(0, int(np.ceil(min(x0, x1, x2))))
        xmax = min(w - 1, int(np.floor(max(x0, x1, x2))))
        ymin = max(0, int(np.ceil(min(y0, y1, y2))))
        ymax = min(h - 1, int(np.floor(max(y0, y1, y2))))
        if xmin > xmax or ymin > ymax:
            continue
        denom = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if abs(denom) < 1e-12:
            continue
        xs = np.arange(xmin, xmax + 1, dtype=np.float64)
        ys = np.arange(ymin, ymax + 1, dtype=np.float64)
        gx, gy = np.meshgrid(xs, ys)
        w0 = ((x1 - gx) * (y2 - gy) - (y1 - gy) * (x2 - gx)) / denom
        w1 = ((x2 - gx) * (y0 - gy) - (y2 - gy) * (x0 - gx)) / denom
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        z = w0 * depth[i0] + w1 * depth[i1] + w2 * depth[i2]
        region = (slice(ymin, ymax + 1), slice(xmin, xmax + 1))
        upd = inside & (z < zbuf[region])
        if not upd.any():
            continue
        zbuf[region][upd] = z[upd]
        tri_id[region][upd] = t
        sub = bary[region]
        sub[upd] = np.stack([w0[upd], w1[upd], w2[upd]], axis=1)
        bary[region] = sub
    return tri_id, bary, zbuf


def _front_facing(posed: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Front-facing flag per triangle for a camera at the origin: the outward
    normal must point back toward the camera."""
    p0, p1, p2 = posed[triangles[:, 0]], posed[triangles[:, 1]], posed[triangles[:, 2]]
    normals = np.cross(p1 - p0, p2 - p0)
    centroids = (p0 + p1 + p2) / 3.0
    return np.einsum("fi,fi->f", normals, centroids) < 0


def compute_visibility(model: MorphableModel, posed_vertices: np.ndarray,
                       projected: ProjectedMesh, camera: CameraSpec) -> np.ndarray:
    """A vertex is visible iff it has at least one front-facing incident
    triangle, projects inside the image, and survives a z-buffer test
    against the full surface rasterized at image resolution.

    The z test accepts a vertex outright when the triangle rasterized at its
    (rounded) pixel belongs to the vertex's own 1-ring: the vertex then *is*
    the front surface there, and comparing its exact depth against the
    interpolated depth half a pixel away would reject valid vertices on
    sloped regions. The eps comparison handles genuine occluders.
    """
    h, w = camera.image_size
    tris = model.triangles
    front = _front_facing(posed_vertices, tris)
    vert_front = np.zeros(model.n_vertices, dtype=bool)
    vert_front[tris[front].reshape(-1)] = True

    pts = projected.points2d
    in_bounds = ((pts[:, 0] >= 0) & (pts[:, 0] <= w - 1)
                 & (pts[:, 1] >= 0) & (pts[:, 1] <= h - 1))

    tri_id, _, zbuf = _rasterize(pts, projected.depth, tris, (h, w))
    eps = Z_EPS_FRACTION * max(projected.depth.max() - projected.depth.min(), 1e-12)
    px = np.clip(np.rint(pts[:, 0]).astype(int), 0, w - 1)
    py = np.clip(np.rint(pts[:, 1]).astype(int), 0, h - 1)
    within_eps = projected.depth <= zbuf[py, px] + eps
    tri_at = tri_id[py, px]                                     # [V]
    own_ring = np.any(tris[np.clip(tri_at, 0, None)]
                      == np.arange(model.n_vertices)[:, None], axis=1)
    own_ring &= tri_at >= 0
    unoccluded = within_eps | own_ring | (tri_at < 0)

    return vert_front & in_bounds & unoccluded


def bilinear_sample(image: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear lookup at continuous pixel positions, clamp-to-edge."""
    h, w = image.shape[:2]
    x0 = np.clip(np.floor(x).astype(int), 0, w - 2)
    y0 = np.clip(np.floor(y).astype(int), 0, h - 2)
    dx = np.clip(x - x0, 0.0, 1.0)[..., None]
    dy = np.clip(y - y0, 0.0, 1.0)[..., None]
    v00 = image[y0, x0]
    v01 = image[y0, x0 + 1]
    v10 = image[y0 + 1, x0]
    v11 = image[y0 + 1, x0 + 1]
    return ((1 - dy) * ((1 - dx) * v00 + dx * v01)
            + dy * ((1 - dx) * v10 + dx * v11))


def sample_texture(image: np.ndarray, i_missing: np.ndarray | None,
                   projected: ProjectedMesh, visible: np.ndarray):
    """Per-vertex bilinear colors from the image at projected locations.

    A vertex is valid only if visible and none of its four bilinear source
    pixels are masked; invalid vertices get zero color.
    """
    h, w = image.shape[:2]
    pts = projected.points2d
    in_bounds = ((pts[:, 0] >= 0) & (pts[:, 0] <= w - 1)
                 & (pts[:, 1] >= 0) & (pts[:, 1] <= h - 1))
    valid = np.asarray(visible, dtype=bool) & in_bounds

    colors = bilinear_sample(image, pts[:, 0], pts[:, 1])
    if i_missing is not None:
        m = np.asarray(i_missing)
        if m.ndim == 3:
            m = m[:, :, 0]
        x0 = np.clip(np.floor(pts[:, 0]).astype(int), 0, w - 2)
        y0 = np.clip(np.floor(pts[:, 1]).astype(int), 0, h - 2)
        touched = (m[y0, x0] + m[y0, x0 + 1] + m[y0 + 1, x0] + m[y0 + 1, x0 + 1])
        valid = valid & (touched < 0.5)

    colors = np.where(valid[:, None], colors, 0.0)
    return colors, valid


def uv_grid_points(model: MorphableModel, uv_size: tuple[int, int]) -> np.ndarray:
    """Vertex positions on the texel grid of a (H_uv, W_uv) UV map."""
    h, w = uv_size
    return np.stack([model.uv_coords[:, 0] * (w - 1),
                     model.uv_coords[:, 1] * (h - 1)], axis=1)


def rasterize_uv(model: MorphableModel, per_vertex_values: np.ndarray,
                 per_vertex_valid: np.ndarray, uv_size: tuple[int, int] = (256, 256)):
    """Barycentric rasterization of per-vertex values over the UV grid.

    A texel is valid only when covered by a triangle whose three vertices are
    all valid; invalid texels are zero. Returns (uv_map [H,W,K], uv_valid [H,W,1]).
    """
    values = np.asarray(per_vertex_values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[0] != model.n_vertices:
        raise ParameterError("per_vertex_values must have one row per vertex")
    vvalid = np.asarray(per_vertex_valid, dtype=bool)

    pts = uv_grid_points(model, uv_size)
    tri_id, bary, _ = _rasterize(pts, np.zeros(model.n_vertices), model.triangles, uv_size)

    h, w = uv_size
    uv_map = np.zeros((h, w, values.shape[1]), dtype=np.float64)
    uv_valid = np.zeros((h, w, 1), dtype=np.float32)
    covered = tri_id >= 0
    tv = model.triangles[tri_id[covered]]                       # [P, 3]
    bc = bary[covered]                                          # [P, 3]
    uv_map[covered] = np.einsum("pk,pkc->pc", bc, values[tv])
    ok = vvalid[tv].all(axis=1)
    sel = np.zeros_like(covered)
    sel[covered] = ok
    uv_valid[sel] = 1.0
    uv_map[~sel] = 0.0
    return uv_map.astype(np.float32), uv_valid


@dataclass
class UVToImageTransport:
    """Fixed sparse bilinear map from UV texels to covered image pixels.

    For covered pixel p: out[p] = sum_k weights[p,k] * uv[texel_rows[p,k],
    texel_cols[p,k]].  Applying it reproduces render_face exactly; it is the
    linear operator through which image-space training losses reach the
    completed UV map.
    """

    image_size: tuple[int, int]
    uv_size: tuple[int, int]
    pix_rows: np.ndarray     # [P]
    pix_cols: np.ndarray     # [P]
    texel_flat: np.ndarray   # [P, 4] flattened row*W+col indices
    weights: np.ndarray      # [P, 4]
    i_valid: np.ndarray      # [H, W, 1] coverage mask

    def apply(self, uv_map: np.ndarray) -> np.ndarray:
        h, w = self.image_size
        c = uv_map.shape[2]
        flat = uv_map.reshape(-1, c)
        out = np.zeros((h, w, c), dtype=uv_map.dtype)
        vals = np.einsum("pk,pkc->pc", self.weights, flat[self.texel_flat])
        out[self.pix_rows, self.pix_cols] = vals
        return out


def build_uv_transport(model: MorphableModel, params: FaceParams,
                       camera: CameraSpec,
                       uv_size: tuple[int, int] = (256, 256)) -> UVToImageTransport:
    """Rasterize the posed mesh once and record, for every covered pixel, the
    four UV texels and bilinear weights that color it."""
    posed = pose_transform(build_shape(model, params.alpha, params.beta),
                           params.rot, params.trans)
    projected = project(posed, camera)
    h, w = camera.image_size
    tri_id, bary, _ = _rasterize(projected.points2d, projected.depth,
                                 model.triangles, (h, w))
    covered = tri_id >= 0
    rows, cols = np.nonzero(covered)
    tv = model.triangles[tri_id[covered]]
    bc = bary[covered]

    huv, wuv = uv_size
    uvx = np.einsum("pk,pk->p", bc, model.uv_coords[tv][:, :, 0]) * (wuv - 1)
    uvy = np.einsum("pk,pk->p", bc, model.uv_coords[tv][:, :, 1]) * (huv - 1)
    x0 = np.clip(np.floor(uvx).astype(np.int64), 0, wuv - 2)
    y0 = np.clip(np.floor(uvy).astype(np.int64), 0, huv - 2)
    dx = np.clip(uvx - x0, 0.0, 1.0)
    dy = np.clip(uvy - y0, 0.0, 1.0)
    texel_flat = np.stack([y0 * wuv + x0, y0 * wuv + x0 + 1,
                           (y0 + 1) * wuv + x0, (y0 + 1) * wuv + x0 + 1], axis=1)
    weights = np.stack([(1 - dy) * (1 - dx), (1 - dy) * dx,
                        dy * (1 - dx), dy * dx], axis=1)
    i_valid = covered.astype(np.float32)[:, :, None]
    return UVToImageTransport(image_size=(h, w), uv_size=uv_size,
                              pix_rows=rows, pix_cols=cols,
                              texel_flat=texel_flat, weights=weights,
                              i_valid=i_valid)


def render_face(model: MorphableModel, params: FaceParams, uv_map: np.ndarray,
                camera: CameraSpec):
    """Z-buffered render of the posed mesh textured by uv_map.

    Each covered pixel bilinearly samples uv_map at its interpolated UV
    coordinate. Returns (i_render [H,W,3], i_valid [H,W,1]).
    """
    transport = build_uv_transport(model, params, camera, uv_map.shape[:2])
    rendered = transport.apply(np.asarray(uv_map, dtype=np.float64))
    return rendered.astype(np.float32), transport.i_valid


def render_vertex_colors(model: MorphableModel, posed: np.ndarray,
                         colors: np.ndarray, camera: CameraSpec):
    """Render per-vertex colors directly (no UV round trip); used for
    synthetic ground-truth frames. Returns (image [H,W,3], coverage [H,W,1])."""
    projected = project(posed, camera)
    h, w = camera.image_size
    tri_id, bary, _ = _rasterize(projected.points2d, projected.depth,
                                 model.triangles, (h, w))
    covered = tri_id >= 0
    img = np.zeros((h, w, 3), dtype=np.float64)
    tv = model.triangles[tri_id[covered]]
    img[covered] = np.einsum("pk,pkc->pc", bary[covered],
                             np.clip(colors, 0.0, 1.0)[tv])
    return img.astype(np.float32), covered.astype(np.float32)[:, :, None]


def flip_uv(u: np.ndarray) -> np.ndarray:
    """Horizontal mirror of a UV-grid array ([H, W, ...])."""
    return np.ascontiguousarray(u[:, ::-1])
