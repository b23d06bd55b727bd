"""Toy linear morphable head model.

Procedurally generates an ellipsoid-like head mesh with smooth random
shape / expression / texture bases and a cylindrical UV unwrap. The mesh
is an open latitude-longitude grid (poles and a rear seam left out), so
the unwrap is fold-over free and mirror symmetric about the face midline.

Conventions:
  - model units: head half-height ~= 1.0, head centered at the origin
  - the face looks along -z, "up" is -y (matches image row-down order)
  - shape/texture synthesis is linear: mean + basis @ coefficients
  - basis matrices are [3V x D] over row-major flattened [V, 3] arrays
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParameterError

_LAT_RANGE = (np.deg2rad(15.0), np.deg2rad(165.0))
_LON_RANGE = (np.deg2rad(-150.0), np.deg2rad(150.0))
_HEAD_RADII = (0.80, 1.00, 0.85)

# (latitude, longitude) in degrees of the 16 tracked feature points:
# eye corners, nose tip/base, mouth corners/center, chin, jaw, brow, forehead.
_LANDMARK_ANGLES_DEG = [
    (72.0, -55.0), (72.0, -25.0), (72.0, 25.0), (72.0, 55.0),
    (95.0, 0.0),
    (100.0, -12.0), (100.0, 12.0),
    (122.0, -28.0), (122.0, 28.0),
    (128.0, 0.0),
    (155.0, 0.0),
    (140.0, -45.0), (140.0, 45.0),
    (55.0, -45.0), (55.0, 45.0),
    (40.0, 0.0),
]


@dataclass(frozen=True)
class MorphableModel:
    """Linear face model: mean shape/texture plus smooth basis columns.

    All arrays are read-only after construction. Basis columns have unit
    Euclidean norm; triangles index into [0, V) with consistent outward
    winding; uv_coords live in the unit square.
    """

    mean_shape: np.ndarray      # [V, 3]
    mean_texture: np.ndarray    # [V, 3] in [0, 1]
    basis_id: np.ndarray        # [3V, D_id]
    basis_exp: np.ndarray       # [3V, D_exp]
    basis_tex: np.ndarray       # [3V, D_tex]
    triangles: np.ndarray       # [F, 3] int32
    uv_coords: np.ndarray       # [V, 2] in [0, 1]^2
    seed: int = 0
    n_subdiv: int = 3

    @property
    def n_vertices(self) -> int:
        return self.mean_shape.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return (
            self.basis_id.shape[1],
            self.basis_exp.shape[1],
            self.basis_tex.shape[1],
        )


@dataclass
class FaceParams:
    """Per-frame face coefficients: identity, expression, texture,
    illumination (stored, unused by default), and rigid pose."""

    alpha: np.ndarray           # [D_id]
    beta: np.ndarray            # [D_exp]
    delta: np.ndarray           # [D_tex]
    gamma: np.ndarray = field(default_factory=lambda: np.zeros(27))
    rot: np.ndarray = field(default_factory=lambda: np.zeros(3))    # yaw, pitch, roll (rad)
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("alpha", "beta", "delta", "gamma", "rot", "trans"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ParameterError(f"FaceParams.{name} must be finite")
            setattr(self, name, arr)

    def copy(self) -> "FaceParams":
        return FaceParams(
            alpha=self.alpha.copy(), beta=self.beta.copy(), delta=self.delta.copy(),
            gamma=self.gamma.copy(), rot=self.rot.copy(), trans=self.trans.copy(),
        )

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha.tolist(), "beta": self.beta.tolist(),
            "delta": self.delta.tolist(), "gamma": self.gamma.tolist(),
            "rot": self.rot.tolist(), "trans": self.trans.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FaceParams":
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})


@dataclass(frozen=True)
class CameraSpec:
    """Pinhole camera. The camera sits at the origin looking along +z,
    x right, y down; pixel (row, col) centers are at integer coordinates."""

    focal: float
    principal_point: tuple[float, float]    # (cx, cy) in pixels
    image_size: tuple[int, int]             # (H, W)

    def __post_init__(self):
        h, w = self.image_size
        cx, cy = self.principal_point
        if self.focal <= 0:
            raise ParameterError("focal length must be positive")
        if not (0 <= cx <= w - 1 and 0 <= cy <= h - 1):
            raise ParameterError("principal point must lie inside the image")


def default_camera(image_size: tuple[int, int] = (224, 224)) -> CameraSpec:
    h, w = image_size
    return CameraSpec(focal=2.5 * w, principal_point=((w - 1) / 2.0, (h - 1) / 2.0),
                      image_size=(h, w))


def _grid_angles(n_subdiv: int):
    n_lat = 4 * 2 ** n_subdiv
    n_lon = 6 * 2 ** n_subdiv
    theta = np.linspace(_LAT_RANGE[0], _LAT_RANGE[1], n_lat + 1)
    phi = np.linspace(_LON_RANGE[0], _LON_RANGE[1], n_lon + 1)
    return theta, phi


def _smooth_features(theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Low-frequency trigonometric feature matrix [V, 25] over the sphere
    parameterization; linear combinations of these are smooth vertex fields."""
    a = np.stack([np.ones_like(theta), np.cos(theta), np.sin(theta),
                  np.cos(2 * theta), np.sin(2 * theta)], axis=1)
    b = np.stack([np.ones_like(phi), np.cos(phi), np.sin(phi),
                  np.cos(2 * phi), np.sin(2 * phi)], axis=1)
    return np.einsum("vi,vj->vij", a, b).reshape(theta.shape[0], 25)


def _smooth_basis(rng: np.random.Generator, feats: np.ndarray, n_cols: int,
                  weight: np.ndarray | None = None) -> np.ndarray:
    """[3V x n_cols] basis whose columns are smooth random vertex fields,
    normalized to unit Euclidean norm."""
    v = feats.shape[0]
    cols = np.empty((3 * v, n_cols))
    for k in range(n_cols):
        coef = rng.standard_normal((feats.shape[1], 3))
        fld = feats @ coef
        if weight is not None:
            fld = fld * weight[:, None]
        flat = fld.reshape(-1)
        cols[:, k] = flat / np.linalg.norm(flat)
    return cols


def _gauss2(theta, phi, mu_t, mu_p, sig_t, sig_p):
    return np.exp(-0.5 * (((theta - mu_t) / sig_t) ** 2 + ((phi - mu_p) / sig_p) ** 2))


def _paint_mean_texture(theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Smooth face-like albedo: skin base plus eye/mouth/nose features.
    Values kept inside (0, 1) with margin for basis perturbations."""
    v = theta.shape[0]
    base = np.array([0.78, 0.62, 0.52])
    tex = np.tile(base, (v, 1))
    # gentle large-scale shading so fitting has photometric gradients everywhere
    tex += 0.06 * (np.cos(phi) * np.sin(theta))[:, None]
    tex -= 0.05 * np.cos(2 * theta)[:, None]

    def blend(w, color):
        nonlocal tex
        tex = (1 - w[:, None]) * tex + w[:, None] * np.asarray(color)

    d2r = np.deg2rad
    for sgn in (-1.0, 1.0):
        blend(_gauss2(theta, phi, d2r(73), sgn * d2r(38), 0.10, 0.14), (0.12, 0.10, 0.10))
        blend(0.6 * _gauss2(theta, phi, d2r(60), sgn * d2r(38), 0.06, 0.20), (0.30, 0.22, 0.18))
    blend(_gauss2(theta, phi, d2r(122), 0.0, 0.07, 0.30), (0.55, 0.20, 0.18))
    blend(0.5 * _gauss2(theta, phi, d2r(96), 0.0, 0.22, 0.09), (0.88, 0.74, 0.62))
    return np.clip(tex, 0.03, 0.97)


def build_toy_model(seed: int, n_subdiv: int = 3,
                    dims: tuple[int, int, int] = (8, 4, 8)) -> MorphableModel:
    """Deterministically generate the toy morphable head model.

    n_subdiv controls grid resolution (4*2^k x 6*2^k quads); dims are the
    identity / expression / texture basis sizes.
    """
    if not (isinstance(n_subdiv, (int, np.integer)) and n_subdiv >= 1):
        raise ParameterError("n_subdiv must be an integer >= 1")
    if len(dims) != 3 or any(int(d) < 1 for d in dims):
        raise ParameterError("dims must be three integers >= 1")
    d_id, d_exp, d_tex = (int(d) for d in dims)

    theta_1d, phi_1d = _grid_angles(n_subdiv)
    n_lat, n_lon = theta_1d.size - 1, phi_1d.size - 1
    theta, phi = np.meshgrid(theta_1d, phi_1d, indexing="ij")
    theta, phi = theta.reshape(-1), phi.reshape(-1)

    rx, ry, rz = _HEAD_RADII
    verts = np.stack([
        rx * np.sin(theta) * np.sin(phi),
        -ry * np.cos(theta),
        -rz * np.sin(theta) * np.cos(phi),
    ], axis=1)

    uv = np.stack([
        (phi - _LON_RANGE[0]) / (_LON_RANGE[1] - _LON_RANGE[0]),
        (theta - _LAT_RANGE[0]) / (_LAT_RANGE[1] - _LAT_RANGE[0]),
    ], axis=1)

    # quad (i, j) -> two triangles with outward winding
    idx = np.arange((n_lat + 1) * (n_lon + 1)).reshape(n_lat + 1, n_lon + 1)
    a = idx[:-1, :-1].reshape(-1)
    b = idx[:-1, 1:].reshape(-1)
    c = idx[1:, :-1].reshape(-1)
    d = idx[1:, 1:].reshape(-1)
    tris = np.concatenate([np.stack([a, c, b], 1), np.stack([b, c, d], 1)]).astype(np.int32)

    # outward winding check: cross(v1-v0, v2-v0) . centroid > 0 on an
    # origin-centered convex surface means the normal points inward
    p0, p1, p2 = verts[tris[:, 0]], verts[tris[:, 1]], verts[tris[:, 2]]
    normals = np.cross(p1 - p0, p2 - p0)
    centroids = (p0 + p1 + p2) / 3.0
    assert np.all(np.einsum("fi,fi->f", normals, centroids) > 0), "winding broke"

    rng = np.random.default_rng(seed)
    feats = _smooth_features(theta, phi)
    # expressions concentrate on the lower face
    lower = 0.2 + 0.8 / (1.0 + np.exp(-(theta - np.deg2rad(105)) / 0.3))
    basis_id = _smooth_basis(rng, feats, d_id)
    basis_exp = _smooth_basis(rng, feats, d_exp, weight=lower)
    basis_tex = _smooth_basis(rng, feats, d_tex)

    arrays = dict(
        mean_shape=verts,
        mean_texture=_paint_mean_texture(theta, phi),
        basis_id=basis_id, basis_exp=basis_exp, basis_tex=basis_tex,
        triangles=tris, uv_coords=uv,
    )
    for arr in arrays.values():
        arr.setflags(write=False)
    return MorphableModel(seed=int(seed), n_subdiv=int(n_subdiv), **arrays)


def build_shape(model: MorphableModel, alpha: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """S = mean + B_id @ alpha + B_exp @ beta, returned as [V, 3]."""
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    d_id, d_exp, _ = model.dims
    if alpha.shape != (d_id,):
        raise ParameterError(f"alpha must have shape ({d_id},), got {alpha.shape}")
    if beta.shape != (d_exp,):
        raise ParameterError(f"beta must have shape ({d_exp},), got {beta.shape}")
    flat = model.mean_shape.reshape(-1) + model.basis_id @ alpha + model.basis_exp @ beta
    return flat.reshape(-1, 3)


def build_texture(model: MorphableModel, delta: np.ndarray) -> np.ndarray:
    """T = mean + B_tex @ delta, as [V, 3]. Not clamped here; clamping to
    [0, 1] happens at render time only."""
    delta = np.asarray(delta, dtype=np.float64)
    d_tex = model.dims[2]
    if delta.shape != (d_tex,):
        raise ParameterError(f"delta must have shape ({d_tex},), got {delta.shape}")
    flat = model.mean_texture.reshape(-1) + model.basis_tex @ delta
    return flat.reshape(-1, 3)


def rotation_from_euler(rot: np.ndarray) -> np.ndarray:
    """3x3 rotation from (yaw, pitch, roll) radians, composed as
    R = R_z(roll) @ R_y(yaw) @ R_x(pitch)."""
    yaw, pitch, roll = np.asarray(rot, dtype=np.float64)
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    return rz @ ry @ rx


def pose_transform(vertices: np.ndarray, rot: np.ndarray, trans: np.ndarray) -> np.ndarray:
    """Rigid transform v' = R v + t applied per vertex."""
    r = rotation_from_euler(rot)
    return vertices @ r.T + np.asarray(trans, dtype=np.float64)


def landmark_vertex_indices(model: MorphableModel) -> np.ndarray:
    """Indices of the 16 tracked feature vertices, chosen once per model as
    the nearest mesh vertex (in UV) to each canonical feature location."""
    lat0, lat1 = _LAT_RANGE
    lon0, lon1 = _LON_RANGE
    out = np.empty(len(_LANDMARK_ANGLES_DEG), dtype=np.int64)
    for i, (lat_deg, lon_deg) in enumerate(_LANDMARK_ANGLES_DEG):
        u = (np.deg2rad(lon_deg) - lon0) / (lon1 - lon0)
        v = (np.deg2rad(lat_deg) - lat0) / (lat1 - lat0)
        d2 = np.sum((model.uv_coords - np.array([u, v])) ** 2, axis=1)
        out[i] = int(np.argmin(d2))
    return out


_ARRAY_SPECS = [
    ("mean_shape", np.float32), ("mean_texture", np.float32),
    ("basis_id", np.float32), ("basis_exp", np.float32), ("basis_tex", np.float32),
    ("triangles", np.int32), ("uv_coords", np.float32),
]


def save_model(model: MorphableModel, path: str | Path) -> None:
    """Write manifest.json plus one raw little-endian sidecar per array
    (float32 '.f32' / int32 '.i32', row-major)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "seed": model.seed,
        "n_subdiv": model.n_subdiv,
        "dims": list(model.dims),
        "counts": {"vertices": model.n_vertices, "triangles": model.n_triangles},
        "arrays": {},
    }
    for name, dtype in _ARRAY_SPECS:
        arr = np.ascontiguousarray(getattr(model, name), dtype=dtype)
        ext = "i32" if dtype == np.int32 else "f32"
        fname = f"{name}.{ext}"
        arr.astype(arr.dtype.newbyteorder("<")).tofile(path / fname)
        manifest["arrays"][name] = {"file": fname, "shape": list(arr.shape),
                                    "dtype": f"<{np.dtype(dtype).str[1:]}"}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_model(path: str | Path) -> MorphableModel:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    arrays = {}
    for name, info in manifest["arrays"].items():
        raw = np.fromfile(path / info["file"], dtype=np.dtype(info["dtype"]))
        arr = raw.reshape(info["shape"]).astype(
            np.int32 if name == "triangles" else np.float64)
        arr.setflags(write=False)
        arrays[name] = arr
    return MorphableModel(seed=manifest["seed"], n_subdiv=manifest["n_subdiv"], **arrays)
