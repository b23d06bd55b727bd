"""Synthetic face-video clips with oracle parameters, plus an
optimization-based parameter fitter.

Clips render the toy head over a smooth procedural background along seeded
pose/expression trajectories, recording the exact generating parameters.
The fitter recovers parameters by gradient-based analysis-by-synthesis:
a smooth soft-visibility photometric term (masked pixels excluded), an
optional 2D landmark term on the 16 tracked feature vertices, and a small
coefficient prior. Landmark observations are supplied by the caller; on
synthetic data the oracle projections stand in for a landmark detector.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import FitError, GenerationError, ParameterError
from .facemodel import (CameraSpec, FaceParams, MorphableModel, build_shape,
                        build_texture, landmark_vertex_indices, pose_transform)
from .pngio import load_image_u8, load_mask, save_image_u8, save_mask
from .uvgeom import bilinear_sample, project, render_vertex_colors

PHOTO_CONVERGED = 0.08


@dataclass(frozen=True)
class ClipSpec:
    n_frames: int = 13
    seed: int = 0
    motion: str = "smooth"              # smooth | sweep | static
    yaw_deg: float = 40.0
    pitch_deg: float = 12.0
    roll_deg: float = 8.0
    expr_scale: float = 0.8
    id_scale: float = 1.2
    tex_scale: float = 1.2
    detail_scale: float = 0.12          # appearance outside the texture basis
    distance: float = 8.0
    wobble: float = 0.25
    min_face_fraction: float = 0.2

    def __post_init__(self):
        if self.n_frames < 5:
            raise ParameterError("clips need n_frames >= 5")
        if self.motion not in ("smooth", "sweep", "static"):
            raise ParameterError(f"unknown motion {self.motion!r}")


@dataclass
class ClipData:
    frames: list                        # n x [H,W,3] float32 ground truth
    valids: list                        # n x [H,W,1] face coverage
    params: list                        # n x FaceParams (oracle)
    landmarks: list                     # n x [16,2] oracle pixel positions
    background: np.ndarray
    detail: np.ndarray | None = None    # [V,3] out-of-basis appearance


@dataclass
class FitResult:
    params: list
    photometric: list
    landmark: list
    converged: bool
    loss_history: list = field(default_factory=list)   # accepted losses per frame


def _smooth_curve(rng: np.random.Generator, n: int, amplitude: float) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)
    f1, f2 = rng.uniform(0.4, 0.9), rng.uniform(1.0, 1.8)
    p1, p2 = rng.uniform(0, 2 * np.pi, size=2)
    c = 0.7 * np.sin(2 * np.pi * f1 * t + p1) + 0.3 * np.sin(2 * np.pi * f2 * t + p2)
    return amplitude * c


def smooth_background(seed: int, size: tuple[int, int]) -> np.ndarray:
    """Low-frequency value-noise background in [0.15, 0.85]."""
    rng = np.random.default_rng(seed ^ 0x5EED)
    grid = rng.uniform(0.15, 0.85, size=(6, 6, 3))
    h, w = size
    ys, xs = np.meshgrid(np.linspace(0, 5, h), np.linspace(0, 5, w), indexing="ij")
    return bilinear_sample(grid, xs, ys).astype(np.float32)


def texture_detail(model: MorphableModel, seed: int, scale: float) -> np.ndarray:
    """Per-vertex mid-frequency appearance detail that the linear texture
    basis cannot represent (skin markings at desk scale). Fixed per clip,
    so reference frames reveal it but the synthesized texture never does."""
    if scale == 0.0:
        return np.zeros((model.n_vertices, 3))
    rng = np.random.default_rng(seed ^ 0xDE7A11)
    u, v = model.uv_coords[:, 0], model.uv_coords[:, 1]
    out = np.zeros((model.n_vertices, 3))
    for _ in range(6):
        fu, fv = rng.uniform(5.0, 12.0, size=2)
        pu, pv = rng.uniform(0, 2 * np.pi, size=2)
        wave = np.cos(2 * np.pi * fu * u + pu) * np.cos(2 * np.pi * fv * v + pv)
        out += rng.normal(0, 1, size=3) * wave[:, None]
    out *= scale / max(np.abs(out).max(), 1e-9)
    return out


def _trajectories(spec: ClipSpec, rng: np.random.Generator):
    n = spec.n_frames
    if spec.motion == "static":
        yaw = np.full(n, rng.uniform(-0.3, 0.3) * np.deg2rad(spec.yaw_deg))
        pitch = np.full(n, rng.uniform(-0.3, 0.3) * np.deg2rad(spec.pitch_deg))
        roll = np.full(n, rng.uniform(-0.3, 0.3) * np.deg2rad(spec.roll_deg))
        tx = np.zeros(n)
        ty = np.zeros(n)
    elif spec.motion == "sweep":
        yaw = np.linspace(-np.deg2rad(spec.yaw_deg), np.deg2rad(spec.yaw_deg), n)
        pitch = _smooth_curve(rng, n, np.deg2rad(spec.pitch_deg) * 0.5)
        roll = _smooth_curve(rng, n, np.deg2rad(spec.roll_deg) * 0.5)
        tx = _smooth_curve(rng, n, spec.wobble * 0.5)
        ty = _smooth_curve(rng, n, spec.wobble * 0.5)
    else:
        yaw = _smooth_curve(rng, n, np.deg2rad(spec.yaw_deg))
        pitch = _smooth_curve(rng, n, np.deg2rad(spec.pitch_deg))
        roll = _smooth_curve(rng, n, np.deg2rad(spec.roll_deg))
        tx = _smooth_curve(rng, n, spec.wobble)
        ty = _smooth_curve(rng, n, spec.wobble)
    return yaw, pitch, roll, tx, ty


def generate_clip(model: MorphableModel, spec: ClipSpec,
                  camera: CameraSpec) -> ClipData:
    """Render the clip and record oracle parameters. Deterministic in
    spec.seed; re-rendering from the recorded parameters reproduces the
    frames bitwise."""
    rng = np.random.default_rng(spec.seed)
    d_id, d_exp, d_tex = model.dims
    alpha = rng.normal(0.0, spec.id_scale, d_id)
    delta = rng.normal(0.0, spec.tex_scale, d_tex)
    beta0 = rng.normal(0.0, 0.3 * spec.expr_scale, d_exp)
    beta_curves = np.stack([_smooth_curve(rng, spec.n_frames, spec.expr_scale)
                            for _ in range(d_exp)], axis=1)
    if spec.motion == "static":
        beta_curves = np.zeros_like(beta_curves)
    yaw, pitch, roll, tx, ty = _trajectories(spec, rng)

    background = smooth_background(spec.seed, camera.image_size)
    lm_idx = landmark_vertex_indices(model)
    detail = texture_detail(model, spec.seed, spec.detail_scale)
    texture = build_texture(model, delta) + detail

    frames, valids, params_list, landmarks = [], [], [], []
    for i in range(spec.n_frames):
        params = FaceParams(
            alpha=alpha.copy(), beta=beta0 + beta_curves[i], delta=delta.copy(),
            rot=np.array([yaw[i], pitch[i], roll[i]]),
            trans=np.array([tx[i], ty[i], spec.distance]),
        )
        frame, valid, lm = render_clip_frame(model, params, camera, background,
                                             texture=texture, lm_idx=lm_idx)
        if valid.mean() <= spec.min_face_fraction:
            raise GenerationError(
                f"frame {i}: face covers {valid.mean():.3f} <= "
                f"{spec.min_face_fraction} of the image")
        frames.append(frame)
        valids.append(valid)
        params_list.append(params)
        landmarks.append(lm)
    return ClipData(frames=frames, valids=valids, params=params_list,
                    landmarks=landmarks, background=background, detail=detail)


def render_clip_frame(model: MorphableModel, params: FaceParams,
                      camera: CameraSpec, background: np.ndarray,
                      texture: np.ndarray | None = None,
                      lm_idx: np.ndarray | None = None):
    """Render one frame from parameters over a background. Returns
    (frame [H,W,3], face coverage [H,W,1], landmarks [16,2])."""
    if texture is None:
        texture = build_texture(model, params.delta)
    if lm_idx is None:
        lm_idx = landmark_vertex_indices(model)
    posed = pose_transform(build_shape(model, params.alpha, params.beta),
                           params.rot, params.trans)
    face, valid = render_vertex_colors(model, posed, texture, camera)
    frame = (valid * face + (1.0 - valid) * background).astype(np.float32)
    lm = project(posed[lm_idx], camera).points2d.astype(np.float64)
    return frame, valid, lm


def oracle_landmarks(model: MorphableModel, params: FaceParams,
                     camera: CameraSpec) -> np.ndarray:
    posed = pose_transform(build_shape(model, params.alpha, params.beta),
                           params.rot, params.trans)
    return project(posed[landmark_vertex_indices(model)], camera).points2d


def save_clip(path: str | Path, clip: ClipData,
              masks: list[np.ndarray] | None = None) -> None:
    """Clip directory layout: frames/%04d.png, masks/%04d.png,
    params/%04d.json, manifest.json."""
    path = Path(path)
    (path / "frames").mkdir(parents=True, exist_ok=True)
    (path / "params").mkdir(exist_ok=True)
    if masks is not None:
        (path / "masks").mkdir(exist_ok=True)
    files = {"frames": [], "masks": [], "params": []}
    for i, frame in enumerate(clip.frames):
        save_image_u8(path / "frames" / f"{i:04d}.png", frame)
        files["frames"].append(f"frames/{i:04d}.png")
        doc = clip.params[i].to_dict()
        doc["landmarks2d"] = clip.landmarks[i].tolist()
        (path / "params" / f"{i:04d}.json").write_text(json.dumps(doc, indent=2))
        files["params"].append(f"params/{i:04d}.json")
        if masks is not None:
            save_mask(path / "masks" / f"{i:04d}.png", masks[i])
            files["masks"].append(f"masks/{i:04d}.png")
    manifest = {"n_frames": len(clip.frames),
                "image_size": list(clip.frames[0].shape[:2]),
                "files": files}
    if clip.detail is not None:
        np.ascontiguousarray(clip.detail, dtype="<f4").tofile(path / "detail.f32")
        manifest["detail"] = {"file": "detail.f32",
                              "shape": list(clip.detail.shape)}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_clip(path: str | Path) -> dict:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    out = {"frames": [], "masks": [], "params": [], "landmarks": [],
           "detail": None, "manifest": manifest}
    for rel in manifest["files"]["frames"]:
        out["frames"].append(load_image_u8(path / rel))
    for rel in manifest["files"]["masks"]:
        out["masks"].append(load_mask(path / rel))
    for rel in manifest["files"]["params"]:
        doc = json.loads((path / rel).read_text())
        lm = doc.pop("landmarks2d", None)
        out["params"].append(FaceParams.from_dict(doc))
        out["landmarks"].append(np.asarray(lm) if lm is not None else None)
    if "detail" in manifest:
        info = manifest["detail"]
        out["detail"] = np.fromfile(path / info["file"],
                                    dtype="<f4").reshape(info["shape"]).astype(np.float64)
    return out


# ---------------------------------------------------------------------------
# analysis-by-synthesis fitting
# ---------------------------------------------------------------------------

def _euler_t(rot: torch.Tensor) -> torch.Tensor:
    yaw, pitch, roll = rot[0], rot[1], rot[2]
    one = torch.ones((), dtype=rot.dtype)
    zero = torch.zeros((), dtype=rot.dtype)
    rx = torch.stack([
        torch.stack([one, zero, zero]),
        torch.stack([zero, torch.cos(pitch), -torch.sin(pitch)]),
        torch.stack([zero, torch.sin(pitch), torch.cos(pitch)])])
    ry = torch.stack([
        torch.stack([torch.cos(yaw), zero, torch.sin(yaw)]),
        torch.stack([zero, one, zero]),
        torch.stack([-torch.sin(yaw), zero, torch.cos(yaw)])])
    rz = torch.stack([
        torch.stack([torch.cos(roll), -torch.sin(roll), zero]),
        torch.stack([torch.sin(roll), torch.cos(roll), zero]),
        torch.stack([zero, zero, one])])
    return rz @ ry @ rx


def _bilinear_t(img: torch.Tensor, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Differentiable-in-position bilinear lookup on an [H,W,C] tensor."""
    h, w = img.shape[:2]
    x0 = x.floor().clamp(0, w - 2)
    y0 = y.floor().clamp(0, h - 2)
    dx = (x - x0).clamp(0, 1)[:, None]
    dy = (y - y0).clamp(0, 1)[:, None]
    x0l, y0l = x0.long(), y0.long()
    v00 = img[y0l, x0l]
    v01 = img[y0l, x0l + 1]
    v10 = img[y0l + 1, x0l]
    v11 = img[y0l + 1, x0l + 1]
    return (1 - dy) * ((1 - dx) * v00 + dx * v01) + dy * ((1 - dx) * v10 + dx * v11)


class _FitModel:
    """Cached float64 torch views of the morphable model."""

    def __init__(self, model: MorphableModel):
        def t(arr):
            return torch.from_numpy(np.array(arr, dtype=np.float64))

        self.mean_shape = t(model.mean_shape)
        self.mean_texture = t(model.mean_texture)
        self.basis_id = t(model.basis_id)
        self.basis_exp = t(model.basis_exp)
        self.basis_tex = t(model.basis_tex)
        self.triangles = torch.from_numpy(np.array(model.triangles)).long()
        self.lm_idx = torch.from_numpy(landmark_vertex_indices(model)).long()

    def shape(self, alpha, beta):
        flat = (self.mean_shape.reshape(-1) + self.basis_id @ alpha
                + self.basis_exp @ beta)
        return flat.reshape(-1, 3)

    def texture(self, delta):
        flat = self.mean_texture.reshape(-1) + self.basis_tex @ delta
        return flat.reshape(-1, 3)

    def vertex_normals(self, posed):
        t = self.triangles
        p0, p1, p2 = posed[t[:, 0]], posed[t[:, 1]], posed[t[:, 2]]
        fn = torch.cross(p1 - p0, p2 - p0, dim=1)
        vn = torch.zeros_like(posed)
        for k in range(3):
            vn = vn.index_add(0, t[:, k], fn)
        return vn / vn.norm(dim=1, keepdim=True).clamp_min(1e-12)


def _frame_loss(fm: _FitModel, camera: CameraSpec, image_t: torch.Tensor,
                mask_t: torch.Tensor | None, lm_obs: torch.Tensor | None,
                rot, trans, alpha, beta, delta,
                lm_weight: float = 150.0, reg_weight: float = 1e-3,
                soft_vis_tau: float = 0.15):
    h, w = camera.image_size
    posed = fm.shape(alpha, beta) @ _euler_t(rot).T + trans
    z = posed[:, 2].clamp_min(1e-3)
    x = camera.focal * posed[:, 0] / z + camera.principal_point[0]
    y = camera.focal * posed[:, 1] / z + camera.principal_point[1]

    normals = fm.vertex_normals(posed)
    view = posed / posed.norm(dim=1, keepdim=True).clamp_min(1e-12)
    facing = -(normals * view).sum(dim=1)
    w_vis = torch.sigmoid(facing / soft_vis_tau)
    with torch.no_grad():
        w_in = ((x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)).double()
        if mask_t is not None:
            m = _bilinear_t(mask_t, x, y)[:, 0]
            w_in = w_in * (1.0 - m).clamp(0, 1)
    weight = w_vis * w_in

    sampled = _bilinear_t(image_t, x, y)
    tex = fm.texture(delta).clamp(0.0, 1.0)
    photo = ((sampled - tex).abs().mean(dim=1) * weight).sum() / weight.sum().clamp_min(1e-9)

    loss = photo
    lm_res = torch.zeros((), dtype=torch.float64)
    if lm_obs is not None:
        dx = (x[fm.lm_idx] - lm_obs[:, 0]) / w
        dy = (y[fm.lm_idx] - lm_obs[:, 1]) / w
        lm_res = (dx * dx + dy * dy).mean()
        loss = loss + lm_weight * lm_res
    reg = (alpha * alpha).mean() + (beta * beta).mean() + (delta * delta).mean()
    loss = loss + reg_weight * reg
    return loss, photo, lm_res


# relative Adam step sizes: radians move an order of magnitude more image
# content per unit than the unit-norm basis coefficients do
_LR_SCALES = (0.25, 0.5, 1.0, 1.0, 1.0)    # rot, trans, alpha, beta, delta


def _accepted_descent(pvars, loss_fn, steps, lr, frame_idx):
    """Adam with rollback: steps that raise the loss are undone and the rate
    decays, so the accepted-loss sequence is non-increasing. Returns
    (best_state, best_aux, accepted_losses)."""
    def make_opt(base):
        return torch.optim.Adam(
            [{"params": [p], "lr": base * s} for p, s in zip(pvars, _LR_SCALES)])

    cur_lr = lr
    opt = make_opt(cur_lr)
    best_loss = np.inf
    best_state = [p.detach().clone() for p in pvars]
    best_aux = None
    accepted = []
    for _ in range(steps):
        loss, *aux = loss_fn()
        if not torch.isfinite(loss):
            raise FitError(f"fitting diverged on frame {frame_idx}")
        loss_val = loss.detach().item()
        if loss_val <= best_loss + 1e-12:
            best_loss = loss_val
            best_aux = [a.detach().item() for a in aux]
            best_state = [p.detach().clone() for p in pvars]
            accepted.append(loss_val)
            opt.zero_grad()
            loss.backward()
            opt.step()
        else:
            with torch.no_grad():
                for p, s in zip(pvars, best_state):
                    p.copy_(s)
            cur_lr *= 0.5
            if cur_lr < 1e-6:
                break
            opt = make_opt(cur_lr)
    with torch.no_grad():
        for p, s in zip(pvars, best_state):
            p.copy_(s)
    return best_state, best_aux, accepted


def _rigid_landmark_loss(fm: _FitModel, camera: CameraSpec,
                         lm_obs: torch.Tensor, rot, trans, alpha, beta):
    """Landmark reprojection error with shape frozen: pose from 16 point
    correspondences is strongly overdetermined and gauge-free."""
    h, w = camera.image_size
    posed = fm.shape(alpha.detach(), beta.detach()) @ _euler_t(rot).T + trans
    pts = posed[fm.lm_idx]
    z = pts[:, 2].clamp_min(1e-3)
    x = camera.focal * pts[:, 0] / z + camera.principal_point[0]
    y = camera.focal * pts[:, 1] / z + camera.principal_point[1]
    dx = (x - lm_obs[:, 0]) / w
    dy = (y - lm_obs[:, 1]) / w
    lm = (dx * dx + dy * dy).mean()
    return lm, lm


def fit_params(frames: list[np.ndarray], masks: list[np.ndarray] | None,
               model: MorphableModel, camera: CameraSpec, init: FaceParams,
               landmarks: list[np.ndarray] | None = None, steps: int = 150,
               lr: float = 0.04) -> FitResult:
    """Fit per-frame parameters by accepted-step gradient descent.

    When landmark observations are available, a landmark-only warmup (a
    smooth, strongly determined subproblem) pulls pose and shape into the
    basin first; the joint photometric + landmark objective then refines.
    Each frame warm-starts from the previous frame's solution.
    """
    fm = _FitModel(model)
    current = init.copy()
    out_params, photo_res, lm_res_list, histories = [], [], [], []
    for i, frame in enumerate(frames):
        image_t = torch.from_numpy(np.asarray(frame, dtype=np.float64))
        mask_t = None
        if masks is not None and masks[i] is not None:
            mask_t = torch.from_numpy(np.asarray(masks[i], dtype=np.float64))
        lm_obs = None
        if landmarks is not None and landmarks[i] is not None:
            lm_obs = torch.from_numpy(np.asarray(landmarks[i], dtype=np.float64))

        rot = torch.tensor(current.rot, dtype=torch.float64, requires_grad=True)
        trans = torch.tensor(current.trans, dtype=torch.float64, requires_grad=True)
        alpha = torch.tensor(current.alpha, dtype=torch.float64, requires_grad=True)
        beta = torch.tensor(current.beta, dtype=torch.float64, requires_grad=True)
        delta = torch.tensor(current.delta, dtype=torch.float64, requires_grad=True)
        pvars = [rot, trans, alpha, beta, delta]

        if lm_obs is not None:
            _accepted_descent(
                pvars[:2],
                lambda: _rigid_landmark_loss(fm, camera, lm_obs,
                                             rot, trans, alpha, beta),
                2 * steps, lr, i)

        best_state, best_aux, accepted = _accepted_descent(
            pvars,
            lambda: _frame_loss(fm, camera, image_t, mask_t, lm_obs,
                                rot, trans, alpha, beta, delta),
            steps, lr, i)

        current = FaceParams(alpha=best_state[2].numpy(), beta=best_state[3].numpy(),
                             delta=best_state[4].numpy(), gamma=current.gamma.copy(),
                             rot=best_state[0].numpy(), trans=best_state[1].numpy())
        out_params.append(current.copy())
        photo_res.append(best_aux[0])
        lm_res_list.append(best_aux[1])
        histories.append(accepted)
    converged = all(np.isfinite(photo_res)) and max(photo_res) < PHOTO_CONVERGED
    return FitResult(params=out_params, photometric=photo_res,
                     landmark=lm_res_list, converged=converged,
                     loss_history=histories)
