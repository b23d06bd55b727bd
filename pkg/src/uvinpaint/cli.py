"""Operator command line.

    uvinpaint <command> [--config FILE] [--key value ...]

Commands: synth, fit, stage1, stage2, train, eval, viz-attn, bench-attn.
Options come from RunConfig; a plain key=value config file sets defaults and
explicit flags win. Every command echoes its full resolved configuration
into the output manifest.json.

Exit codes: 0 success, 2 usage/parameter, 3 I/O, 4 numeric, 5 generation.
"""

from __future__ import annotations

import ast
import json
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from . import __version__, experiments, maskgen, metrics, pipeline, synthdata
from .attention import argmax_viz
from .errors import (FitError, GenerationError, GeometryError, NumericError,
                     ParameterError)
from .facemodel import FaceParams, build_toy_model, default_camera
from .fvrnet import FVRNet, FeatureExtractorSpec, build_feature_extractor, composite
from .mucnet import MUCNet
from .nnops import load_checkpoint, save_checkpoint
from .pngio import load_image_u8, load_rgb16, save_image_u8, save_rgb16

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_GENERATION = 5

COMMANDS = ("synth", "fit", "stage1", "stage2", "train", "eval",
            "viz-attn", "bench-attn")

VIZ_COLORS = [(1.0, 0.0, 0.0), (0.0, 0.8, 0.0), (0.0, 0.2, 1.0), (1.0, 0.9, 0.0)]


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    out: str = ""
    # geometry / data
    image_size: int = 224
    uv_size: int = 256
    model_seed: int = 0
    n_subdiv: int = 3
    dims: tuple = (8, 4, 8)
    distance: float = 8.0
    # clip synthesis
    n_frames: int = 13
    clip_motion: str = "smooth"
    yaw_deg: float = 40.0
    # masks
    mask_kind: str = "rect"
    mask_motion: str = "static"
    coverage: tuple = (0.08, 0.20)
    # attention / networks
    offsets: tuple = (-2, -1, 1, 2)
    window_s: int = 3
    base_width: int = 32
    # training
    stage: int = 1
    steps: int = 2000
    lr: float = 1e-4
    # inputs
    clip: str = ""
    clips: str = ""
    checkpoint: str = ""
    stage1_dir: str = ""
    params_dir: str = ""
    pred: str = ""
    gt: str = ""
    masks: str = ""
    frame: int = 0


def _parse_value(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def load_config_file(path: str | Path) -> dict:
    """Plain key = value lines; blank lines and # comments ignored."""
    out = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"bad config line: {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = _parse_value(val)
    return out


def parse_args(argv: list[str]) -> tuple[str, RunConfig]:
    if not argv or argv[0] in ("-h", "--help"):
        print(__doc__)
        raise SystemExit(EXIT_OK)
    command = argv[0]
    if command not in COMMANDS:
        raise ParameterError(
            f"unknown command {command!r}; expected one of {', '.join(COMMANDS)}")
    known = {f.name for f in fields(RunConfig)}
    overrides: dict = {}
    file_values: dict = {}
    i = 1
    while i < len(argv):
        flag = argv[i]
        if not flag.startswith("--"):
            raise ParameterError(f"expected --flag, got {flag!r}")
        name = flag[2:].replace("-", "_")
        if i + 1 >= len(argv):
            raise ParameterError(f"flag {flag} needs a value")
        value = argv[i + 1]
        i += 2
        if name == "config":
            file_values = load_config_file(value)
            continue
        if name not in known:
            raise ParameterError(f"unknown option --{flag[2:]}")
        overrides[name] = _parse_value(value)
    merged = {**file_values, **overrides}
    unknown = set(merged) - known
    if unknown:
        raise ParameterError(f"unknown config keys: {sorted(unknown)}")
    return command, RunConfig(**merged)


def _require(config: RunConfig, *names: str):
    for name in names:
        if not getattr(config, name):
            raise ParameterError(
                f"command needs --{name.replace('_', '-')}; pass it on the "
                "command line or in --config")


def _out_dir(config: RunConfig) -> Path:
    _require(config, "out")
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, config: RunConfig, outputs: dict):
    doc = {}
    existing = out / "manifest.json"
    if existing.exists():
        doc = json.loads(existing.read_text())
    doc.update({"tool": f"uvinpaint {__version__}", "command": command,
                "config": asdict(config), "outputs": outputs})
    (out / "manifest.json").write_text(json.dumps(doc, indent=2))


def _setup(config: RunConfig):
    torch.set_num_threads(max(1, config.threads))
    model = build_toy_model(config.model_seed, config.n_subdiv,
                            tuple(config.dims))
    camera = default_camera((config.image_size, config.image_size))
    return model, camera


def _load_params_dir(path: Path, n: int) -> list[FaceParams]:
    out = []
    for i in range(n):
        doc = json.loads((path / f"{i:04d}.json").read_text())
        doc.pop("landmarks2d", None)
        out.append(FaceParams.from_dict(doc))
    return out


def cmd_synth(config: RunConfig) -> int:
    out = _out_dir(config)
    if config.n_frames < 2:
        raise ParameterError("sequence length >= 2 is required for references "
                             "(clips are generated with >= 5 frames)")
    model, camera = _setup(config)
    clip = synthdata.generate_clip(
        model, synthdata.ClipSpec(n_frames=config.n_frames, seed=config.seed,
                                  motion=config.clip_motion,
                                  yaw_deg=config.yaw_deg,
                                  distance=config.distance), camera)
    masks = maskgen.make_mask_sequence(maskgen.MaskSpec(
        kind=config.mask_kind, motion=config.mask_motion,
        coverage_range=tuple(config.coverage), seed=config.seed,
        n_frames=config.n_frames,
        image_size=(config.image_size, config.image_size)))
    synthdata.save_clip(out, clip, masks)
    _write_manifest(out, "synth", config,
                    {"n_frames": config.n_frames, "clip_dir": str(out)})
    print(f"wrote {config.n_frames}-frame clip to {out}")
    return EXIT_OK


def cmd_fit(config: RunConfig) -> int:
    _require(config, "clip")
    out = _out_dir(config)
    model, camera = _setup(config)
    clip = synthdata.load_clip(config.clip)
    frames = [f * (1.0 - m) for f, m in zip(clip["frames"], clip["masks"])] \
        if clip["masks"] else clip["frames"]
    init = FaceParams(alpha=np.zeros(model.dims[0]), beta=np.zeros(model.dims[1]),
                      delta=np.zeros(model.dims[2]),
                      trans=np.array([0.0, 0.0, config.distance]))
    result = synthdata.fit_params(frames, clip["masks"] or None, model, camera,
                                  init, landmarks=clip["landmarks"])
    (out / "params_fitted").mkdir(exist_ok=True)
    files = []
    for i, p in enumerate(result.params):
        f = out / "params_fitted" / f"{i:04d}.json"
        f.write_text(json.dumps(p.to_dict(), indent=2))
        files.append(str(f.relative_to(out)))
    residuals = {"photometric": result.photometric, "landmark": result.landmark,
                 "converged": result.converged}
    (out / "residuals.json").write_text(json.dumps(residuals, indent=2))
    _write_manifest(out, "fit", config, {"params": files,
                                         "converged": result.converged})
    print(f"fit {len(result.params)} frames, converged={result.converged}, "
          f"median photometric={np.median(result.photometric):.4f}")
    return EXIT_OK


def _load_clip_for_stage(config: RunConfig, model):
    clip = synthdata.load_clip(config.clip)
    n = len(clip["frames"])
    if config.params_dir:
        params = _load_params_dir(Path(config.params_dir), n)
    else:
        params = clip["params"]
    if not clip["masks"]:
        raise ParameterError("clip has no masks/ directory")
    return clip, params


def cmd_stage1(config: RunConfig) -> int:
    _require(config, "clip", "checkpoint")
    out = _out_dir(config)
    model, camera = _setup(config)
    clip, params = _load_clip_for_stage(config, model)
    uv_size = (config.uv_size, config.uv_size)
    tensors = pipeline.build_stage1_clip(model, camera, clip["frames"],
                                         clip["masks"], params, uv_size,
                                         offsets=tuple(config.offsets))
    net = MUCNet(base_width=config.base_width, window_s=config.window_s,
                 seed=config.seed)
    load_checkpoint(config.checkpoint, net)
    net.eval()
    (out / "uv_out").mkdir(exist_ok=True)
    (out / "renders").mkdir(exist_ok=True)
    with torch.no_grad():
        u_out, _ = pipeline.stage1_clip_outputs(net, tensors)
    outputs = {"uv_out": [], "renders": []}
    for i in range(len(clip["frames"])):
        uv_np = u_out[i].permute(1, 2, 0).numpy()
        save_rgb16(out / "uv_out" / f"{i:04d}.png", uv_np)
        render = tensors.transports[i].apply(u_out[i]).permute(1, 2, 0).numpy()
        save_image_u8(out / "renders" / f"{i:04d}.png", render)
        outputs["uv_out"].append(f"uv_out/{i:04d}.png")
        outputs["renders"].append(f"renders/{i:04d}.png")
    _write_manifest(out, "stage1", config, outputs)
    print(f"wrote completed UV maps and renders for {len(clip['frames'])} "
          f"frames to {out}")
    return EXIT_OK


def cmd_stage2(config: RunConfig) -> int:
    _require(config, "clip", "checkpoint")
    out = _out_dir(config)
    model, camera = _setup(config)
    clip, params = _load_clip_for_stage(config, model)
    uv_size = (config.uv_size, config.uv_size)
    uv_maps = None
    if config.stage1_dir:
        uv_maps = [load_rgb16(Path(config.stage1_dir) / "uv_out" / f"{i:04d}.png")
                   for i in range(len(clip["frames"]))]
    tensors = pipeline.build_stage2_clip(model, camera, clip["frames"],
                                         clip["masks"], params, uv_maps,
                                         uv_size, offsets=tuple(config.offsets))
    net = FVRNet(base_width=config.base_width, window_s=config.window_s,
                 seed=config.seed)
    load_checkpoint(config.checkpoint, net)
    net.eval()
    with torch.no_grad():
        i_out, _ = net.complete_clip(tensors.stacks, tensors.missing,
                                     tensors.target_indices,
                                     tensors.reference_indices)
    (out / "i_out").mkdir(exist_ok=True)
    (out / "i_comp").mkdir(exist_ok=True)
    outputs = {"i_out": [], "i_comp": []}
    for i in range(len(clip["frames"])):
        pred = i_out[i].permute(1, 2, 0).numpy()
        comp = composite(pred, tensors.image_frames[i].i_in,
                         tensors.image_frames[i].i_missing)
        save_image_u8(out / "i_out" / f"{i:04d}.png", pred)
        save_image_u8(out / "i_comp" / f"{i:04d}.png", comp)
        outputs["i_out"].append(f"i_out/{i:04d}.png")
        outputs["i_comp"].append(f"i_comp/{i:04d}.png")
    _write_manifest(out, "stage2", config, outputs)
    print(f"wrote refined frames and composites to {out}")
    return EXIT_OK


def cmd_train(config: RunConfig) -> int:
    out = _out_dir(config)
    model, camera = _setup(config)
    clip_dirs = [d for d in (config.clips.split(",") if config.clips
                             else [config.clip]) if d]
    if not clip_dirs:
        raise ParameterError("training needs --clip or --clips dir1,dir2,...")
    uv_size = (config.uv_size, config.uv_size)
    torch.manual_seed(config.seed)
    if config.stage == 1:
        clips = []
        for d in clip_dirs:
            clip = synthdata.load_clip(d)
            clips.append(pipeline.build_stage1_clip(
                model, camera, clip["frames"], clip["masks"], clip["params"],
                uv_size, offsets=tuple(config.offsets)))
        net = MUCNet(base_width=config.base_width, window_s=config.window_s,
                     seed=config.seed)
        history = pipeline.train_stage1(net, clips, steps=config.steps,
                                        lr=config.lr)
    elif config.stage == 2:
        clips = []
        for d in clip_dirs:
            clip = synthdata.load_clip(d)
            clips.append(pipeline.build_stage2_clip(
                model, camera, clip["frames"], clip["masks"], clip["params"],
                None, uv_size, offsets=tuple(config.offsets)))
        net = FVRNet(base_width=config.base_width, window_s=config.window_s,
                     seed=config.seed)
        extractor = build_feature_extractor(FeatureExtractorSpec(seed=config.seed))
        history = pipeline.train_stage2(net, clips, extractor,
                                        steps=config.steps, lr=config.lr)
    else:
        raise ParameterError("--stage must be 1 or 2")
    ckpt = out / "checkpoint"
    save_checkpoint(ckpt, net, seed=config.seed, step=config.steps,
                    meta={"stage": config.stage, "base_width": config.base_width,
                          "window_s": config.window_s})
    csv = "step,total\n" + "\n".join(f"{i},{v:.6f}" for i, v in enumerate(history))
    (out / "loss.csv").write_text(csv + "\n")
    _write_manifest(out, "train", config,
                    {"checkpoint": "checkpoint", "loss_csv": "loss.csv",
                     "final_loss": history[-1]})
    print(f"trained stage {config.stage} for {config.steps} steps; "
          f"final loss {history[-1]:.4f}")
    return EXIT_OK


def _load_frame_dir(path: Path) -> list[np.ndarray]:
    files = sorted(path.glob("*.png"))
    if not files:
        raise ParameterError(f"no PNG frames under {path}")
    return [load_image_u8(f) for f in files]


def cmd_eval(config: RunConfig) -> int:
    _require(config, "pred", "gt")
    out = _out_dir(config)
    torch.set_num_threads(max(1, config.threads))
    pred = _load_frame_dir(Path(config.pred))
    gt = _load_frame_dir(Path(config.gt))
    masks = None
    if config.masks:
        from .pngio import load_mask
        masks = [load_mask(f) for f in sorted(Path(config.masks).glob("*.png"))]
    report = metrics.evaluate_clip(pred, gt, masks,
                                   metadata={"pred": config.pred,
                                             "gt": config.gt})
    (out / "report.json").write_text(report.to_json())
    (out / "report.csv").write_text(report.to_csv())
    _write_manifest(out, "eval", config, {"report": "report.json"})
    print(report.pretty())
    return EXIT_OK


def cmd_viz_attn(config: RunConfig) -> int:
    _require(config, "clip")
    out = _out_dir(config)
    model, camera = _setup(config)
    clip, params = _load_clip_for_stage(config, model)
    uv_size = (config.uv_size, config.uv_size)
    tensors = pipeline.build_stage1_clip(model, camera, clip["frames"],
                                         clip["masks"], params, uv_size,
                                         offsets=tuple(config.offsets))
    net = MUCNet(base_width=config.base_width, window_s=config.window_s,
                 seed=config.seed)
    if config.checkpoint:
        load_checkpoint(config.checkpoint, net)
    net.eval()
    t = config.frame
    with torch.no_grad():
        _, traces = net.complete_clip(tensors.stacks, tensors.missing,
                                      [t], [tensors.reference_indices[t]])
    trace = traces[0]
    colors = VIZ_COLORS[:trace.n_frames] if trace.n_frames <= len(VIZ_COLORS) \
        else [(i / trace.n_frames, 0.5, 1 - i / trace.n_frames)
              for i in range(trace.n_frames)]
    img, responses = argmax_viz(trace, colors)
    save_image_u8(out / "attn_argmax.png", img)
    outputs = {"argmax": "attn_argmax.png", "responses": []}
    mass = responses.reshape(trace.n_frames, -1).sum(axis=1)
    total = float(mass.sum()) or 1.0
    for i in range(trace.n_frames):
        r = responses[i] / max(responses[i].max(), 1e-9)
        save_image_u8(out / f"response_{i}.png", r[:, :, None])
        outputs["responses"].append(f"response_{i}.png")
    summary = {"reference_indices": tensors.reference_indices[t],
               "mass_fraction": (mass / total).tolist()}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    outputs["summary"] = "summary.json"
    _write_manifest(out, "viz-attn", config, outputs)
    print(f"wrote attention maps for frame {t} to {out}")
    return EXIT_OK


def cmd_bench_attn(config: RunConfig) -> int:
    out = _out_dir(config)
    torch.set_num_threads(max(1, config.threads))
    rows = experiments.bench_attention(channels=64, n=len(config.offsets),
                                       s=config.window_s, seed=config.seed)
    lines = ["h,w,n,s,channels,mac_frame_wise,mac_non_local,mac_ratio,"
             "time_frame_wise_s,time_non_local_s,time_ratio"]
    for r in rows:
        lines.append(f"{r.h_f},{r.w_f},{r.n},{r.s},{r.channels},"
                     f"{r.mac_frame_wise},{r.mac_non_local},{r.mac_ratio:.3f},"
                     f"{r.time_frame_wise_s:.6f},{r.time_non_local_s:.6f},"
                     f"{r.time_ratio:.3f}")
    (out / "bench.csv").write_text("\n".join(lines) + "\n")
    _write_manifest(out, "bench-attn", config, {"csv": "bench.csv"})
    for line in lines:
        print(line)
    return EXIT_OK


_DISPATCH = {
    "synth": cmd_synth, "fit": cmd_fit, "stage1": cmd_stage1,
    "stage2": cmd_stage2, "train": cmd_train, "eval": cmd_eval,
    "viz-attn": cmd_viz_attn, "bench-attn": cmd_bench_attn,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        command, config = parse_args(list(argv))
        np.random.seed(config.seed)
        return _DISPATCH[command](config)
    except SystemExit as e:
        return int(e.code or 0)
    except ParameterError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FitError, NumericError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (GenerationError, GeometryError) as e:
        print(f"generation error: {e}", file=sys.stderr)
        return EXIT_GENERATION
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
