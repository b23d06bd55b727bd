"""Neural building blocks shared by both completion networks.

Gated convolutions (feature path modulated by a sigmoid gate path), a
gated encoder-decoder backbone with a dilated bottleneck, deterministic
seeded initialization, checkpoint I/O, and a finite-difference gradient
audit harness.

Topology: two stride-2 gated downsampling stages (spatial /4), four dilated
gated bottleneck blocks (dilations 1, 2, 4, 8), nearest-upsample + gated
convolution decoding, sigmoid head to [0,1].
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericError, ParameterError


@dataclass(frozen=True)
class GatedConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    dilation: int = 1
    activation: str = "elu"

    def __post_init__(self):
        if self.kernel % 2 != 1:
            raise ParameterError("kernel size must be odd")
        if self.stride not in (1, 2):
            raise ParameterError("stride must be 1 or 2")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ParameterError("channel counts must be >= 1")
        if self.activation not in ("elu", "none"):
            raise ParameterError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class EncoderDecoderSpec:
    """Backbone widths; the stage list is derived from base_width."""

    in_channels: int
    out_channels: int = 3
    base_width: int = 32

    @property
    def feature_channels(self) -> int:
        return 4 * self.base_width


def init_conv_(conv: nn.Conv2d, generator: torch.Generator,
               var_gain: float = 1.0) -> None:
    """Fan-in scaled uniform weights (weight variance = var_gain / fan_in),
    zero biases. Pure function of the generator state, so a fixed seed yields
    bitwise-identical parameters."""
    fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
    bound = np.sqrt(3.0 * var_gain / fan_in)
    with torch.no_grad():
        conv.weight.uniform_(-bound, bound, generator=generator)
        if conv.bias is not None:
            conv.bias.zero_()


# the sigmoid gate sits at 0.5 with zero bias (quartering the variance) and
# ELU halves it again; this gain keeps activation variance roughly constant
# through stacked gated layers
_FEATURE_VAR_GAIN = 8.0
_GATE_VAR_GAIN = 1.0


class GatedConv2d(nn.Module):
    """y = act(conv_f(x)) * sigmoid(conv_g(x)); gates lie strictly in (0,1)."""

    def __init__(self, spec: GatedConvSpec, generator: torch.Generator | None = None):
        super().__init__()
        self.spec = spec
        pad = spec.dilation * (spec.kernel // 2)
        kw = dict(kernel_size=spec.kernel, stride=spec.stride,
                  padding=pad, dilation=spec.dilation)
        self.conv_f = nn.Conv2d(spec.in_channels, spec.out_channels, **kw)
        self.conv_g = nn.Conv2d(spec.in_channels, spec.out_channels, **kw)
        if generator is not None:
            init_conv_(self.conv_f, generator, var_gain=_FEATURE_VAR_GAIN)
            init_conv_(self.conv_g, generator, var_gain=_GATE_VAR_GAIN)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.spec.in_channels:
            raise ParameterError(
                f"expected {self.spec.in_channels} input channels, got {x.shape[1]}")
        f = self.conv_f(x)
        if self.spec.activation == "elu":
            f = F.elu(f)
        return f * torch.sigmoid(self.conv_g(x))


class GatedEncoder(nn.Module):
    """Input stack -> feature map at 1/4 spatial resolution."""

    def __init__(self, spec: EncoderDecoderSpec, generator: torch.Generator | None = None):
        super().__init__()
        w = spec.base_width
        stages = [
            GatedConvSpec(spec.in_channels, w, kernel=5),
            GatedConvSpec(w, 2 * w, stride=2),
            GatedConvSpec(2 * w, 2 * w),
            GatedConvSpec(2 * w, 4 * w, stride=2),
            GatedConvSpec(4 * w, 4 * w),
            GatedConvSpec(4 * w, 4 * w, dilation=1),
            GatedConvSpec(4 * w, 4 * w, dilation=2),
            GatedConvSpec(4 * w, 4 * w, dilation=4),
            GatedConvSpec(4 * w, 4 * w, dilation=8),
        ]
        self.layers = nn.ModuleList(GatedConv2d(s, generator) for s in stages)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[2] % 4 != 0 or x.shape[3] % 4 != 0:
            raise ParameterError("encoder input height/width must be divisible by 4")
        for layer in self.layers:
            x = layer(x)
        return x


class GatedDecoder(nn.Module):
    """Feature map -> output map in [0,1] at 4x spatial resolution."""

    def __init__(self, spec: EncoderDecoderSpec, generator: torch.Generator | None = None):
        super().__init__()
        w = spec.base_width
        self.block1 = GatedConv2d(GatedConvSpec(4 * w, 2 * w), generator)
        self.block2 = GatedConv2d(GatedConvSpec(2 * w, w), generator)
        self.block3 = GatedConv2d(GatedConvSpec(w, w), generator)
        self.head = nn.Conv2d(w, spec.out_channels, kernel_size=3, padding=1)
        if generator is not None:
            init_conv_(self.head, generator)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(z, scale_factor=2, mode="nearest")
        x = self.block1(x)
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.block2(x)
        x = self.block3(x)
        return torch.sigmoid(self.head(x))


def grad_check(fn, inputs: list[torch.Tensor], h: float = 1e-5,
               wrt: list[torch.Tensor] | None = None, proj_seed: int = 0,
               max_coords: int | None = None) -> float:
    """Compare analytic gradients against central finite differences.

    fn(*inputs) must be a pure float64 computation. The output is reduced
    to a scalar through a fixed random projection; gradients of that scalar
    w.r.t. every tensor in `wrt` (default: `inputs`) are compared
    coordinate-wise, on a seeded random subset of at most `max_coords`
    coordinates per tensor when given. Returns the max error scaled by the
    largest gradient magnitude of each tensor.
    """
    wrt = list(inputs) if wrt is None else list(wrt)
    for t in inputs + wrt:
        if t.dtype != torch.float64:
            raise ParameterError("grad_check requires float64 tensors")
    for t in wrt:
        t.requires_grad_(True)

    gen = torch.Generator().manual_seed(proj_seed)

    def scalar():
        out = fn(*inputs)
        if not torch.isfinite(out).all():
            raise NumericError("non-finite values in grad_check output")
        proj = torch.empty(out.shape, dtype=torch.float64)
        proj.uniform_(-1.0, 1.0, generator=torch.Generator().manual_seed(proj_seed))
        return (out * proj).sum()

    loss = scalar()
    analytic = torch.autograd.grad(loss, wrt, allow_unused=True)
    # central differences of a float64 scalar carry ~eps*|L|/h of roundoff;
    # coordinates where both sides sit below that floor hold no information
    fd_floor = 200.0 * np.finfo(np.float64).eps * max(1.0, abs(float(loss))) / h

    worst = 0.0
    for t, g in zip(wrt, analytic):
        g = torch.zeros_like(t) if g is None else g
        flat = t.detach().reshape(-1)
        n = flat.numel()
        if max_coords is not None and n > max_coords:
            coords = torch.randperm(n, generator=gen)[:max_coords].tolist()
        else:
            coords = range(n)
        num = {}
        with torch.no_grad():
            for i in coords:
                orig = flat[i].item()
                flat[i] = orig + h
                up = scalar().item()
                flat[i] = orig - h
                down = scalar().item()
                flat[i] = orig
                num[i] = (up - down) / (2.0 * h)
        ga = g.reshape(-1)
        live = [i for i in coords
                if max(abs(float(ga[i])), abs(num[i])) > fd_floor]
        if not live:
            continue
        scale = max(float(ga.abs().max()), max(abs(v) for v in num.values()),
                    1e-8)
        err = max(abs(float(ga[i]) - num[i]) for i in live) / scale
        worst = max(worst, err)
    return worst


def save_checkpoint(path: str | Path, module: nn.Module, seed: int, step: int,
                    meta: dict | None = None) -> None:
    """JSON manifest (seed, step, meta, parameter table) plus one raw
    little-endian float32 blob per parameter, keyed by its module path."""
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    table = {}
    for name, p in sorted(module.state_dict().items()):
        fname = f"params/{name}.f32"
        arr = p.detach().cpu().numpy().astype("<f4")
        arr.tofile(path / fname)
        table[name] = {"file": fname, "shape": list(arr.shape)}
    manifest = {"seed": seed, "step": step, "meta": meta or {}, "params": table}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_checkpoint(path: str | Path, module: nn.Module) -> dict:
    """Load blobs into `module` (strict key match) and return the manifest."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    state = {}
    for name, info in manifest["params"].items():
        raw = np.fromfile(path / info["file"], dtype="<f4").reshape(info["shape"])
        state[name] = torch.from_numpy(raw.copy())
    module.load_state_dict(state, strict=True)
    return manifest
