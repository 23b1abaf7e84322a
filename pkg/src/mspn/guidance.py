"""Guidance network: image + sparse depth + initial depth -> guidance feature G.

A small U-Net stands in for the large transformer encoder. The image enters
through a high-frequency extractor (3×3 conv minus 1×1 conv); sparse depth,
its validity mask and the initial depth are concatenated alongside.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .engine import ParamSet, Tensor, ops
from .errors import ConfigError

LN_EPS = 1e-5


@dataclass(frozen=True)
class GuidanceConfig:
    hf_channels: int = 8
    widths: tuple[int, int, int] = (16, 32, 64)
    out_channels: int = 64
    depth_head: bool = False
    # depths are divided by this before entering the network
    depth_norm: float = 10.0

    @property
    def in_channels(self) -> int:
        return self.hf_channels + 3

    @property
    def stages(self) -> int:
        return len(self.widths)


def _conv_init(ps: ParamSet, rng, name: str, cout: int, cin: int, k: int, dtype, transpose: bool = False):
    fan_in = cin * k * k
    bound = math.sqrt(1.0 / fan_in)
    shape = (cin, cout, k, k) if transpose else (cout, cin, k, k)
    ps.add(f"{name}.weight", rng.uniform(-bound, bound, shape).astype(dtype))
    ps.add(f"{name}.bias", rng.uniform(-bound, bound, cout).astype(dtype))


def init_guidance_params(cfg: GuidanceConfig = GuidanceConfig(), seed: int = 0, dtype=np.float32) -> ParamSet:
    rng = np.random.default_rng(seed)
    ps = ParamSet()
    w = cfg.widths
    _conv_init(ps, rng, "guidance.hf.conv3", cfg.hf_channels, 3, 3, dtype)
    _conv_init(ps, rng, "guidance.hf.conv1", cfg.hf_channels, 3, 1, dtype)
    _conv_init(ps, rng, "guidance.stem", w[0], cfg.in_channels, 3, dtype)
    # encoder widths per resolution level: H -> w0, H/2 -> w0, H/4 -> w1, H/8 -> w2
    levels = (w[0],) + tuple(w)
    for i in range(cfg.stages):
        _conv_init(ps, rng, f"guidance.enc{i}.down", levels[i + 1], levels[i], 3, dtype)
        _conv_init(ps, rng, f"guidance.enc{i}.conv", levels[i + 1], levels[i + 1], 3, dtype)
    for i in reversed(range(cfg.stages)):
        cin, cout = levels[i + 1], levels[i]
        out = cfg.out_channels if i == 0 else cout
        _conv_init(ps, rng, f"guidance.dec{i}.up", cout, cin, 3, dtype, transpose=True)
        ps.add(f"guidance.dec{i}.norm.gamma", np.ones(cout, dtype))
        ps.add(f"guidance.dec{i}.norm.beta", np.zeros(cout, dtype))
        _conv_init(ps, rng, f"guidance.dec{i}.conv", out, 2 * cout, 3, dtype)
    if cfg.depth_head:
        _conv_init(ps, rng, "guidance.head", 1, cfg.out_channels, 3, dtype)
    return ps


def _conv(x: Tensor, params, name: str, stride: int = 1) -> Tensor:
    wgt = params[f"{name}.weight"]
    return ops.conv2d(x, wgt, params[f"{name}.bias"], stride=stride, padding=wgt.shape[-1] // 2)


def extract_high_freq(image: Tensor, params) -> Tensor:
    """conv3×3(image) - conv1×1(image), edge-replicated so flat regions give 0."""
    padded = ops.pad2d(image, 1, 1, 1, 1, mode="edge")
    c3 = ops.conv2d(padded, params["guidance.hf.conv3.weight"], params["guidance.hf.conv3.bias"])
    c1 = ops.conv2d(image, params["guidance.hf.conv1.weight"], params["guidance.hf.conv1.bias"])
    return c3 - c1


def _as_input(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _trunk(image: Tensor, sparse: np.ndarray, d0: Tensor, params, cfg: GuidanceConfig) -> Tensor:
    dtype = params["guidance.stem.weight"].dtype
    image = _as_input(image, dtype)
    d0 = _as_input(d0, dtype)
    sparse = np.asarray(sparse, dtype=dtype)
    _, h, w = image.shape
    if sparse.shape != (h, w) or d0.shape != (h, w):
        raise ConfigError(f"spatial mismatch: image {image.shape}, sparse {sparse.shape}, d0 {d0.shape}")
    factor = 2 ** cfg.stages
    ph, pw = -h % factor, -w % factor
    if ph >= h or pw >= w:
        raise ConfigError(f"input {h}x{w} too small for {cfg.stages} stages")

    hf = extract_high_freq(image, params)
    scale = 1.0 / cfg.depth_norm
    sparse_in = Tensor((sparse * scale)[None].astype(dtype))
    mask_in = Tensor((sparse > 0)[None].astype(dtype))
    d0_in = ops.reshape(d0 * scale, (1, h, w))
    x = ops.concat([hf, sparse_in, mask_in, d0_in])
    x = ops.pad2d(x, 0, ph, 0, pw, mode="reflect")

    skips = [ops.relu(_conv(x, params, "guidance.stem"))]
    for i in range(cfg.stages):
        y = ops.relu(_conv(skips[-1], params, f"guidance.enc{i}.down", stride=2))
        skips.append(ops.relu(_conv(y, params, f"guidance.enc{i}.conv")))
    y = skips.pop()
    for i in reversed(range(cfg.stages)):
        y = ops.conv_transpose2d(y, params[f"guidance.dec{i}.up.weight"], params[f"guidance.dec{i}.up.bias"])
        y = ops.relu(ops.layer_norm(y, params[f"guidance.dec{i}.norm.gamma"], params[f"guidance.dec{i}.norm.beta"], LN_EPS))
        y = _conv(ops.concat([y, skips.pop()]), params, f"guidance.dec{i}.conv")
        if i:
            y = ops.relu(y)
    return ops.crop(y, 0, 0, h, w)


def guidance_forward(image, sparse, d0, params, cfg: GuidanceConfig = GuidanceConfig()) -> Tensor:
    """C_G×H×W guidance feature."""
    return _trunk(image, sparse, d0, params, cfg)


def predict_initial_depth(image, sparse, params, cfg: GuidanceConfig) -> tuple[Tensor, Tensor]:
    """Ordinary-completion mode: guidance feature plus a positive depth map.

    The trunk is shared with :func:`guidance_forward`; the initial-depth input
    channel is zero since no external estimate exists in this mode.
    """
    if "guidance.head.weight" not in params:
        raise ConfigError("initial-depth head weights are absent (enable depth_head)")
    h, w = np.shape(sparse)
    dtype = params["guidance.stem.weight"].dtype
    g = _trunk(image, sparse, np.zeros((h, w), dtype), params, cfg)
    head = _conv(g, params, "guidance.head")
    return g, ops.softplus(ops.reshape(head, (h, w)))
