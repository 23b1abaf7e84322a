"""Sparsity-adaptive iteration scheduling and the two-layer refinement."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import core
from .engine import Tensor
from .errors import ConfigError, ScheduleError
from .guidance import GuidanceConfig, guidance_forward, predict_initial_depth


@dataclass(frozen=True)
class RefineConfig:
    p: int = 13
    kappa: float = 2.0
    min_iters: int = 6
    second_layer_iters: int = 6
    mode: str = "points"  # points | lines
    final_seed_clamp: bool = True
    # None means the full schedule; training caps layer-1 iterations
    max_layer1_iters: int | None = None
    # False freezes the mask at its initial value (ablation)
    mask_update: bool = True

    def __post_init__(self):
        if self.p < 1 or self.p % 2 == 0:
            raise ConfigError(f"window size p must be odd and positive, got {self.p}")
        if not self.kappa > 0:
            raise ConfigError(f"kappa must be positive, got {self.kappa}")
        if self.min_iters < 1 or self.second_layer_iters < 0:
            raise ConfigError("min_iters must be >= 1 and second_layer_iters >= 0")
        if self.mode not in ("points", "lines"):
            raise ConfigError(f"unknown sampling mode '{self.mode}'")
        if self.max_layer1_iters is not None and self.max_layer1_iters < 1:
            raise ConfigError("max_layer1_iters must be >= 1")


@dataclass(frozen=True)
class Schedule:
    nu_s: float
    n_layer1: int
    n_layer2: int


@dataclass(frozen=True)
class ModelConfig:
    guidance: GuidanceConfig = GuidanceConfig()
    mspn_width: int = 16
    p: int = 13


def init_params(model_cfg: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float32):
    """Guidance network plus two independently initialized MSPN layers."""
    from .guidance import init_guidance_params

    g = init_guidance_params(model_cfg.guidance, seed=seed, dtype=dtype)
    c = model_cfg.guidance.out_channels
    layers = [
        core.init_mspn_params(c, model_cfg.mspn_width, model_cfg.p, seed=seed + 1 + i, prefix=f"layer{i}", dtype=dtype)
        for i in range(2)
    ]
    return g.merged(*layers)


def iteration_count(s: int, h: int, w: int, cfg: RefineConfig = RefineConfig()) -> Schedule:
    """Layer iteration counts for ``s`` valid sparse points on an H×W map.

    nu_s = sqrt(HW/s) - 1 is the ideal seed spacing; each iteration reaches
    p/2 - 1 pixels, so layer 1 runs max(min_iters, ceil(kappa * nu_s / (p/2 - 1)))
    iterations.
    """
    if s < 1:
        raise ScheduleError("no valid sparse depths: no iteration schedule exists")
    if h < 1 or w < 1:
        raise ConfigError(f"invalid map size {h}x{w}")
    reach = cfg.p / 2 - 1
    if reach <= 0:
        raise ConfigError(f"window size {cfg.p} has no per-iteration reach (p/2 - 1 <= 0)")
    nu_s = max(0.0, math.sqrt(h * w / s) - 1.0)
    n1 = max(cfg.min_iters, math.ceil(cfg.kappa * nu_s / reach))
    return Schedule(nu_s=nu_s, n_layer1=n1, n_layer2=cfg.second_layer_iters)


def iteration_count_lines(sparse: np.ndarray, n_lines: int, cfg: RefineConfig = RefineConfig()) -> Schedule:
    """Schedule for line-sampled input from the average valid pixels per line."""
    if n_lines < 1:
        raise ConfigError(f"n_lines must be >= 1, got {n_lines}")
    sparse = np.asarray(sparse)
    total = int(np.count_nonzero(sparse > 0))
    if total == 0:
        raise ScheduleError("no valid sparse depths on any line")
    s_eff = n_lines * max(1, round(total / n_lines))
    h, w = sparse.shape
    return iteration_count(s_eff, h, w, cfg)


def count_lines(sparse: np.ndarray) -> int:
    return int(np.count_nonzero(np.any(np.asarray(sparse) > 0, axis=1)))


def schedule_for(sparse: np.ndarray, cfg: RefineConfig) -> Schedule:
    sparse = np.asarray(sparse)
    if cfg.mode == "lines":
        sched = iteration_count_lines(sparse, max(1, count_lines(sparse)), cfg)
    else:
        sched = iteration_count(int(np.count_nonzero(sparse > 0)), *sparse.shape, cfg)
    if cfg.max_layer1_iters is not None and sched.n_layer1 > cfg.max_layer1_iters:
        sched = Schedule(sched.nu_s, cfg.max_layer1_iters, sched.n_layer2)
    return sched


@dataclass
class Diagnostics:
    schedule: Schedule | None = None
    coverage: list[float] = field(default_factory=list)
    rmse: list[float] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    layer2_initial_mask: np.ndarray | None = None


def _coverage(mask: Tensor) -> float:
    return float(np.mean(mask.data > 0))


def _rmse(depth: Tensor, gt: np.ndarray) -> float:
    valid = gt > 0
    return float(np.sqrt(np.mean((depth.data[valid].astype(np.float64) - gt[valid]) ** 2)))


def refine(
    image,
    sparse,
    d0,
    params,
    cfg: RefineConfig = RefineConfig(),
    guidance_cfg: GuidanceConfig = GuidanceConfig(),
    gt: np.ndarray | None = None,
) -> tuple[Tensor, Diagnostics]:
    """Refine ``d0`` with sparse measurements through two MSPN layers.

    ``params`` holds ``guidance.*``, ``layer0.*`` and ``layer1.*`` entries.
    Pass ``d0=None`` for ordinary-completion mode, where the guidance network's
    depth head supplies the initial estimate. Returns the refined depth tensor
    (still on the tape) and per-iteration diagnostics.
    """
    dtype = params["guidance.stem.weight"].dtype
    sparse = np.asarray(sparse, dtype=dtype)
    diag = Diagnostics()
    if np.any(sparse < 0):
        raise ConfigError("sparse depths must be non-negative")
    s = int(np.count_nonzero(sparse > 0))

    if d0 is None:
        guidance, depth = predict_initial_depth(image, sparse, params, guidance_cfg)
    else:
        depth = d0 if isinstance(d0, Tensor) else Tensor(np.asarray(d0, dtype=dtype))
        guidance = None
    if s == 0:
        diag.warnings.append("no valid sparse depths; returning the initial depth unchanged")
        return depth, diag
    if guidance is None:
        guidance = guidance_forward(image, sparse, depth, params, guidance_cfg)

    sched = schedule_for(sparse, cfg)
    diag.schedule = sched
    m0 = core.init_mask(sparse)
    for prefix, n_iter in (("layer0", sched.n_layer1), ("layer1", sched.n_layer2)):
        if core.window_size(params, prefix) != cfg.p:
            raise ConfigError(f"{prefix} parameters use a different window size than p={cfg.p}")
        mask = Tensor(m0.copy())
        if prefix == "layer1":
            diag.layer2_initial_mask = mask.data.copy()
        for _ in range(n_iter):
            depth, mask = core.step(depth, mask, sparse, guidance, params, prefix, seed_mask=m0, update_mask=cfg.mask_update)
            diag.coverage.append(_coverage(mask))
            if gt is not None:
                diag.rmse.append(_rmse(depth, gt))
    if cfg.final_seed_clamp:
        depth = core.clamp_seeds(depth, sparse, m0)
    return depth, diag
