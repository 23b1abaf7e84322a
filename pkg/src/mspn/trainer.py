"""Variable-sparsity training and sparsity-sweep evaluation."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import datagen
from .engine import ParamSet, backward
from .engine.params import atomic_write_bytes
from .errors import ConfigError, NumericError
from .objectives import LOSSES, MetricReport, compute_metrics, mean_reports
from .pipeline import ModelConfig, RefineConfig, init_params, refine

log = logging.getLogger(__name__)

# held-out scenes never collide with training scene seeds
EVAL_SEED_BASE = 1_000_000
MDE_SEED_OFFSET = 500_000


@dataclass(frozen=True)
class SparsityProtocol:
    kind: str = "points"  # points | lines | hole
    s_min: int = 10
    s_max: int = 1000
    # rescale point counts from the reference crop area to the scene area
    area_scale: bool = True
    line_levels: tuple[int, ...] = datagen.LINE_LEVELS

    def __post_init__(self):
        if self.kind not in ("points", "lines", "hole"):
            raise ConfigError(f"unknown sparsity protocol '{self.kind}'")
        if not 1 <= self.s_min <= self.s_max:
            raise ConfigError(f"need 1 <= s_min <= s_max, got {self.s_min}, {self.s_max}")

    def draw(self, rng: np.random.Generator, h: int, w: int) -> int:
        if self.kind == "hole":
            # dense input outside a centred hole; the level is the seed count
            return h * w - (h // 2) * (w // 2)
        if self.kind == "lines":
            return int(min(h, rng.choice(self.line_levels)))
        s = int(rng.integers(self.s_min, self.s_max + 1))
        return datagen.scale_to_area(s, h, w) if self.area_scale else s


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 36
    steps_per_epoch: int = 50
    batch_size: int = 2
    lr: float = 1e-3
    milestones: tuple[int, ...] = (18, 24, 30)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-2
    loss: str = "l1l2"
    sparsity: SparsityProtocol = SparsityProtocol()
    height: int = 32
    width: int = 32
    complexity: int = 2
    severity: float = 1.0
    max_layer1_iters: int = 12
    seed: int = 0

    def __post_init__(self):
        if list(self.milestones) != sorted(set(self.milestones)):
            raise ConfigError(f"milestones must be strictly increasing, got {self.milestones}")
        if self.lr < 0 or self.epochs < 1 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ConfigError("epochs, steps_per_epoch and batch_size must be positive; lr non-negative")
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss '{self.loss}'")

    def lr_at(self, epoch: int) -> float:
        return self.lr * 0.5 ** sum(epoch >= m for m in self.milestones)


class AdamW:
    """Adam with decoupled weight decay, one moment pair per parameter."""

    def __init__(self, params: ParamSet, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-2):
        self.params = params
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(params[n].data) for n in params}
        self.v = {n: np.zeros_like(params[n].data) for n in params}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for name in self.params:
            p = self.params[name]
            g = grads[name].astype(p.dtype, copy=False)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            update = (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            p.data = (p.data - lr * self.weight_decay * p.data - lr * update).astype(p.dtype)

    def state(self) -> ParamSet:
        out = ParamSet()
        for n in self.params:
            out.add(f"m.{n}", self.m[n])
            out.add(f"v.{n}", self.v[n])
        return out

    def load_state(self, state: ParamSet, t: int) -> None:
        self.t = t
        for n in self.params:
            self.m[n] = state[f"m.{n}"].data.copy()
            self.v[n] = state[f"v.{n}"].data.copy()


@dataclass
class TrainingSample:
    image: np.ndarray
    gt: np.ndarray
    d0: np.ndarray
    sparse: np.ndarray
    level: int


def make_sample(scene_seed: int, level: int, kind: str, cfg: TrainConfig) -> TrainingSample:
    """Scene, simulated initial depth and sparse input, all derived from ``scene_seed``."""
    scene = datagen.gen_scene(scene_seed, cfg.height, cfg.width, cfg.complexity)
    d0 = datagen.simulate_mde(scene.gt_depth, scene_seed + MDE_SEED_OFFSET, cfg.severity)
    if kind == "hole":
        sparse, _ = datagen.apply_sampler(scene.gt_depth, datagen.SamplerSpec(kind="hole"))
    elif level == 0:
        sparse = np.zeros_like(scene.gt_depth)
    elif kind == "lines":
        sparse = datagen.sample_lines(scene.gt_depth, level, scene_seed)
    else:
        sparse = datagen.sample_points(scene.gt_depth, level, scene_seed)
    return TrainingSample(scene.image, scene.gt_depth, d0, sparse, level)


@dataclass
class TrainResult:
    params: ParamSet
    epoch_losses: list[float]
    log_rows: list[tuple[int, int, float, int]] = field(default_factory=list)

    def log_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "step", "loss", "sparsity"])
        for epoch, step, loss, level in self.log_rows:
            writer.writerow([epoch, step, repr(loss), level])
        return buf.getvalue()


class TrainingDiverged(NumericError):
    def __init__(self, message: str, last_good: ParamSet):
        super().__init__(message)
        self.last_good = last_good


def _refine_cfg(model_cfg: ModelConfig, train_cfg: TrainConfig) -> RefineConfig:
    mode = "lines" if train_cfg.sparsity.kind == "lines" else "points"
    return RefineConfig(p=model_cfg.p, mode=mode, max_layer1_iters=train_cfg.max_layer1_iters)


def save_checkpoint(path, params: ParamSet, opt: AdamW, epoch: int, result: TrainResult) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    params.save(path / "params.bin")
    opt.state().save(path / "optim.bin")
    meta = {"epoch": epoch, "t": opt.t, "epoch_losses": result.epoch_losses, "log_rows": result.log_rows}
    atomic_write_bytes(path / "state.json", json.dumps(meta).encode())


def train(
    train_cfg: TrainConfig = TrainConfig(),
    model_cfg: ModelConfig = ModelConfig(),
    params: ParamSet | None = None,
    resume_from: str | os.PathLike | None = None,
    checkpoint_dir: str | os.PathLike | None = None,
    stop_after_epoch: int | None = None,
) -> TrainResult:
    """Train guidance and both MSPN layers on freshly generated scenes.

    Each step draws ``batch_size`` scenes with a random sparsity level, refines
    the simulated initial depth and applies one AdamW update on the batch-mean
    loss. Everything is derived from ``train_cfg.seed`` and the step index, so
    resuming from a checkpoint reproduces the uninterrupted run exactly.
    """
    params = params if params is not None else init_params(model_cfg, seed=train_cfg.seed)
    opt = AdamW(params, train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps, train_cfg.weight_decay)
    result = TrainResult(params, [])
    start_epoch = 0
    if resume_from is not None:
        resume_from = Path(resume_from)
        loaded = ParamSet.load(resume_from / "params.bin")
        for n in params:
            params.set_data(n, loaded[n].data)
        meta = json.loads((resume_from / "state.json").read_text())
        opt.load_state(ParamSet.load(resume_from / "optim.bin"), meta["t"])
        start_epoch = meta["epoch"]
        result.epoch_losses = list(meta["epoch_losses"])
        result.log_rows = [tuple(r) for r in meta["log_rows"]]

    rcfg = _refine_cfg(model_cfg, train_cfg)
    loss_fn = LOSSES[train_cfg.loss]
    last_good = params.copy()
    for epoch in range(start_epoch, train_cfg.epochs):
        lr = train_cfg.lr_at(epoch)
        losses = []
        for step in range(train_cfg.steps_per_epoch):
            global_step = epoch * train_cfg.steps_per_epoch + step
            rng = np.random.default_rng([train_cfg.seed, global_step])
            grads = {n: np.zeros_like(params[n].data) for n in params}
            batch_loss, level = 0.0, 0
            for b in range(train_cfg.batch_size):
                scene_seed = int(rng.integers(0, EVAL_SEED_BASE))
                level = train_cfg.sparsity.draw(rng, train_cfg.height, train_cfg.width)
                sample = make_sample(scene_seed, level, train_cfg.sparsity.kind, train_cfg)
                try:
                    pred, _ = refine(sample.image, sample.sparse, sample.d0, params, rcfg, model_cfg.guidance)
                    loss = loss_fn(pred, sample.gt)
                    g = backward(loss, params)
                except NumericError as exc:
                    raise TrainingDiverged(f"training diverged at epoch {epoch} step {step}: {exc}", last_good) from exc
                if not np.isfinite(loss.item()):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}", last_good)
                batch_loss += loss.item() / train_cfg.batch_size
                for n in grads:
                    grads[n] += g[n] / train_cfg.batch_size
            opt.step(grads, lr)
            last_good = params.copy()
            losses.append(batch_loss)
            result.log_rows.append((epoch, step, batch_loss, level))
        result.epoch_losses.append(float(np.mean(losses)))
        log.info("epoch %d lr %.2e mean loss %.5f", epoch, lr, result.epoch_losses[-1])
        if checkpoint_dir is not None:
            save_checkpoint(checkpoint_dir, params, opt, epoch + 1, result)
        if stop_after_epoch is not None and epoch + 1 >= stop_after_epoch:
            break
    return result


# evaluation -----------------------------------------------------------------

@dataclass
class SweepResult:
    levels: list[int]
    baseline: MetricReport
    reports: list[MetricReport]
    baseline_rmse: list[float] = field(default_factory=list)
    level_rmse: list[list[float]] = field(default_factory=list)

    def table(self) -> str:
        lines = [f"{'level':>8} {'rmse':>10} {'rel':>8} {'d1.25':>7} {'mae':>9}"]
        rows = [("D0", self.baseline)] + list(zip(self.levels, self.reports))
        for level, r in rows:
            lines.append(f"{level!s:>8} {r.rmse:10.5f} {r.rel:8.5f} {r.delta1:7.2f} {r.mae:9.5f}")
        return "\n".join(lines) + "\n"

    def csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        keys = list(asdict(self.baseline))
        writer.writerow(["level"] + keys)
        for level, r in [("d0", self.baseline)] + list(zip(self.levels, self.reports)):
            writer.writerow([level] + [repr(v) if isinstance(v, float) else v for v in asdict(r).values()])
        return buf.getvalue()


def eval_scene_seeds(n_scenes: int, seed: int = 0) -> list[int]:
    return [EVAL_SEED_BASE + seed * 10_000 + i for i in range(n_scenes)]


def evaluate_sweep(
    params: ParamSet,
    levels,
    n_scenes: int = 20,
    seed: int = 0,
    train_cfg: TrainConfig = TrainConfig(),
    model_cfg: ModelConfig = ModelConfig(),
    refine_cfg: RefineConfig | None = None,
    units: str = "m",
    seed_check: bool = True,
) -> SweepResult:
    """Refine the same held-out scenes at each sparsity level and average metrics.

    Level 0 runs the empty-input fallback, so its row equals the baseline.
    With ``seed_check`` every refined map is checked to match the sparse input
    at seed pixels exactly.
    """
    levels = [int(v) for v in levels]
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ConfigError(f"sparsity levels must be strictly increasing, got {levels}")
    kind = train_cfg.sparsity.kind
    if kind == "hole":
        raise ConfigError("sweeps vary point or line counts; use evaluate_holefill for holes")
    rcfg = refine_cfg or RefineConfig(p=model_cfg.p, mode=kind)
    seeds = eval_scene_seeds(n_scenes, seed)
    base_reports, base_rmse = [], []
    per_level = {lv: [] for lv in levels}
    for scene_seed in seeds:
        base = make_sample(scene_seed, 0, kind, train_cfg)
        r = compute_metrics(base.d0, base.gt, units)
        base_reports.append(r)
        base_rmse.append(r.rmse)
        for lv in levels:
            sample = make_sample(scene_seed, lv, kind, train_cfg)
            pred, _ = refine(sample.image, sample.sparse, sample.d0, params, rcfg, model_cfg.guidance)
            if seed_check and rcfg.final_seed_clamp:
                seeds_at = sample.sparse > 0
                if not np.array_equal(pred.data[seeds_at], sample.sparse[seeds_at]):
                    raise NumericError("refined output differs from the sparse input at a seed pixel")
            per_level[lv].append(compute_metrics(pred.data, sample.gt, units))
    return SweepResult(
        levels=levels,
        baseline=mean_reports(base_reports),
        reports=[mean_reports(per_level[lv]) for lv in levels],
        baseline_rmse=base_rmse,
        level_rmse=[[r.rmse for r in per_level[lv]] for lv in levels],
    )


@dataclass
class HoleFillResult:
    model_rmse: list[float]
    baseline_rmse: list[float]
    model: MetricReport
    baseline: MetricReport

    @property
    def wins(self) -> int:
        return sum(m < b for m, b in zip(self.model_rmse, self.baseline_rmse))


def evaluate_holefill(
    params: ParamSet,
    n_scenes: int = 20,
    seed: int = 0,
    train_cfg: TrainConfig = TrainConfig(),
    model_cfg: ModelConfig = ModelConfig(),
    units: str = "m",
) -> HoleFillResult:
    """Dense ground truth outside a centred half-size hole; metrics inside the hole only."""
    rcfg = RefineConfig(p=model_cfg.p)
    model_reports, base_reports = [], []
    for scene_seed in eval_scene_seeds(n_scenes, seed):
        base = make_sample(scene_seed, 0, "hole", train_cfg)
        hole = np.zeros(base.gt.shape, dtype=bool)
        top, left, hh, ww = datagen.centered_hole(*base.gt.shape)
        hole[top : top + hh, left : left + ww] = True
        pred, _ = refine(base.image, base.sparse, base.d0, params, rcfg, model_cfg.guidance)
        model_reports.append(compute_metrics(pred.data, base.gt, units, region=hole))
        base_reports.append(compute_metrics(base.d0, base.gt, units, region=hole))
    return HoleFillResult(
        model_rmse=[r.rmse for r in model_reports],
        baseline_rmse=[r.rmse for r in base_reports],
        model=mean_reports(model_reports),
        baseline=mean_reports(base_reports),
    )


def with_overrides(cfg, **kwargs):
    return replace(cfg, **kwargs)
