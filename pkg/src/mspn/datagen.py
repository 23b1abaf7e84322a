"""Synthetic scenes, a monocular-depth error simulator and sparse samplers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError

DEPTH_MIN, DEPTH_MAX = 0.5, 10.0
# reference area of the indoor benchmark crop (228 x 304)
REFERENCE_AREA = 228 * 304
LINE_LEVELS = (4, 8, 16, 32, 64)
EDGE_BLUR = 0.3
# total depth change across the map for background and box planes (meters)
BACKGROUND_SLOPE = (0.2, 1.5)
BOX_SLOPE = (0.0, 0.8)


@dataclass
class Scene:
    image: np.ndarray  # 3×H×W in [0, 1]
    gt_depth: np.ndarray  # H×W meters
    seed: int


def _plane(rng, h, w, base: float, slope: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    gy, gx = rng.uniform(-slope, slope, 2)
    return base + gy * (yy - h / 2) / h + gx * (xx - w / 2) / w


def gen_scene(seed: int, h: int = 32, w: int = 32, complexity: int = 2) -> Scene:
    """Background plane plus axis-aligned slanted boxes, with a matching image.

    ``complexity`` 0 gives a single plane; 1 gives 2-4 boxes; 2 or more gives 2-6.
    Image intensity is a per-segment albedo times a fine texture times shading
    from the depth gradient, so image edges line up with depth edges.
    """
    if h < 16 or w < 16:
        raise ConfigError(f"scenes must be at least 16x16, got {h}x{w}")
    rng = np.random.default_rng(seed)
    depth = _plane(rng, h, w, rng.uniform(4.0, 9.0), rng.uniform(*BACKGROUND_SLOPE))
    labels = np.zeros((h, w), dtype=np.int64)
    n_obj = 0 if complexity <= 0 else int(rng.integers(2, 5 if complexity == 1 else 7))
    for k in range(1, n_obj + 1):
        bh, bw = rng.integers(h // 6, h // 2 + 1), rng.integers(w // 6, w // 2 + 1)
        top, left = rng.integers(0, h - bh + 1), rng.integers(0, w - bw + 1)
        surface = _plane(rng, h, w, rng.uniform(1.0, 7.0), rng.uniform(*BOX_SLOPE))
        region = np.zeros((h, w), dtype=bool)
        region[top : top + bh, left : left + bw] = True
        nearer = region & (surface < depth)
        depth[nearer] = surface[nearer]
        labels[nearer] = k
    depth = np.clip(depth, DEPTH_MIN, DEPTH_MAX)

    albedo = rng.uniform(0.2, 0.9, size=(n_obj + 1, 3))
    texture = 1.0 + 0.08 * ndimage.gaussian_filter(rng.normal(size=(h, w)), 0.7)
    gy, gx = np.gradient(depth)
    normal = np.stack([-gx, -gy, np.ones_like(depth)])
    normal /= np.linalg.norm(normal, axis=0, keepdims=True)
    light = np.array([0.3, -0.4, 0.87])
    shading = 0.55 + 0.45 * np.clip(np.tensordot(light / np.linalg.norm(light), normal, axes=1), 0, 1)
    image = albedo[labels].transpose(2, 0, 1) * texture * shading
    return Scene(
        image=np.clip(image, 0.0, 1.0).astype(np.float32),
        gt_depth=depth.astype(np.float32),
        seed=seed,
    )


def smooth_bias_field(h: int, w: int, rng, grid: int = 3) -> np.ndarray:
    """Low-frequency field in [-1, 1]: a coarse random grid, cubic-upsampled."""
    coarse = rng.uniform(-1, 1, size=(grid, grid))
    field = ndimage.zoom(coarse, (h / grid, w / grid), order=3, mode="nearest")[:h, :w]
    peak = np.max(np.abs(field))
    return field / peak if peak > 0 else field


def simulate_mde(
    gt: np.ndarray,
    seed: int,
    severity: float = 1.0,
    bias_field: np.ndarray | float | None = None,
    edge_blur: bool = True,
) -> np.ndarray:
    """Initial depth with smooth multiplicative error: gt * exp(B), edge-blurred.

    B is a seeded low-frequency field with |B| <= 0.3 * severity unless
    ``bias_field`` is given. Near depth discontinuities the result is mixed
    with a 3×3 box blur, weight ``EDGE_BLUR * severity``.
    """
    if not 0.0 <= severity <= 1.0:
        raise ConfigError(f"severity must lie in [0, 1], got {severity}")
    gt = np.asarray(gt, dtype=np.float64)
    rng = np.random.default_rng(seed)
    if bias_field is None:
        amp = 0.3 * severity * rng.uniform(0.6, 1.0)
        bias_field = amp * smooth_bias_field(*gt.shape, rng)
    d0 = gt * np.exp(bias_field)
    if edge_blur and severity > 0:
        gy, gx = np.gradient(gt)
        edges = (np.hypot(gx, gy) > 0.25).astype(np.float64)
        weight = EDGE_BLUR * severity * ndimage.maximum_filter(edges, size=3)
        d0 = (1 - weight) * d0 + weight * ndimage.uniform_filter(d0, size=3, mode="nearest")
    return np.maximum(d0, 1e-3).astype(np.float32)


def sample_points(gt: np.ndarray, s: int, seed: int) -> np.ndarray:
    """Exactly ``s`` measurements copied from valid gt pixels, drawn without replacement."""
    gt = np.asarray(gt)
    valid = np.flatnonzero(gt > 0)
    if not 1 <= s <= valid.size:
        raise ConfigError(f"cannot sample {s} points from {valid.size} valid pixels")
    rng = np.random.default_rng(seed)
    pick = rng.choice(valid, size=s, replace=False)
    out = np.zeros_like(gt)
    out.reshape(-1)[pick] = gt.reshape(-1)[pick]
    return out


def line_rows(h: int, n_lines: int, seed: int) -> np.ndarray:
    if not 1 <= n_lines <= h:
        raise ConfigError(f"n_lines must lie in [1, {h}], got {n_lines}")
    rng = np.random.default_rng(seed)
    offset = int(rng.integers(0, max(1, h // n_lines)))
    return offset + (np.arange(n_lines) * h) // n_lines


def sample_lines(gt: np.ndarray, n_lines: int, seed: int) -> np.ndarray:
    """Keep ``n_lines`` evenly spaced rows (seeded offset), zero elsewhere."""
    gt = np.asarray(gt)
    rows = line_rows(gt.shape[0], n_lines, seed)
    out = np.zeros_like(gt)
    out[rows] = np.where(gt[rows] > 0, gt[rows], 0)
    return out


def centered_hole(h: int, w: int) -> tuple[int, int, int, int]:
    """(top, left, height, width) of the centred half-size rectangle."""
    return h // 4, w // 4, h // 2, w // 2


def mask_hole(sparse: np.ndarray, rect: tuple[int, int, int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Zero ``sparse`` inside ``rect``; also return the boolean hole region."""
    sparse = np.asarray(sparse)
    top, left, hh, ww = rect
    h, w = sparse.shape
    if top < 0 or left < 0 or hh < 0 or ww < 0 or top + hh > h or left + ww > w:
        raise ConfigError(f"hole {rect} exceeds a {h}x{w} map")
    region = np.zeros((h, w), dtype=bool)
    region[top : top + hh, left : left + ww] = True
    return np.where(region, 0, sparse).astype(sparse.dtype), region


def scale_to_area(s: int, h: int, w: int) -> int:
    """Rescale a point count from the reference crop to an H×W map."""
    if h * w >= REFERENCE_AREA:
        return s
    return max(1, round(s * h * w / REFERENCE_AREA))


@dataclass(frozen=True)
class SamplerSpec:
    kind: str = "points"  # points | lines | hole
    s: int = 50
    n_lines: int = 4
    rect: tuple[int, int, int, int] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("points", "lines", "hole"):
            raise ConfigError(f"unknown sampler kind '{self.kind}'")


def apply_sampler(gt: np.ndarray, spec: SamplerSpec) -> tuple[np.ndarray, np.ndarray | None]:
    """Sparse input for ``gt`` and, for holes, the evaluation region.

    A hole sampler keeps every valid ground-truth pixel outside the rectangle.
    """
    if spec.kind == "points":
        return sample_points(gt, spec.s, spec.seed), None
    if spec.kind == "lines":
        return sample_lines(gt, spec.n_lines, spec.seed), None
    rect = spec.rect or centered_hole(*np.shape(gt))
    return mask_hole(np.where(np.asarray(gt) > 0, gt, 0), rect)
