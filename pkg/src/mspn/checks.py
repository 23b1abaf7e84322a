"""Self-check suites shared by the test-suite and the ``selftest``/``gradcheck`` commands."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import core
from .engine import ParamSet, Tensor, grad_check, ops
from .guidance import GuidanceConfig, guidance_forward, init_guidance_params
from .objectives import loss_l1l2


@dataclass
class StepInstance:
    depth: np.ndarray
    mask: np.ndarray
    sparse: np.ndarray
    guidance: np.ndarray
    params: ParamSet


def random_instance(rng, h: int, w: int, p: int, channels: int = 4, width: int = 4, density: float = 0.2) -> StepInstance:
    """Random 64-bit step inputs with a seed-derived mask and random relative bias."""
    gt = rng.uniform(1.0, 5.0, (h, w))
    sparse = np.where(rng.random((h, w)) < density, gt, 0.0)
    if not sparse.any():
        sparse[rng.integers(h), rng.integers(w)] = gt[0, 0]
    depth = gt * rng.uniform(0.8, 1.2, (h, w))
    mask = core.init_mask(sparse).astype(np.float64)
    # a spread-out fractional mask exercises the blend more than a binary one
    mask = np.where(mask > 0, 1.0, rng.uniform(0.0, 0.6, (h, w)) * (rng.random((h, w)) < 0.5))
    guidance = rng.normal(size=(channels, h, w))
    params = core.init_mspn_params(channels, width, p, seed=int(rng.integers(1 << 31)), dtype=np.float64)
    params.set_data("layer0.rel_bias", rng.normal(scale=0.5, size=p * p))
    return StepInstance(depth, mask, sparse, guidance, params)


def oracle_equivalence(n_instances: int = 50, seed: int = 0, sizes=(1, 3, 5, 13)) -> float:
    """Max |vectorized step - loop reference| over seeded instances with H, W <= 16."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_instances):
        p = sizes[i % len(sizes)]
        h, w = int(rng.integers(2, 17)), int(rng.integers(2, 17))
        inst = random_instance(rng, h, w, p)
        d, m = core.step(Tensor(inst.depth), Tensor(inst.mask), inst.sparse, Tensor(inst.guidance), inst.params)
        rd, rm = core.reference_step(inst.depth, inst.mask, inst.sparse, inst.guidance, inst.params)
        worst = max(worst, float(np.abs(d.data - rd).max()), float(np.abs(m.data - rm).max()))
    return worst


def bfs_dilate(support: np.ndarray, radius: int) -> np.ndarray:
    """Pixels within Chebyshev distance ``radius`` of ``support``, by 8-neighbour BFS."""
    h, w = support.shape
    dist = np.full((h, w), -1, dtype=np.int64)
    queue = deque()
    for i, j in zip(*np.nonzero(support)):
        dist[i, j] = 0
        queue.append((i, j))
    while queue:
        i, j = queue.popleft()
        if dist[i, j] == radius:
            continue
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                y, x = i + di, j + dj
                if 0 <= y < h and 0 <= x < w and dist[y, x] < 0:
                    dist[y, x] = dist[i, j] + 1
                    queue.append((y, x))
    return dist >= 0


def dilation_mismatches(n_patterns: int = 20, sizes=(3, 13), seed: int = 0, h: int = 24, w: int = 24) -> int:
    """Count (pattern, p, iteration) cases where the new mask support differs from BFS dilation."""
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n_patterns):
        for p in sizes:
            inst = random_instance(rng, h, w, p, density=float(rng.uniform(0.005, 0.05)))
            mask = Tensor(core.init_mask(inst.sparse).astype(np.float64))
            depth = Tensor(inst.depth)
            for _ in range(3):
                support = mask.data > 0
                depth, mask = core.step(depth, mask, inst.sparse, Tensor(inst.guidance), inst.params)
                bad += not np.array_equal(mask.data > 0, bfs_dilate(support, p // 2))
    return bad


@dataclass
class AttentionStats:
    max_sum_error: float
    min_weight: float
    max_outside_weight: float
    window_violations: int
    mask_min: float
    mask_max: float


def attention_invariants(n_pixels: int = 1000, seed: int = 0, h: int = 16, w: int = 16, p: int = 5) -> AttentionStats:
    """Normalization, non-negativity, window-bound and mask-range checks on random pixels."""
    rng = np.random.default_rng(seed)
    sum_err, min_w, outside, violations = 0.0, np.inf, 0.0, 0
    mask_lo, mask_hi = np.inf, -np.inf
    seen = 0
    r = p // 2
    while seen < n_pixels:
        inst = random_instance(rng, h, w, p)
        inst = StepInstance(inst.depth.astype(np.float32), inst.mask.astype(np.float32), inst.sparse.astype(np.float32),
                            inst.guidance.astype(np.float32), inst.params.astype(np.float32))
        g = Tensor(inst.guidance)
        d_t = core.clamp_seeds(Tensor(inst.depth), inst.sparse, core.init_mask(inst.sparse))
        q, k = core.project_qk(d_t, g, Tensor(inst.mask), inst.params)
        attn = core.window_attention(q, k, inst.params["layer0.rel_bias"], p).data
        valid = ops.window_valid(h, w, p)
        d_next, m_next = core.step(Tensor(inst.depth), Tensor(inst.mask), inst.sparse, g, inst.params)
        mask_lo, mask_hi = min(mask_lo, float(m_next.data.min())), max(mask_hi, float(m_next.data.max()))
        for _ in range(min(100, n_pixels - seen)):
            i, j = int(rng.integers(h)), int(rng.integers(w))
            a = attn[:, i, j]
            sum_err = max(sum_err, abs(float(a.sum()) - 1.0))
            min_w = min(min_w, float(a.min()))
            outside = max(outside, float(np.abs(a[~valid[:, i, j]]).max(initial=0.0)))
            win = d_t.data[max(0, i - r) : i + r + 1, max(0, j - r) : j + r + 1]
            lo, hi = win.min(), win.max()
            tol = 1e-5 * max(1.0, abs(hi))
            violations += not (lo - tol <= d_next.data[i, j] <= hi + tol)
            seen += 1
    return AttentionStats(sum_err, min_w, outside, violations, mask_lo, mask_hi)


# gradient checks --------------------------------------------------------------

GRADCHECK_THRESHOLD = 1e-3
# small enough that ReLU kinks are rarely straddled, large enough for 64-bit rounding
GRADCHECK_EPS = 1e-6


def gradcheck_components(scale: str = "tiny", seed: int = 0, samples: int = 64) -> dict[str, float]:
    """Max relative gradient error per component on 8×8 (tiny) or 16×16 (small) inputs."""
    side = {"tiny": 8, "small": 16}[scale]
    rng = np.random.default_rng(seed)
    results = {}

    x = rng.normal(size=(3, side, side))
    ps = ParamSet()
    ps.add("w", rng.normal(size=(4, 3, 3, 3)))
    ps.add("b", rng.normal(size=4))
    ps.add("gamma", rng.normal(size=4))
    ps.add("beta", rng.normal(size=4))
    ps.add("up", rng.normal(size=(4, 2, 3, 3)))
    wts = {k: rng.normal(size=s) for k, s in (("c", (4, side, side)), ("u", (2, 2 * side, 2 * side)))}

    def f_ops(P):
        y = ops.conv2d(Tensor(x), P["w"], P["b"], padding=1)
        y = ops.layer_norm(y, P["gamma"], P["beta"], 1e-5)
        z = ops.conv_transpose2d(ops.softplus(y), P["up"])
        return ops.sum_all(y * Tensor(wts["c"])) + ops.sum_all(z * Tensor(wts["u"]))

    results["engine_ops"] = grad_check(f_ops, ps, eps=GRADCHECK_EPS, samples_per_param=samples, seed=seed)

    inst = random_instance(rng, side, side, 5)
    w_d, w_m = rng.normal(size=(side, side)), rng.normal(size=(side, side))

    def f_step(P):
        d, m = core.step(Tensor(inst.depth), Tensor(inst.mask), inst.sparse, Tensor(inst.guidance), P)
        return ops.sum_all(d * Tensor(w_d)) + ops.sum_all(m * Tensor(w_m))

    results["mspn_step"] = grad_check(f_step, inst.params, eps=GRADCHECK_EPS, samples_per_param=samples, seed=seed)

    gt = inst.depth * rng.uniform(0.9, 1.1, inst.depth.shape)
    m0 = core.init_mask(inst.sparse)

    def f_chain(P):
        d, m = Tensor(inst.depth), Tensor(m0)
        for _ in range(2):
            d, m = core.step(d, m, inst.sparse, Tensor(inst.guidance), P, seed_mask=m0)
        return loss_l1l2(d, gt)

    results["two_steps_l1l2"] = grad_check(f_chain, inst.params, eps=GRADCHECK_EPS, samples_per_param=samples, seed=seed)

    gcfg = GuidanceConfig(hf_channels=2, widths=(3, 4, 4), out_channels=3)
    gps = init_guidance_params(gcfg, seed=seed, dtype=np.float64)
    image = rng.uniform(0, 1, (3, side, side))
    w_g = rng.normal(size=(gcfg.out_channels, side, side))

    def f_guidance(P):
        return ops.sum_all(guidance_forward(image, inst.sparse, inst.depth, P, gcfg) * Tensor(w_g))

    results["guidance"] = grad_check(f_guidance, gps, eps=GRADCHECK_EPS, samples_per_param=samples, seed=seed)
    return results


def selftest(seed: int = 0) -> dict[str, tuple[float, bool]]:
    """Quick versions of the oracle, dilation and normalization suites: name -> (value, ok)."""
    eq = oracle_equivalence(n_instances=8, seed=seed)
    dil = dilation_mismatches(n_patterns=4, seed=seed)
    att = attention_invariants(n_pixels=300, seed=seed)
    return {
        "oracle_equivalence_max_abs": (eq, eq < 1e-6),
        "dilation_mismatches": (float(dil), dil == 0),
        "attention_sum_error": (att.max_sum_error, att.max_sum_error <= 1e-5 and att.min_weight >= 0),
        "window_bound_violations": (float(att.window_violations), att.window_violations == 0),
        "mask_range": (att.mask_max, 0.0 <= att.mask_min and att.mask_max <= 1.0),
    }
