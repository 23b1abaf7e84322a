"""Masked spatial propagation: one refinement step and its building blocks.

A step takes the current depth D, propagation mask M, sparse depth S and the
guidance feature G and returns the next (D, M):

    D~ = (1 - M0) * D + M0 * S                    seed clamping
    Q  = LN(conv1x1_q([D~, G]))
    K  = LN(conv1x1_k([D~, G])) * M                masked keys
    a  = softmax_t(q . K(window t) + b_t)          per pixel, in-bounds t only
    R  = sum_t a_t * D~(window t),  M' = sum_t a_t * M(window t)
    D' = (1 - M) * D~ + M * R

Parameters for a layer live under a prefix, e.g. ``layer0.f_q.weight``.
"""
from __future__ import annotations

import math

import numpy as np

from .engine import ParamSet, Tensor, ops
from .errors import ConfigError, ContractError

LN_EPS = 1e-5


def init_mspn_params(
    guidance_channels: int,
    width: int = 16,
    p: int = 13,
    seed: int = 0,
    prefix: str = "layer0",
    dtype=np.float32,
) -> ParamSet:
    if p < 1 or p % 2 == 0:
        raise ConfigError(f"window size must be odd and positive, got {p}")
    rng = np.random.default_rng(seed)
    fan_in = 1 + guidance_channels
    bound = math.sqrt(1.0 / fan_in)
    ps = ParamSet()
    for proj in ("f_q", "f_k"):
        ps.add(f"{prefix}.{proj}.weight", rng.uniform(-bound, bound, (width, fan_in, 1, 1)).astype(dtype))
        ps.add(f"{prefix}.{proj}.bias", rng.uniform(-bound, bound, width).astype(dtype))
        ps.add(f"{prefix}.{proj}.norm.gamma", np.ones(width, dtype))
        ps.add(f"{prefix}.{proj}.norm.beta", np.zeros(width, dtype))
    ps.add(f"{prefix}.rel_bias", np.zeros(p * p, dtype))
    return ps


def window_size(params, prefix: str) -> int:
    n = params[f"{prefix}.rel_bias"].shape[0]
    p = math.isqrt(n)
    if p * p != n or p % 2 == 0:
        raise ConfigError(f"relative position bias of length {n} is not an odd square")
    return p


def init_mask(sparse: np.ndarray) -> np.ndarray:
    """1 where a measurement exists (sparse > 0), else 0."""
    sparse = np.asarray(sparse)
    return (sparse > 0).astype(sparse.dtype if sparse.dtype.kind == "f" else np.float32)


def _const(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=like.dtype))


def clamp_seeds(depth: Tensor, sparse: np.ndarray, seed_mask: np.ndarray) -> Tensor:
    """Replace depth by the measurement at seed pixels, bit-exactly."""
    seed_mask = np.asarray(seed_mask)
    if not np.all((seed_mask == 0) | (seed_mask == 1)):
        raise ContractError("seed mask must be binary")
    if depth.shape != seed_mask.shape or np.shape(sparse) != depth.shape:
        raise ConfigError(f"shape mismatch: depth {depth.shape}, sparse {np.shape(sparse)}, mask {seed_mask.shape}")
    m0 = _const(seed_mask, depth)
    return (1.0 - m0) * depth + m0 * _const(sparse, depth)


def _project(x: Tensor, params, name: str) -> Tensor:
    y = ops.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"])
    return ops.layer_norm(y, params[f"{name}.norm.gamma"], params[f"{name}.norm.beta"], LN_EPS)


def project_qk(d_tilde: Tensor, guidance: Tensor, mask: Tensor, params, prefix: str = "layer0") -> tuple[Tensor, Tensor]:
    """Query and masked key features from [D~, G]."""
    if guidance.shape[1:] != d_tilde.shape:
        raise ConfigError(f"guidance {guidance.shape} does not match depth {d_tilde.shape}")
    x = ops.concat([ops.reshape(d_tilde, (1,) + d_tilde.shape), guidance])
    q = _project(x, params, f"{prefix}.f_q")
    k = _project(x, params, f"{prefix}.f_k")
    return q, k * ops.reshape(mask, (1,) + mask.shape)


def window_attention(q: Tensor, k: Tensor, bias: Tensor, p: int) -> Tensor:
    """p²×H×W attention weights; out-of-bounds offsets get exactly 0."""
    if p < 1 or p % 2 == 0:
        raise ConfigError(f"window size must be odd and positive, got {p}")
    valid = ops.window_valid(q.shape[1], q.shape[2], p)
    return ops.masked_softmax(ops.window_logits(q, k, bias, p), valid)


def propagate(attn: Tensor, d_tilde: Tensor, mask: Tensor, p: int) -> tuple[Tensor, Tensor]:
    """Attention-weighted window averages of depth and mask."""
    stacked = ops.concat([ops.reshape(d_tilde, (1,) + d_tilde.shape), ops.reshape(mask, (1,) + mask.shape)])
    out = ops.window_aggregate(attn, stacked, p)
    # weights sum to 1 only up to rounding; keep the mask inside [0, 1]
    new_mask = ops.clamp(ops.select(out, 1), 0.0, 1.0)
    return ops.select(out, 0), new_mask


def blend(d_tilde: Tensor, refined: Tensor, mask: Tensor) -> Tensor:
    """(1 - M) * D~ + M * R."""
    if mask.data.min() < 0 or mask.data.max() > 1:
        raise ContractError("propagation mask must lie in [0, 1]")
    return (1.0 - mask) * d_tilde + mask * refined


def step(
    depth: Tensor,
    mask: Tensor,
    sparse: np.ndarray,
    guidance: Tensor,
    params,
    prefix: str = "layer0",
    seed_mask: np.ndarray | None = None,
    update_mask: bool = True,
) -> tuple[Tensor, Tensor]:
    """One MSPN iteration; returns (next depth, next mask).

    With ``update_mask=False`` the incoming mask is passed through unchanged.
    """
    p = window_size(params, prefix)
    depth, mask, guidance = _const(depth, guidance), _const(mask, guidance), _const(guidance, guidance)
    if seed_mask is None:
        seed_mask = init_mask(sparse)
    d_tilde = clamp_seeds(depth, sparse, seed_mask)
    q, k = project_qk(d_tilde, guidance, mask, params, prefix)
    attn = window_attention(q, k, params[f"{prefix}.rel_bias"], p)
    refined, new_mask = propagate(attn, d_tilde, mask, p)
    return blend(d_tilde, refined, mask), (new_mask if update_mask else mask)


# reference ------------------------------------------------------------------

def reference_step(depth, mask, sparse, guidance, params, prefix: str = "layer0"):
    """Loop-by-loop float64 evaluation of :func:`step` used as an oracle.

    Walks every pixel and every window offset explicitly; shares no code with
    the vectorized kernels.
    """
    P = {n: np.asarray(params[n].data if hasattr(params[n], "data") else params[n], dtype=np.float64) for n in params}
    depth = np.asarray(depth, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    sparse = np.asarray(sparse, dtype=np.float64)
    guidance = np.asarray(guidance, dtype=np.float64)
    H, W = depth.shape
    C = guidance.shape[0]
    bias = P[f"{prefix}.rel_bias"]
    p = math.isqrt(bias.shape[0])
    r = p // 2

    d_t = [[sparse[i][j] if sparse[i][j] > 0 else depth[i][j] for j in range(W)] for i in range(H)]

    def feature(name, i, j):
        wgt, b = P[f"{name}.weight"], P[f"{name}.bias"]
        gamma, beta = P[f"{name}.norm.gamma"], P[f"{name}.norm.beta"]
        inp = [d_t[i][j]] + [guidance[c][i][j] for c in range(C)]
        L = wgt.shape[0]
        y = []
        for l in range(L):
            acc = b[l]
            for c in range(C + 1):
                acc += wgt[l][c][0][0] * inp[c]
            y.append(acc)
        mu = sum(y) / L
        var = sum((v - mu) ** 2 for v in y) / L
        return [gamma[l] * (y[l] - mu) / math.sqrt(var + LN_EPS) + beta[l] for l in range(L)]

    Q = [[feature(f"{prefix}.f_q", i, j) for j in range(W)] for i in range(H)]
    K = [[[v * mask[i][j] for v in feature(f"{prefix}.f_k", i, j)] for j in range(W)] for i in range(H)]

    new_depth = np.zeros((H, W))
    new_mask = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            logits = []
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    y, x = i + dy, j + dx
                    if 0 <= y < H and 0 <= x < W:
                        t = (dy + r) * p + (dx + r)
                        s = bias[t]
                        for l in range(len(Q[i][j])):
                            s += Q[i][j][l] * K[y][x][l]
                        logits.append((s, y, x))
            top = max(s for s, _, _ in logits)
            z = sum(math.exp(s - top) for s, _, _ in logits)
            rd = rm = 0.0
            for s, y, x in logits:
                a = math.exp(s - top) / z
                rd += a * d_t[y][x]
                rm += a * mask[y][x]
            m = mask[i][j]
            new_depth[i, j] = (1 - m) * d_t[i][j] + m * rd
            new_mask[i, j] = rm
    return new_depth, new_mask
