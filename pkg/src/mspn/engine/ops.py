"""Differentiable kernels used by the guidance network, MSPN and the losses.

Only the ops the pipeline needs are here; each one computes its forward
result with numpy and registers a closure returning parent gradients.
Every op is dtype-preserving so the same graph can be replayed in 64-bit.
"""
from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError
from .tensor import Tensor, as_tensor, make_node


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# elementwise ----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_node(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return make_node(out, (a, b), backward, "div")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0

    def backward(g):
        return (g * pos,)

    return make_node(np.where(pos, x.data, 0).astype(x.dtype), (x,), backward, "relu")


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0, x.data).astype(x.dtype)

    def backward(g):
        # sigmoid, written to stay finite for large |x|
        sig = np.exp(-np.logaddexp(0, -x.data)).astype(x.dtype)
        return (g * sig,)

    return make_node(out, (x,), backward, "softplus")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return make_node(out, (x,), backward, "exp")


def log(x: Tensor) -> Tensor:
    def backward(g):
        return (g / x.data,)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return make_node(out, (x,), backward, "log")


def sqrt(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)

    def backward(g):
        with np.errstate(divide="ignore"):
            return (g * 0.5 / out,)

    return make_node(out, (x,), backward, "sqrt")


def absolute(x: Tensor) -> Tensor:
    def backward(g):
        return (g * np.sign(x.data),)

    return make_node(np.abs(x.data), (x,), backward, "abs")


def square(x: Tensor) -> Tensor:
    def backward(g):
        return (2 * g * x.data,)

    return make_node(x.data * x.data, (x,), backward, "square")


def clamp_min(x: Tensor, lo: float) -> Tensor:
    keep = x.data >= lo

    def backward(g):
        return (g * keep,)

    return make_node(np.maximum(x.data, x.dtype.type(lo)), (x,), backward, "clamp_min")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    keep = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        return (g * keep,)

    return make_node(np.clip(x.data, x.dtype.type(lo), x.dtype.type(hi)), (x,), backward, "clamp")


# reductions and reshaping ----------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return make_node(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward, "sum")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def backward(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return make_node(np.asarray(x.data.mean(), dtype=x.dtype), (x,), backward, "mean")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    def backward(g):
        return (g.reshape(x.shape),)

    return make_node(x.data.reshape(shape), (x,), backward, "reshape")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    dtype = xs[0].dtype
    sizes = [x.shape[axis] for x in xs]
    try:
        out = np.concatenate([x.data.astype(dtype, copy=False) for x in xs], axis=axis)
    except ValueError as exc:
        raise ConfigError(f"concat shape mismatch: {[x.shape for x in xs]}") from exc
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs))
        )

    return make_node(out, xs, backward, "concat")


def select(x: Tensor, index: int) -> Tensor:
    """``x[index]`` along the leading axis."""

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return make_node(x.data[index].copy(), (x,), backward, "select")


def crop(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    """Spatial crop of the trailing two axes."""
    idx = (..., slice(top, top + height), slice(left, left + width))

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return make_node(x.data[idx].copy(), (x,), backward, "crop")


def pad2d(x: Tensor, top: int, bottom: int, left: int, right: int, mode: str = "reflect") -> Tensor:
    """Pad the trailing two axes; ``mode`` is any of numpy's reflect/edge/constant."""
    if top == bottom == left == right == 0:
        return x
    h, w = x.shape[-2:]

    def selector(n: int, before: int, after: int) -> np.ndarray:
        if mode == "constant":
            idx = np.concatenate([np.full(before, -1), np.arange(n), np.full(after, -1)])
        else:
            idx = np.pad(np.arange(n), (before, after), mode=mode)
        sel = np.zeros((idx.size, n), dtype=x.dtype)
        keep = idx >= 0
        sel[np.nonzero(keep)[0], idx[keep]] = 1
        return sel

    rows, cols = selector(h, top, bottom), selector(w, left, right)
    widths = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
    out = np.pad(x.data, widths, mode=mode)

    def backward(g):
        return (np.einsum("ph,...pq,qw->...hw", rows, g, cols),)

    return make_node(out, (x,), backward, f"pad_{mode}")


def take(x: Tensor, flat_index: np.ndarray) -> Tensor:
    """Gather ``x.ravel()[flat_index]`` as a 1-D tensor."""
    flat_index = np.asarray(flat_index, dtype=np.intp)

    def backward(g):
        full = np.zeros(x.data.size, dtype=x.dtype)
        np.add.at(full, flat_index, g)
        return (full.reshape(x.shape),)

    return make_node(x.data.reshape(-1)[flat_index], (x,), backward, "take")


# convolutions -----------------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    # (C, Ho, Wo, k, k) -> (C*k*k, Ho*Wo)
    return win.transpose(0, 3, 4, 1, 2).reshape(xp.shape[0] * k * k, ho * wo)


def _col2im(cols: np.ndarray, c: int, k: int, stride: int, hp: int, wp: int, ho: int, wo: int) -> np.ndarray:
    cols = cols.reshape(c, k, k, ho, wo)
    out = np.zeros((c, hp, wp), dtype=cols.dtype)
    for u in range(k):
        for v in range(k):
            out[:, u : u + stride * ho : stride, v : v + stride * wo : stride] += cols[:, u, v]
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a C_in×H×W input with a C_out×C_in×k×k kernel."""
    if x.ndim != 3 or weight.ndim != 4:
        raise ConfigError(f"conv2d expects 3-D input and 4-D kernel, got {x.shape} and {weight.shape}")
    cout, cin, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ConfigError(f"conv2d kernel must be square with odd size, got {weight.shape}")
    if x.shape[0] != cin:
        raise ConfigError(f"conv2d channel mismatch: input {x.shape} vs kernel {weight.shape}")
    if bias is not None and bias.shape != (cout,):
        raise ConfigError(f"conv2d bias shape {bias.shape} does not match kernel {weight.shape}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    _, h, w = x.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < k or wp < k:
        raise ConfigError(f"conv2d input {x.shape} too small for kernel {weight.shape}")
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = weight.data.reshape(cout, -1)
    out = (wmat @ cols).reshape(cout, ho, wo)
    if bias is not None:
        out = out + bias.data[:, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gm = g.reshape(cout, -1)
        gw = (gm @ cols.T).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gxp = _col2im(wmat.T @ gm, cin, k, stride, hp, wp, ho, wo)
            gx = gxp[:, padding : padding + h, padding : padding + w]
        grads = (gx, gw)
        if bias is not None:
            grads += (g.sum(axis=(1, 2)),)
        return grads

    return make_node(out, parents, backward, "conv2d")


def conv_transpose2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 2,
    padding: int = 1,
    output_padding: int = 1,
) -> Tensor:
    """Transposed convolution; ``weight`` is C_in×C_out×k×k.

    Output size is (H-1)*stride - 2*padding + k + output_padding, so the
    defaults double H and W for a 3×3 kernel.
    """
    if x.ndim != 3 or weight.ndim != 4:
        raise ConfigError(f"conv_transpose2d expects 3-D input and 4-D kernel, got {x.shape} and {weight.shape}")
    cin, cout, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ConfigError(f"conv_transpose2d kernel must be square with odd size, got {weight.shape}")
    if x.shape[0] != cin:
        raise ConfigError(f"conv_transpose2d channel mismatch: input {x.shape} vs kernel {weight.shape}")
    _, h, w = x.shape
    hf, wf = (h - 1) * stride + k + output_padding, (w - 1) * stride + k + output_padding
    ho, wo = hf - 2 * padding, wf - 2 * padding
    wmat = weight.data.reshape(cin, -1)
    xm = x.data.reshape(cin, -1)
    full = _col2im(wmat.T @ xm, cout, k, stride, hf, wf, h, w)
    out = full[:, padding : padding + ho, padding : padding + wo]
    if bias is not None:
        out = out + bias.data[:, None, None]
    else:
        out = out.copy()
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gfull = np.zeros((cout, hf, wf), dtype=g.dtype)
        gfull[:, padding : padding + ho, padding : padding + wo] = g
        gcols = _im2col(gfull, k, stride, h, w)
        gx = (wmat @ gcols).reshape(x.shape)
        gw = (xm @ gcols.T).reshape(weight.shape)
        grads = (gx, gw)
        if bias is not None:
            grads += (g.sum(axis=(1, 2)),)
        return grads

    return make_node(out, parents, backward, "conv_transpose2d")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each pixel's channel vector of a C×H×W tensor."""
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    c = x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ConfigError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    extra = (slice(None),) + (None,) * (x.ndim - 1)
    mu = x.data.mean(axis=0, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=0, keepdims=True) + x.dtype.type(eps))
    xhat = xc * inv
    out = gamma.data[extra] * xhat + beta.data[extra]
    red = tuple(range(1, x.ndim))

    def backward(g):
        dxhat = g * gamma.data[extra]
        gx = inv * (
            dxhat
            - dxhat.mean(axis=0, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=0, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return make_node(out, (x, gamma, beta), backward, "layer_norm")


# pixel-to-window attention ----------------------------------------------------

def window_offsets(p: int) -> list[tuple[int, int]]:
    """Row-major (dy, dx) offsets of a p×p window centred on the pixel."""
    r = p // 2
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]


@lru_cache(maxsize=64)
def _window_valid(h: int, w: int, p: int) -> np.ndarray:
    rows, cols = np.arange(h)[:, None], np.arange(w)[None, :]
    out = np.empty((p * p, h, w), dtype=bool)
    for t, (dy, dx) in enumerate(window_offsets(p)):
        out[t] = (rows + dy >= 0) & (rows + dy < h) & (cols + dx >= 0) & (cols + dx < w)
    out.setflags(write=False)
    return out


def window_valid(h: int, w: int, p: int) -> np.ndarray:
    """Boolean p²×H×W map of which window offsets fall inside the image."""
    return _window_valid(int(h), int(w), int(p))


def _check_window(p: int) -> int:
    if p < 1 or p % 2 == 0:
        raise ConfigError(f"window size must be odd and positive, got {p}")
    return p // 2


def _shifts(p: int, h: int, w: int):
    """(t, index) pairs addressing the window-shifted H×W view of a padded array."""
    r = p // 2
    return [
        (t, (slice(None), slice(r + dy, r + dy + h), slice(r + dx, r + dx + w)))
        for t, (dy, dx) in enumerate(window_offsets(p))
    ]


def window_logits(q: Tensor, k: Tensor, bias: Tensor, p: int) -> Tensor:
    """Scores q(i,j)·k(i+dy,j+dx) + bias[t] for every window offset t.

    Out-of-bounds keys are zero-padded here; callers mask them in the softmax.
    """
    r = _check_window(p)
    if q.shape != k.shape or q.ndim != 3:
        raise ConfigError(f"query/key shapes differ: {q.shape} vs {k.shape}")
    if bias.shape != (p * p,):
        raise ConfigError(f"bias must have {p * p} entries, got {bias.shape}")
    _, h, w = q.shape
    kp = np.pad(k.data, ((0, 0), (r, r), (r, r)))
    shifts = _shifts(p, h, w)
    scores = np.empty((p * p, h, w), dtype=q.dtype)
    for t, idx in shifts:
        scores[t] = np.einsum("lhw,lhw->hw", q.data, kp[idx])
    scores += bias.data[:, None, None]

    def backward(g):
        gq = np.zeros_like(q.data)
        gkp = np.zeros_like(kp)
        for t, idx in shifts:
            gq += g[t] * kp[idx]
            gkp[idx] += g[t] * q.data
        return gq, gkp[:, r : r + h, r : r + w], g.sum(axis=(1, 2))

    return make_node(scores, (q, k, bias), backward, "window_logits")


def masked_softmax(scores: Tensor, valid: np.ndarray) -> Tensor:
    """Softmax over axis 0 restricted to ``valid`` entries; others get weight 0."""
    z = np.where(valid, scores.data, -np.inf)
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z) * valid
    a = (e / e.sum(axis=0, keepdims=True)).astype(scores.dtype)

    def backward(g):
        return (a * (g - (a * g).sum(axis=0, keepdims=True)),)

    return make_node(a, (scores,), backward, "masked_softmax")


def window_aggregate(weights: Tensor, x: Tensor, p: int) -> Tensor:
    """out[c,i,j] = Σ_t weights[t,i,j] · x[c, i+dy_t, j+dx_t] for a C×H×W ``x``."""
    r = _check_window(p)
    if x.ndim != 3 or weights.shape != (p * p,) + x.shape[1:]:
        raise ConfigError(f"window_aggregate shape mismatch: {weights.shape} vs {x.shape}")
    _, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (r, r), (r, r)))
    shifts = _shifts(p, h, w)
    out = np.zeros_like(x.data)
    for t, idx in shifts:
        out += weights.data[t] * xp[idx]

    def backward(g):
        ga = np.empty_like(weights.data)
        gxp = np.zeros_like(xp)
        for t, idx in shifts:
            ga[t] = np.einsum("chw,chw->hw", g, xp[idx])
            gxp[idx] += weights.data[t] * g
        return ga, gxp[:, r : r + h, r : r + w]

    return make_node(out, (weights, x), backward, "window_aggregate")
