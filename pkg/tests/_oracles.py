"""Loop-based reference implementations used as independent test oracles."""
import numpy as np


def naive_conv2d(x, w, b=None, stride=1, padding=0):
    cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0 if b is None else b[o]
                for c in range(cin):
                    for u in range(k):
                        for v in range(k):
                            acc += w[o, c, u, v] * xp[c, i * stride + u, j * stride + v]
                out[o, i, j] = acc
    return out


def naive_conv_transpose2d(x, w, b=None, stride=2, padding=1, output_padding=1):
    cin, h, wd = x.shape
    _, cout, k, _ = w.shape
    hf, wf = (h - 1) * stride + k + output_padding, (wd - 1) * stride + k + output_padding
    full = np.zeros((cout, hf, wf))
    for c in range(cin):
        for i in range(h):
            for j in range(wd):
                for o in range(cout):
                    for u in range(k):
                        for v in range(k):
                            full[o, i * stride + u, j * stride + v] += x[c, i, j] * w[c, o, u, v]
    out = full[:, padding : hf - padding, padding : wf - padding]
    return out if b is None else out + np.asarray(b)[:, None, None]


def naive_layer_norm(x, gamma, beta, eps=1e-5):
    out = np.empty_like(x)
    for i in range(x.shape[1]):
        for j in range(x.shape[2]):
            v = x[:, i, j]
            mu = v.mean()
            var = ((v - mu) ** 2).mean()
            out[:, i, j] = gamma * (v - mu) / np.sqrt(var + eps) + beta
    return out


def reference_guidance(image, sparse, d0, P, cfg, with_head=False):
    """Float64 replay of the guidance network built from the loop oracles above."""
    P = {k: np.asarray(v.data, dtype=np.float64) for k, v in P.items()}
    relu = lambda t: np.maximum(t, 0)
    conv = lambda t, name, stride=1: naive_conv2d(t, P[f"{name}.weight"], P[f"{name}.bias"], stride, P[f"{name}.weight"].shape[-1] // 2)
    image = np.asarray(image, np.float64)
    sparse = np.asarray(sparse, np.float64)
    d0 = np.asarray(d0, np.float64)
    h, w = sparse.shape
    padded = np.pad(image, ((0, 0), (1, 1), (1, 1)), mode="edge")
    hf = naive_conv2d(padded, P["guidance.hf.conv3.weight"], P["guidance.hf.conv3.bias"]) - naive_conv2d(
        image, P["guidance.hf.conv1.weight"], P["guidance.hf.conv1.bias"]
    )
    x = np.concatenate([hf, sparse[None] / cfg.depth_norm, (sparse > 0)[None].astype(float), d0[None] / cfg.depth_norm])
    f = 2 ** cfg.stages
    x = np.pad(x, ((0, 0), (0, -h % f), (0, -w % f)), mode="reflect")
    skips = [relu(conv(x, "guidance.stem"))]
    for i in range(cfg.stages):
        y = relu(conv(skips[-1], f"guidance.enc{i}.down", 2))
        skips.append(relu(conv(y, f"guidance.enc{i}.conv")))
    y = skips.pop()
    for i in reversed(range(cfg.stages)):
        y = naive_conv_transpose2d(y, P[f"guidance.dec{i}.up.weight"], P[f"guidance.dec{i}.up.bias"])
        y = relu(naive_layer_norm(y, P[f"guidance.dec{i}.norm.gamma"], P[f"guidance.dec{i}.norm.beta"]))
        y = conv(np.concatenate([y, skips.pop()]), f"guidance.dec{i}.conv")
        if i:
            y = relu(y)
    g = y[:, :h, :w]
    if not with_head:
        return g
    return g, np.logaddexp(0, conv(g, "guidance.head")[0])
