"""Minimal hand-backpropagated neural-net primitives on numpy float64.

Every layer comes as a ``*_forward`` returning ``(output, cache)`` and a
``*_backward`` consuming the cache, so gradient flow stays explicit and
checkable against finite differences. Nothing here owns parameters; models
keep them in plain ``{name: ndarray}`` dicts.
"""

from __future__ import annotations

import numpy as np


# ---------------------------------------------------------------------------
# elementwise / dense


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def silu_forward(x):
    s = sigmoid(x)
    return x * s, (x, s)


def silu_backward(grad, cache):
    x, s = cache
    return grad * (s * (1.0 + x * (1.0 - s)))


def linear_forward(x, w, b):
    """x (..., In) @ w (In, Out) + b (Out,)."""
    return x @ w + b, (x, w)


def linear_backward(grad, cache):
    x, w = cache
    gx = grad @ w.T
    gw = x.reshape(-1, x.shape[-1]).T @ grad.reshape(-1, grad.shape[-1])
    gb = grad.reshape(-1, grad.shape[-1]).sum(axis=0)
    return gx, gw, gb


def layernorm_forward(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def layernorm_backward(grad, cache):
    xhat, inv, gain = cache
    n = xhat.shape[-1]
    ggain = (grad * xhat).reshape(-1, n).sum(axis=0)
    gbias = grad.reshape(-1, n).sum(axis=0)
    gh = grad * gain
    gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
    return gx, ggain, gbias


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy_forward(logits, labels):
    """Mean CE over all leading dims; logits (..., V), integer labels (...)."""
    v = logits.shape[-1]
    flat = logits.reshape(-1, v)
    lab = np.asarray(labels).reshape(-1)
    ls = log_softmax(flat, axis=-1)
    loss = -ls[np.arange(len(lab)), lab].mean()
    return float(loss), (flat, lab, logits.shape)


def cross_entropy_backward(cache, scale=1.0):
    flat, lab, shape = cache
    p = softmax(flat, axis=-1)
    p[np.arange(len(lab)), lab] -= 1.0
    return (scale / len(lab)) * p.reshape(shape)


def embedding_forward(table, ids):
    return table[ids], (table.shape, ids)


def embedding_backward(grad, cache):
    shape, ids = cache
    gt = np.zeros(shape)
    np.add.at(gt, ids.reshape(-1), grad.reshape(-1, shape[-1]))
    return gt


# ---------------------------------------------------------------------------
# 3D convolution / transposed convolution via gather-scatter index tables


class _ConvIndex:
    """Precomputed gather indices linking a padded dense volume to windows."""

    _cache: dict = {}

    def __init__(self, big_shape, kernel, stride, pad):
        bx, by, bz = big_shape
        k0, k1, k2 = kernel
        s0, s1, s2 = stride
        p0, p1, p2 = pad
        self.pad = pad
        self.padded = (bx + 2 * p0, by + 2 * p1, bz + 2 * p2)
        ox = (self.padded[0] - k0) // s0 + 1
        oy = (self.padded[1] - k1) // s1 + 1
        oz = (self.padded[2] - k2) // s2 + 1
        self.small = (ox, oy, oz)
        px, py, pz = self.padded
        ax = np.arange(ox)[:, None] * s0 + np.arange(k0)[None, :]
        ay = np.arange(oy)[:, None] * s1 + np.arange(k1)[None, :]
        az = np.arange(oz)[:, None] * s2 + np.arange(k2)[None, :]
        idx = (
            (ax[:, None, None, :, None, None] * py + ay[None, :, None, None, :, None])
            * pz
            + az[None, None, :, None, None, :]
        )
        self.idx = idx.reshape(ox * oy * oz, k0 * k1 * k2)
        self.flat_size = px * py * pz

    @classmethod
    def get(cls, big_shape, kernel, stride, pad) -> "_ConvIndex":
        key = (big_shape, kernel, stride, pad)
        if key not in cls._cache:
            cls._cache[key] = cls(big_shape, kernel, stride, pad)
        return cls._cache[key]

    def pad_volume(self, x):
        p0, p1, p2 = self.pad
        return np.pad(x, ((0, 0), (p0, p0), (p1, p1), (p2, p2)))

    def unpad_volume(self, xp):
        p0, p1, p2 = self.pad
        px, py, pz = self.padded
        return xp[:, p0 : px - p0, p1 : py - p1, p2 : pz - p2]

    def gather(self, x):
        """(C, big) -> column matrix (n_small, C * K)."""
        c = x.shape[0]
        xp = self.pad_volume(x).reshape(c, self.flat_size)
        col = xp[:, self.idx]  # (C, n_small, K)
        return col.transpose(1, 0, 2).reshape(self.idx.shape[0], -1)

    def scatter(self, col, channels):
        """(n_small, C * K) -> dense (C, big) by summing window overlaps."""
        n, k = self.idx.shape
        per = col.reshape(n, channels, k).transpose(1, 0, 2).reshape(channels, n * k)
        flat_idx = self.idx.reshape(-1)
        out = np.empty((channels, self.flat_size))
        for ch in range(channels):
            out[ch] = np.bincount(flat_idx, weights=per[ch], minlength=self.flat_size)
        return self.unpad_volume(out.reshape((channels,) + self.padded))


def conv3d_forward(x, w, b, stride, pad):
    """x (Cin, X, Y, Z), w (Cout, Cin, k0, k1, k2), b (Cout,)."""
    cout = w.shape[0]
    index = _ConvIndex.get(x.shape[1:], w.shape[2:], stride, pad)
    col = index.gather(x)
    w_mat = w.reshape(cout, -1)
    y = col @ w_mat.T + b
    out = y.T.reshape((cout,) + index.small)
    return out, (col, w, x.shape, index)


def conv3d_backward(grad, cache):
    col, w, x_shape, index = cache
    cout = w.shape[0]
    g_mat = grad.reshape(cout, -1).T  # (n_small, Cout)
    gw = (g_mat.T @ col).reshape(w.shape)
    gb = g_mat.sum(axis=0)
    gcol = g_mat @ w.reshape(cout, -1)
    gx = index.scatter(gcol, x_shape[0])
    return gx, gw, gb


def deconv3d_forward(x, w, b, stride, pad):
    """Transposed conv: x (Cin, xi, yi, zi), w (Cin, Cout, k0, k1, k2).

    Output spatial size is (in - 1) * stride - 2 * pad + kernel per axis.
    """
    cin, cout = w.shape[0], w.shape[1]
    k = w.shape[2:]
    big = tuple(
        (x.shape[1 + a] - 1) * stride[a] - 2 * pad[a] + k[a] for a in range(3)
    )
    index = _ConvIndex.get(big, k, stride, pad)
    if index.small != x.shape[1:]:
        raise ValueError(
            f"deconv input {x.shape[1:]} inconsistent with output {big}"
        )
    x_mat = x.reshape(cin, -1).T  # (n_small, Cin)
    g = x_mat @ w.reshape(cin, -1)  # (n_small, Cout*K), site-major like gather()
    out = index.scatter(g, cout)
    return out + b[:, None, None, None], (x_mat, w, index, big)


def deconv3d_backward(grad, cache):
    x_mat, w, index, big = cache
    cin, cout = w.shape[0], w.shape[1]
    col = index.gather(grad)  # (n_small, Cout*K)
    gx = (col @ w.reshape(cin, -1).T).T.reshape((cin,) + index.small)
    gw = (x_mat.T @ col).reshape(w.shape)
    gb = grad.sum(axis=(1, 2, 3))
    return gx, gw, gb


# ---------------------------------------------------------------------------
# causal multi-head attention over the time axis


def causal_attention_forward(x, w_qkv, b_qkv, w_out, b_out, heads):
    """x (P, T, E): independent causal attention over T for each row of P.

    Returns (out, cache, attn) where attn is (P, heads, T, T).
    """
    p, t, e = x.shape
    dh = e // heads
    qkv = x @ w_qkv + b_qkv  # (P, T, 3E)
    q, k, v = np.split(qkv, 3, axis=-1)

    def heads_view(a):
        return a.reshape(p, t, heads, dh).transpose(0, 2, 1, 3)

    qh, kh, vh = heads_view(q), heads_view(k), heads_view(v)
    scores = qh @ kh.transpose(0, 1, 3, 2) / np.sqrt(dh)
    mask = np.triu(np.ones((t, t), dtype=bool), k=1)
    scores[:, :, mask] = -np.inf
    attn = softmax(scores, axis=-1)
    ctx = attn @ vh  # (P, H, T, dh)
    merged = ctx.transpose(0, 2, 1, 3).reshape(p, t, e)
    out = merged @ w_out + b_out
    cache = (x, w_qkv, w_out, qh, kh, vh, attn, merged, heads)
    return out, cache, attn


def causal_attention_backward(grad, cache):
    x, w_qkv, w_out, qh, kh, vh, attn, merged, heads = cache
    p, t, e = x.shape
    dh = e // heads
    g_merged = grad @ w_out.T
    gw_out = merged.reshape(-1, e).T @ grad.reshape(-1, e)
    gb_out = grad.reshape(-1, e).sum(axis=0)

    g_ctx = g_merged.reshape(p, t, heads, dh).transpose(0, 2, 1, 3)
    g_attn = g_ctx @ vh.transpose(0, 1, 3, 2)
    g_vh = attn.transpose(0, 1, 3, 2) @ g_ctx
    # softmax backward per row; masked entries have attn == 0 so they vanish.
    g_scores = attn * (g_attn - (g_attn * attn).sum(axis=-1, keepdims=True))
    g_scores /= np.sqrt(dh)
    g_qh = g_scores @ kh
    g_kh = g_scores.transpose(0, 1, 3, 2) @ qh

    def merge_heads(a):
        return a.transpose(0, 2, 1, 3).reshape(p, t, e)

    g_qkv = np.concatenate([merge_heads(g_qh), merge_heads(g_kh), merge_heads(g_vh)], axis=-1)
    gx = g_qkv @ w_qkv.T
    gw_qkv = x.reshape(-1, e).T @ g_qkv.reshape(-1, 3 * e)
    gb_qkv = g_qkv.reshape(-1, 3 * e).sum(axis=0)
    return gx, gw_qkv, gb_qkv, gw_out, gb_out


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction over a dict of parameter arrays."""

    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict) -> None:
        self.step_count += 1
        b1t = 1.0 - self.beta1**self.step_count
        b2t = 1.0 - self.beta2**self.step_count
        for key, g in grads.items():
            if g is None:
                continue
            self.m[key] = self.beta1 * self.m[key] + (1.0 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1.0 - self.beta2) * g * g
            mhat = self.m[key] / b1t
            vhat = self.v[key] / b2t
            self.params[key] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def he_init(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
