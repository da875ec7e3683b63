"""Trainable building blocks: parameter store, MLP, attention, losses, Adam.

Parameters live in a flat name->Tensor store so checkpointing can iterate
them; layers are plain functions that read their weights by name prefix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DEFAULT_DTYPE, Tensor, as_tensor, concatenate, gather_rows, pad2d, where


class MissingGradientError(KeyError):
    """A parameter in the store has no matching entry in the gradient dict."""


class ParamStore:
    """Named parameter tensors plus per-parameter Adam state."""

    def __init__(self, meta: dict | None = None):
        self.params: dict[str, Tensor] = {}
        self.moments1: dict[str, np.ndarray] = {}
        self.moments2: dict[str, np.ndarray] = {}
        self.step_count = 0
        self.meta = dict(meta or {})

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.asarray(value, dtype=DEFAULT_DTYPE), requires_grad=True)
        self.params[name] = t
        self.moments1[name] = np.zeros_like(t.data)
        self.moments2[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return sorted(self.params)

    def items(self):
        for name in self.names():
            yield name, self.params[name]

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def collect_grads(self) -> dict[str, np.ndarray]:
        """Gradients for every parameter; zeros where no path reached it."""
        out = {}
        for name, t in self.params.items():
            out[name] = np.zeros_like(t.data) if t.grad is None else t.grad
        return out

    def clone(self) -> "ParamStore":
        dup = ParamStore(meta=dict(self.meta))
        for name, t in self.params.items():
            dup.add(name, t.data.copy())
        return dup


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_affine(store: ParamStore, name: str, fan_in: int, fan_out: int,
                rng: np.random.Generator, zero: bool = False, bias: bool = True):
    if zero:
        w = np.zeros((fan_in, fan_out))
    else:
        w = glorot_uniform(rng, fan_in, fan_out, (fan_in, fan_out))
    store.add(name + ".w", w)
    if bias:
        store.add(name + ".b", np.zeros(fan_out))


def affine(store: ParamStore, name: str, x: Tensor) -> Tensor:
    out = as_tensor(x) @ store[name + ".w"]
    if name + ".b" in store:
        out = out + store[name + ".b"]
    return out


def init_mlp(store: ParamStore, prefix: str, widths: list[int],
             rng: np.random.Generator, zero_last: bool = False):
    """Register an MLP; `widths` runs input width through every layer."""
    for i in range(len(widths) - 1):
        last = i == len(widths) - 2
        init_affine(store, f"{prefix}.l{i}", widths[i], widths[i + 1], rng,
                    zero=zero_last and last)


def mlp_forward(store: ParamStore, prefix: str, x: Tensor, widths: list[int],
                activation: str = "relu") -> Tensor:
    """Alternating affine + activation; the final layer stays affine."""
    x = as_tensor(x)
    if x.shape[-1] != widths[0]:
        raise ValueError(f"mlp {prefix}: input width {x.shape[-1]} != {widths[0]}")
    n_layers = len(widths) - 1
    for i in range(n_layers):
        x = affine(store, f"{prefix}.l{i}", x)
        if i < n_layers - 1:
            if activation == "relu":
                x = x.relu()
            elif activation == "sigmoid":
                x = x.sigmoid()
            else:
                raise ValueError(f"unknown activation {activation}")
    return x


def init_attention(store: ParamStore, prefix: str, channels: int,
                   rng: np.random.Generator, zero_out_proj: bool = False):
    init_affine(store, f"{prefix}.wq", channels, channels, rng)
    # a key-projection bias shifts every score of a query equally and cancels
    # in the softmax, so it is omitted rather than left untrainable
    init_affine(store, f"{prefix}.wk", channels, channels, rng, bias=False)
    init_affine(store, f"{prefix}.wv", channels, channels, rng)
    init_affine(store, f"{prefix}.wo", channels, channels, rng, zero=zero_out_proj)


def multi_head_attention(store: ParamStore, prefix: str, query: Tensor, key: Tensor,
                         value: Tensor, heads: int) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention with output projection.

    Accepts (Q, C) / (K, C) token matrices or batched (B, Q, C) / (B, K, C).
    Returns (output, weights) where weights are the post-softmax attention
    maps of shape (..., heads, Q, K).
    """
    query, key, value = as_tensor(query), as_tensor(key), as_tensor(value)
    squeeze = query.ndim == 2
    if squeeze:
        query = query.reshape(1, *query.shape)
        key = key.reshape(1, *key.shape)
        value = value.reshape(1, *value.shape)
    b, nq, c = query.shape
    nk = key.shape[1]
    if c % heads != 0:
        raise ValueError(f"channels {c} not divisible by heads {heads}")
    d = c // heads

    def split_heads(t, n):
        return affine(store, f"{prefix}.{n}", t).reshape(b, -1, heads, d).transpose(0, 2, 1, 3)

    q = split_heads(query, "wq")
    k = split_heads(key, "wk")
    v = split_heads(value, "wv")
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(d))
    weights = scores.softmax(axis=-1)                     # (B, h, Q, K)
    mixed = (weights @ v).transpose(0, 2, 1, 3).reshape(b, nq, c)
    out = affine(store, f"{prefix}.wo", mixed)
    if squeeze:
        out = out.reshape(nq, c)
        weights = weights.reshape(heads, nq, nk)
    return out, weights


def rms_normalize(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Scale each token (last axis) to unit RMS; no learnable parameters.

    Descriptor magnitudes vary over orders of magnitude between the 3D
    aggregation output and 2D feature projections; matching attention and
    correlation need both sides at a comparable scale.
    """
    x = as_tensor(x)
    ms = (x * x).mean(axis=-1, keepdims=True)
    return x / (ms + eps).sqrt()


def positional_encoding(x, num_freqs: int) -> Tensor:
    """Concat of sin(2^l pi x) and cos(2^l pi x) for l = 0..num_freqs-1.

    Input shape (..., D) maps to (..., D * 2 * num_freqs); callers normalize
    x into [-1, 1] beforehand.
    """
    x = as_tensor(x)
    parts = []
    for l in range(num_freqs):
        scaled = x * float(2 ** l * np.pi)
        parts.append(scaled.sin())
        parts.append(scaled.cos())
    return concatenate(parts, axis=-1)


def focal_loss_elements(pred: Tensor, gt: np.ndarray, alpha: float = 0.25,
                        gamma: float = 2.0) -> Tensor:
    """Per-element focal terms -alpha_t (1 - p_t)^gamma log(p_t).

    Probabilities are clamped to [1e-6, 1 - 1e-6] before the log so saturated
    predictions stay finite.
    """
    pred = as_tensor(pred).clip(1e-6, 1.0 - 1e-6)
    pos = np.asarray(gt) > 0.5
    p_t = where(pos, pred, 1.0 - pred)
    alpha_t = np.where(pos, alpha, 1.0 - alpha).astype(np.float32)
    return (1.0 - p_t) ** gamma * p_t.log() * (-alpha_t)


def focal_loss(pred: Tensor, gt: np.ndarray, alpha: float = 0.25,
               gamma: float = 2.0, weights: np.ndarray | None = None) -> Tensor:
    """Focal loss over {0,1} targets, mean-reduced (weighted if given)."""
    elems = focal_loss_elements(pred, gt, alpha=alpha, gamma=gamma)
    if weights is None:
        return elems.mean()
    w = np.asarray(weights, dtype=elems.dtype)
    return (elems * w).sum() * (1.0 / max(float(w.sum()), 1e-12))


def adam_step(store: ParamStore, grads: dict[str, np.ndarray], lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
    """Bias-corrected Adam update applied in place; increments step count."""
    b1, b2 = betas
    store.step_count += 1
    t = store.step_count
    for name in store.names():
        if name not in grads:
            raise MissingGradientError(name)
        g = np.asarray(grads[name], dtype=DEFAULT_DTYPE)
        m = store.moments1[name]
        v = store.moments2[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        store.params[name].data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(DEFAULT_DTYPE)


@dataclass
class LossBreakdown:
    coarse: float
    fine: float
    render: float
    depth: float
    total: float

    @classmethod
    def from_parts(cls, coarse: float, fine: float, render: float, depth: float):
        return cls(coarse, fine, render, depth, coarse + fine + render + depth)


# ---- spatial sampling / convolution ----

def bilinear_sample(fmap: Tensor, uv: np.ndarray) -> Tensor:
    """Sample an (H, W, C) map at continuous pixel coords (N, 2) as (u, v).

    Integer coordinates address pixel centers; coords are clamped to the
    valid rectangle.  Differentiable w.r.t. the map, not the coords.  The
    four corner gathers are fused into one graph node so the backward pass
    scatters once.
    """
    fmap = as_tensor(fmap)
    h, w, c = fmap.shape
    uv = np.asarray(uv, dtype=np.float64)
    u = np.clip(uv[:, 0], 0.0, w - 1.0)
    v = np.clip(uv[:, 1], 0.0, h - 1.0)
    u0 = np.minimum(np.floor(u), w - 2 if w > 1 else 0).astype(np.int64)
    v0 = np.minimum(np.floor(v), h - 2 if h > 1 else 0).astype(np.int64)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = (u - u0).astype(fmap.dtype)[:, None]
    fv = (v - v0).astype(fmap.dtype)[:, None]
    idx = np.stack([v0 * w + u0, v0 * w + u1, v1 * w + u0, v1 * w + u1])  # (4, N)
    wts = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv),
                    (1 - fu) * fv, fu * fv])                              # (4, N, 1)

    flat = fmap.data.reshape(h * w, c)
    out = (flat[idx.reshape(-1)].reshape(4, -1, c) * wts).sum(axis=0)

    def bwd(g):
        from .tensor import scatter_rows_sum
        full = scatter_rows_sum(h * w, idx.reshape(-1),
                                (wts * g[None, :, :]).reshape(-1, c))
        return (full.reshape(h, w, c),)

    return Tensor._make(out, (fmap,), bwd)


_COL_INDEX_CACHE: dict[tuple, np.ndarray] = {}


def _im2col_indices(h: int, w: int, stride: int) -> tuple[np.ndarray, int, int]:
    """Flat gather indices into a zero-padded (h+2, w+2) map for 3x3 patches."""
    key = (h, w, stride)
    cached = _COL_INDEX_CACHE.get(key)
    ho = (h + stride - 1) // stride
    wo = (w + stride - 1) // stride
    if cached is None:
        wp = w + 2
        ys = np.arange(ho) * stride
        xs = np.arange(wo) * stride
        base = ys[:, None] * wp + xs[None, :]                     # (ho, wo)
        offs = (np.arange(3)[:, None] * wp + np.arange(3)[None, :]).reshape(-1)
        cached = (base.reshape(-1, 1) + offs[None, :]).reshape(-1)  # (ho*wo*9,)
        _COL_INDEX_CACHE[key] = cached
    return cached, ho, wo


def conv2d_3x3(store: ParamStore, name: str, x: Tensor, stride: int = 1) -> Tensor:
    """3x3 convolution with zero padding 1 over an (H, W, Cin) tensor."""
    x = as_tensor(x)
    h, w, cin = x.shape
    idx, ho, wo = _im2col_indices(h, w, stride)
    padded = pad2d(x, 1).reshape((h + 2) * (w + 2), cin)
    cols = gather_rows(padded, idx).reshape(ho * wo, 9 * cin)
    out = affine(store, name, cols)
    return out.reshape(ho, wo, -1)


def init_conv2d_3x3(store: ParamStore, name: str, cin: int, cout: int,
                    rng: np.random.Generator):
    init_affine(store, name, 9 * cin, cout, rng)
