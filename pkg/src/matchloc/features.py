"""2D feature pyramid and appearance adaptation.

The backbone is a small trainable CNN: three stride-2 blocks over the RGB
image give feature maps F1 (stride 2), F2 (stride 4) and F3 (stride 8);
F0 is the image itself.  Appearance adaptation decodes the difference of
channel statistics between a support image and the query into per-channel
scale/offset pairs applied to F0, F2 and F3 (never F1, which defines the
embedding).
"""

from __future__ import annotations

import numpy as np

from . import nn
from .tensor import Tensor, as_tensor, concatenate

# pyramid levels receiving appearance modulation, and the one providing the
# appearance embedding
MODULATED_LEVELS = (0, 2, 3)
EMBED_LEVEL = 1


def init_backbone(store: nn.ParamStore, rng: np.random.Generator,
                  channels: tuple[int, int, int] = (16, 32, 64)):
    cin = 3
    for lvl, cout in enumerate(channels, start=1):
        nn.init_conv2d_3x3(store, f"backbone.l{lvl}.conv1", cin, cout, rng)
        nn.init_conv2d_3x3(store, f"backbone.l{lvl}.conv2", cout, cout, rng)
        cin = cout
    store.meta["backbone_channels"] = list(channels)


def extract_pyramid(store: nn.ParamStore, image: np.ndarray | Tensor) -> dict[int, Tensor]:
    """F0 (the image) plus stride-2/4/8 feature maps from conv blocks."""
    img = as_tensor(image)
    if img.shape[0] < 16 or img.shape[1] < 16:
        raise ValueError("image smaller than 16 pixels per side")
    pyramid = {0: img}
    x = img
    for lvl in range(1, 4):
        x = nn.conv2d_3x3(store, f"backbone.l{lvl}.conv1", x, stride=2).relu()
        x = nn.conv2d_3x3(store, f"backbone.l{lvl}.conv2", x, stride=1).relu()
        pyramid[lvl] = x
    return pyramid


def appearance_embedding(pyramid: dict[int, Tensor]) -> Tensor:
    """Channel-wise mean and std of F1, concatenated (length 2*C1)."""
    f1 = pyramid[EMBED_LEVEL]
    h, w, c = f1.shape
    flat = f1.reshape(h * w, c)
    mean = flat.mean(axis=0)
    var = ((flat - mean.reshape(1, c)) ** 2).mean(axis=0)
    std = (var + 1e-8).sqrt()
    return concatenate([mean, std], axis=0)


def init_appearance(store: nn.ParamStore, rng: np.random.Generator,
                    channels: tuple[int, int, int], delta_dim: int = 32):
    c1 = channels[0]
    level_channels = {0: 3, 2: channels[1], 3: channels[2]}
    widths = [2 * c1, 2 * delta_dim, delta_dim]
    # zero-initialized last layer: delta is exactly 0 at init, so gamma/beta
    # start as the identity regardless of the inputs
    nn.init_mlp(store, "appear.delta", widths, rng, zero_last=True)
    for lvl, c in level_channels.items():
        nn.init_affine(store, f"appear.head{lvl}.gamma", delta_dim, c, rng)
        nn.init_affine(store, f"appear.head{lvl}.beta", delta_dim, c, rng)
    store.meta["appear_delta_widths"] = widths
    store.meta["appear_level_channels"] = {str(k): v for k, v in level_channels.items()}


def appearance_delta(store: nn.ParamStore, target_emb: Tensor,
                     support_emb: Tensor) -> dict[int, tuple[Tensor, Tensor]]:
    """Per-level (gamma, beta) decoded from the embedding difference.

    gamma = 1 + head(delta) and beta = head(delta) with zero-initialized
    biases, so matched styles produce the exact identity at initialization.
    """
    widths = store.meta["appear_delta_widths"]
    diff = as_tensor(support_emb) - as_tensor(target_emb)
    delta = nn.mlp_forward(store, "appear.delta", diff, widths)
    out = {}
    for lvl_str in store.meta["appear_level_channels"]:
        lvl = int(lvl_str)
        gamma = nn.affine(store, f"appear.head{lvl}.gamma", delta) + 1.0
        beta = nn.affine(store, f"appear.head{lvl}.beta", delta)
        out[lvl] = (gamma, beta)
    return out


def modulate(feature_map: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel affine restyling: gamma * F + beta."""
    feature_map = as_tensor(feature_map)
    c = feature_map.shape[-1]
    if gamma.shape[-1] != c or beta.shape[-1] != c:
        raise ValueError("modulation vectors do not match channel count")
    return feature_map * gamma.reshape(1, 1, c) + beta.reshape(1, 1, c)


def modulated_pyramid(store: nn.ParamStore, pyramid: dict[int, Tensor],
                      deltas: dict[int, tuple[Tensor, Tensor]] | None) -> dict[int, Tensor]:
    """Apply appearance adaptation to F0/F2/F3; F1 always passes through."""
    if deltas is None:
        return dict(pyramid)
    out = dict(pyramid)
    for lvl in MODULATED_LEVELS:
        gamma, beta = deltas[lvl]
        out[lvl] = modulate(pyramid[lvl], gamma, beta)
    return out


def embed_image(store: nn.ParamStore, image: np.ndarray) -> np.ndarray:
    """Appearance embedding of an image as a plain vector (retrieval use)."""
    from .tensor import no_grad

    with no_grad():
        emb = appearance_embedding(extract_pyramid(store, image))
    return np.asarray(emb.data, dtype=np.float64)
