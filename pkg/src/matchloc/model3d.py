"""Support-conditioned neural 3D model.

Support frames are lifted to neural support points (position, feature,
confidence, viewing direction).  Descriptors for arbitrary query points
combine a visibility-weighted multiview aggregate with attention over the
K nearest support points; the local term is

    f(x) = sum_k w_k * f'_k / K,   w = w_attention * w_inv_dist * confidence.

Two descriptor heads share the machinery: the coarse head reads the image
pyramid at (F0, F3), the fine head at (F0, F2).  The fine head also feeds a
small volume-rendering head used for the auxiliary photometric and depth
losses, and an optional coordinate-residual prior adds per-scene features
during scene-specific finetuning.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import features as feat
from . import nn
from .geometry import Intrinsics, Pose, project, unproject
from .scene import FusedDepth, SupportFrame, warp_and_fuse_depth
from .spatial import GridIndex
from .tensor import Tensor, concatenate, gather_rows, tensor

LEVELS = {"coarse": {"pyramid": 3, "stride": 8},
          "fine": {"pyramid": 2, "stride": 4}}

CONFIDENCE_REL_SCALE = 0.05  # one e-fold of confidence per 5% raw/fused gap


class DisabledPriorError(RuntimeError):
    """coord_residual was called while the scene prior is disabled."""


@dataclass
class NeuralSupportPoints:
    positions: np.ndarray    # (N, 3) world meters
    features: Tensor         # (N, C)
    confidences: np.ndarray  # (N,) in [0, 1]
    view_dirs: np.ndarray    # (N, 3) unit camera-to-point directions
    frame_idx: np.ndarray    # (N,) source frame per point

    def __len__(self):
        return len(self.positions)


@dataclass
class AggregationIntermediates:
    multiview: Tensor        # (N, C) visibility-aggregated feature
    correlated: Tensor       # (N, K, C) attention-transformed neighbor values
    w_attention: Tensor      # (N, K) head-averaged attention weights
    w_distance: np.ndarray   # (N, K) normalized inverse-distance weights
    w_final: Tensor          # (N, K) elementwise product with confidences


@dataclass
class ConditionalModel:
    """Frozen per-query scene model; all queries are read-only."""

    frames: list[SupportFrame]
    pyramids: list[dict[int, Tensor]]
    fused: list[FusedDepth]
    points: dict[str, NeuralSupportPoints]
    knn: GridIndex
    bounds: np.ndarray
    k_neighbors: int
    prior_enabled: bool = False
    query_pyramid: dict[int, Tensor] | None = None
    # per pyramid level, all frames' maps stacked along rows: (V*Hl, Wl, C);
    # one bilinear gather then serves every frame at once
    stacked_maps: dict[int, Tensor] = field(default_factory=dict)

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.bounds[1] - self.bounds[0]))

    def sample_stacked(self, level: int, frame_rows: np.ndarray,
                       pixels: np.ndarray) -> Tensor:
        """Bilinear samples of `level` for (frame index, full-res pixel) pairs."""
        return sample_frame_level(self.stacked_maps[level], len(self.frames), level,
                                  frame_rows, pixels)


def _arch(store: nn.ParamStore) -> dict:
    return store.meta


def init_model3d(store: nn.ParamStore, rng: np.random.Generator):
    """Register lifting, visibility, aggregation and rendering parameters."""
    meta = store.meta
    channels = meta["backbone_channels"]
    heads = meta["heads"]
    for key, spec in LEVELS.items():
        c = meta[f"c_{key}"]
        c_pyr = channels[spec["pyramid"] - 1]
        nn.init_affine(store, f"lift.{key}", 3 + c_pyr, c, rng)
        # raw RGB rows start strong relative to the small conv features
        # and would drown the view-invariant content; damp them at init
        store[f"lift.{key}.w"].data[:3, :] *= 0.25
        mv_in = 2 * (3 + c_pyr) + 1
        nn.init_mlp(store, f"agg.{key}.mv", [mv_in, meta["mv_hidden"], c], rng)
        nn.init_attention(store, f"agg.{key}.local", c, rng)
        # identity value/output paths: descriptors start as weighted means of
        # lifted features, in the same space the 2D projection is tied to
        store[f"agg.{key}.local.wv.w"].data[:] = np.eye(c, dtype=np.float32)
        store[f"agg.{key}.local.wv.b"].data[:] = 0.0
        store[f"agg.{key}.local.wo.w"].data[:] = np.eye(c, dtype=np.float32)
        store[f"agg.{key}.local.wo.b"].data[:] = 0.0
        # no bias: a constant shift over all keys cancels in the softmax
        nn.init_affine(store, f"agg.{key}.relpos", 3 * 2 * meta["pe_freqs_rel"], c,
                       rng, bias=False)
        assert c % heads == 0
    store.add("vis.b", np.array(0.1))
    # softplus(s_raw) ~ 0.25 relative depth units at init
    store.add("vis.s_raw", np.array(np.log(np.expm1(0.25))))
    c_fine = meta["c_fine"]
    render_in = c_fine + 3 * 2 * meta["pe_freqs_dir"]
    nn.init_mlp(store, "render.head", [render_in, meta["render_hidden"], 4], rng)


def init_coord_prior(store: nn.ParamStore, rng: np.random.Generator):
    """Register the per-scene coordinate-residual MLPs (zero-init output)."""
    meta = store.meta
    pe_in = 3 * 2 * meta["pe_freqs_coord"]
    for key in LEVELS:
        nn.init_mlp(store, f"prior.{key}", [pe_in, meta["prior_hidden"], meta[f"c_{key}"]],
                    rng, zero_last=True)
    meta["prior_registered"] = True


def level_map_coords(pixels: np.ndarray, stride: int) -> np.ndarray:
    """Full-resolution pixel coords -> feature-map coords at a given stride.

    Cell j of a stride-s map covers pixels [j*s, (j+1)*s); its center sits at
    j*s + (s-1)/2.
    """
    return (np.asarray(pixels, dtype=np.float64) - (stride - 1) / 2.0) / stride


def build_stacked_maps(pyramids: list[dict[int, Tensor]]) -> dict[int, Tensor]:
    """Row-stack each pyramid level across frames for one-shot sampling."""
    out = {}
    for level in pyramids[0]:
        maps = [p[level] for p in pyramids]
        out[level] = maps[0] if len(maps) == 1 else concatenate(maps, axis=0)
    return out


def sample_frame_level(stacked: Tensor, num_frames: int, level: int,
                       frame_rows: np.ndarray, pixels: np.ndarray) -> Tensor:
    """Bilinear samples from a row-stacked level map.

    Coordinates are clamped inside each frame's band before the row offset,
    so samples never bleed across frames (the boundary corner read carries
    exactly zero weight).
    """
    stride = 1 if level == 0 else 2 ** level
    coords = np.asarray(pixels, dtype=np.float64) if level == 0 \
        else level_map_coords(pixels, stride)
    hl = stacked.shape[0] // num_frames
    wl = stacked.shape[1]
    u = np.clip(coords[:, 0], 0.0, wl - 1.0)
    v = np.clip(coords[:, 1], 0.0, hl - 1.0) + frame_rows * hl
    return nn.bilinear_sample(stacked, np.stack([u, v], axis=1))


def lift_support_points(store: nn.ParamStore, frames: list[SupportFrame],
                        pyramids: list[dict[int, Tensor]], fused: list[FusedDepth],
                        stride: int, bounds: np.ndarray | None = None,
                        stacked: dict[int, Tensor] | None = None
                        ) -> dict[str, NeuralSupportPoints]:
    """Unproject valid raw depths on a stride grid into neural support points.

    Confidence decays by one e-fold per 5% disagreement between raw and
    fused depth (0.5 where fusion is invalid).  Points leaving the expanded
    scene bounds (noisy depth) are dropped so downstream queries stay inside
    the box.  Returns one point set per descriptor level; positions,
    confidences and directions are shared, features differ.

    Raises ValueError when no frame has a single valid depth.
    """
    if stacked is None:
        stacked = build_stacked_maps(pyramids)
    pos_parts, conf_parts, dir_parts, fidx_parts, pix_parts = [], [], [], [], []
    for i, (frame, fus) in enumerate(zip(frames, fused)):
        h, w = frame.hw
        vs, us = np.meshgrid(np.arange(0, h, stride), np.arange(0, w, stride),
                             indexing="ij")
        vs, us = vs.ravel(), us.ravel()
        d_raw = frame.depth[vs, us]
        keep = d_raw > 0
        if not np.any(keep):
            continue
        vs, us, d_raw = vs[keep], us[keep], d_raw[keep]
        pixels = np.stack([us, vs], axis=1).astype(np.float64)
        pts = unproject(frame.pose, frame.intr, pixels, d_raw.astype(np.float64))
        if bounds is not None:
            margin = 0.01 * (bounds[1] - bounds[0])
            inside = np.all((pts >= bounds[0] - margin) & (pts <= bounds[1] + margin),
                            axis=1)
            if not np.any(inside):
                continue
            pts, pixels, vs, us, d_raw = (pts[inside], pixels[inside], vs[inside],
                                          us[inside], d_raw[inside])
        d_fus = fus.depth[vs, us].astype(np.float64)
        fus_ok = fus.valid[vs, us]
        conf = np.where(
            fus_ok,
            np.exp(-np.abs(d_raw - d_fus) / (CONFIDENCE_REL_SCALE * np.maximum(d_fus, 1e-9))),
            0.5)
        dirs = pts - frame.pose.center
        dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        pos_parts.append(pts)
        conf_parts.append(conf)
        dir_parts.append(dirs)
        fidx_parts.append(np.full(len(pts), i, dtype=np.int64))
        pix_parts.append(pixels)
    if not pos_parts:
        raise ValueError("no valid depths to lift")
    positions = np.concatenate(pos_parts)
    conf = np.concatenate(conf_parts)
    dirs = np.concatenate(dir_parts)
    fidx = np.concatenate(fidx_parts)
    pixels_all = np.concatenate(pix_parts)
    n_frames = len(frames)
    out = {}
    for key, spec in LEVELS.items():
        rgb = sample_frame_level(stacked[0], n_frames, 0, fidx, pixels_all)
        lvl = sample_frame_level(stacked[spec["pyramid"]], n_frames, spec["pyramid"],
                                 fidx, pixels_all)
        feats = nn.affine(store, f"lift.{key}", concatenate([rgb, lvl], axis=-1))
        out[key] = NeuralSupportPoints(positions, feats, conf, dirs, fidx)
    return out


def visibility(store: nn.ParamStore, query_points: np.ndarray,
               frames: list[SupportFrame], fused: list[FusedDepth]) -> Tensor:
    """Per (query, frame) visibility likelihood in [0, 1].

    A soft depth test against the fused map: sigmoid((d_fused - z + b) /
    (s * z)) with trainable scalars b and softplus-positive s; exact zero
    outside the frustum or where fusion is invalid.
    """
    pts = np.atleast_2d(query_points)
    d_list, z_list, m_list = [], [], []
    for frame, fus in zip(frames, fused):
        pix, z, in_f = project(frame.pose, frame.intr, pts)
        ui = np.clip(np.round(pix[:, 0]).astype(np.int64), 0, frame.intr.width - 1)
        vi = np.clip(np.round(pix[:, 1]).astype(np.int64), 0, frame.intr.height - 1)
        d_f = fus.depth[vi, ui].astype(np.float64)
        ok = in_f & fus.valid[vi, ui]
        d_list.append(d_f)
        z_list.append(z)
        m_list.append(ok)
    d_f = np.stack(d_list, axis=1)
    z = np.stack(z_list, axis=1)
    mask = np.stack(m_list, axis=1)
    z_safe = np.where(mask & (z > 1e-9), z, 1.0)
    s = store["vis.s_raw"].softplus()
    logits = (tensor(d_f - z_safe) + store["vis.b"]) / (s * tensor(z_safe))
    return logits.sigmoid() * mask.astype(np.float32)


def aggregate_multiview(store: nn.ParamStore, query_points: np.ndarray,
                        model: "ConditionalModel", vis: Tensor, level_key: str) -> Tensor:
    """Visibility-weighted mean/variance of projected features, then an MLP.

    Queries no frame sees get zero statistics and a raised zero-evidence
    flag channel instead of silent zeros.
    """
    pts = np.atleast_2d(query_points)
    n = len(pts)
    v = len(model.frames)
    spec = LEVELS[level_key]
    pix_all = np.concatenate([project(f.pose, f.intr, pts)[0] for f in model.frames])
    rows = np.repeat(np.arange(v), n)
    rgb = model.sample_stacked(0, rows, pix_all)
    lvl = model.sample_stacked(spec["pyramid"], rows, pix_all)
    feats = concatenate([rgb, lvl], axis=-1)
    cin = feats.shape[-1]
    feats = feats.reshape(v, n, cin).transpose(1, 0, 2)   # (N, V, Cin)
    total = vis.sum(axis=1, keepdims=True)                # (N, 1)
    wn = vis / total.clip(1e-8)                           # zero rows stay zero
    mu = (feats * wn.reshape(*wn.shape, 1)).sum(axis=1)   # (N, Cin)
    centered = feats - mu.reshape(n, 1, cin)
    var = (centered * centered * wn.reshape(*wn.shape, 1)).sum(axis=1)
    flag = (total.data < 1e-8).astype(np.float32)         # (N, 1)
    meta = store.meta
    mv_in = concatenate([mu, var, tensor(flag)], axis=-1)
    widths = [mv_in.shape[-1], meta["mv_hidden"], meta[f"c_{level_key}"]]
    return nn.mlp_forward(store, f"agg.{level_key}.mv", mv_in, widths)


def aggregate_local(store: nn.ParamStore, multiview: Tensor, neighbor_feats: Tensor,
                    confidences: np.ndarray, distances: np.ndarray,
                    rel_positions: np.ndarray, level_key: str, pos_scale: float
                    ) -> tuple[Tensor, AggregationIntermediates]:
    """Attention over the K nearest support points and the final mixture.

    Keys receive a relative-position encoding; attention weights (averaged
    over heads) are combined with normalized inverse-distance weights and
    point confidences, and the descriptor is sum_k w_k f'_k / K.
    """
    meta = store.meta
    heads = meta["heads"]
    c = meta[f"c_{level_key}"]
    n, k = confidences.shape
    rel = np.clip(rel_positions / max(pos_scale, 1e-9), -1.0, 1.0)
    rel_enc = nn.affine(store, f"agg.{level_key}.relpos",
                        nn.positional_encoding(tensor(rel), meta["pe_freqs_rel"]))
    keys_in = neighbor_feats + rel_enc
    prefix = f"agg.{level_key}.local"
    d = c // heads
    q = nn.affine(store, prefix + ".wq", multiview).reshape(n, 1, heads, d).transpose(0, 2, 1, 3)
    kk = nn.affine(store, prefix + ".wk", keys_in).reshape(n, k, heads, d).transpose(0, 2, 1, 3)
    scores = (q @ kk.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(d))   # (N, h, 1, K)
    attn = scores.softmax(axis=-1)
    w_attention = attn.reshape(n, heads, k).mean(axis=1)           # (N, K)
    values = nn.affine(store, prefix + ".wo", nn.affine(store, prefix + ".wv", neighbor_feats))
    w_dist = 1.0 / (distances + 1e-6)
    w_dist = w_dist / w_dist.sum(axis=1, keepdims=True)
    w_final = w_attention * (w_dist * confidences).astype(np.float32)
    desc = (values * w_final.reshape(n, k, 1)).sum(axis=1) * (1.0 / k)
    inter = AggregationIntermediates(multiview, values, w_attention, w_dist, w_final)
    return desc, inter


def coord_residual(store: nn.ParamStore, query_points: np.ndarray,
                   bounds: np.ndarray, level_key: str, enabled: bool = True) -> Tensor:
    """Scene-specific residual from positionally encoded coordinates."""
    if not enabled or not store.meta.get("prior_registered"):
        raise DisabledPriorError("coordinate prior is disabled")
    meta = store.meta
    pts = np.atleast_2d(query_points)
    lo, hi = bounds[0], bounds[1]
    norm = 2.0 * (pts - lo) / np.maximum(hi - lo, 1e-9) - 1.0
    enc = nn.positional_encoding(tensor(np.clip(norm, -1.0, 1.0)), meta["pe_freqs_coord"])
    widths = [enc.shape[-1], meta["prior_hidden"], meta[f"c_{level_key}"]]
    return nn.mlp_forward(store, f"prior.{level_key}", enc, widths)


def query_descriptors(store: nn.ParamStore, model: ConditionalModel,
                      query_points: np.ndarray, level_key: str,
                      chunk: int = 16384) -> Tensor:
    """Descriptors for arbitrary 3D points through the full aggregation path."""
    pts = np.atleast_2d(np.asarray(query_points, dtype=np.float64))
    nsp = model.points[level_key]
    if len(nsp) == 0:
        raise ValueError("empty support point set")
    k = min(model.k_neighbors, len(nsp))
    pos_scale = 0.1 * model.diameter
    idx_all, dist_all = model.knn.query(pts, k)
    outs = []
    for start in range(0, len(pts), chunk):
        sub = pts[start : start + chunk]
        idx = idx_all[start : start + chunk]
        dist = dist_all[start : start + chunk]
        vis = visibility(store, sub, model.frames, model.fused)
        f_m = aggregate_multiview(store, sub, model, vis, level_key)
        neighbor_feats = gather_rows(nsp.features, idx.reshape(-1)).reshape(len(sub), k, -1)
        conf = nsp.confidences[idx]
        rel = nsp.positions[idx] - sub[:, None, :]
        desc, _ = aggregate_local(store, f_m, neighbor_feats, conf, dist, rel,
                                  level_key, pos_scale)
        if model.prior_enabled:
            desc = desc + coord_residual(store, sub, model.bounds, level_key)
        outs.append(desc)
    return outs[0] if len(outs) == 1 else concatenate(outs, axis=0)


# ---- volume rendering ----

def ray_box_near_far(origins: np.ndarray, dirs: np.ndarray, bounds: np.ndarray,
                     margin: float = 0.05) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-ray [near, far] from intersection with the expanded scene box."""
    ext = bounds[1] - bounds[0]
    lo = bounds[0] - margin * ext
    hi = bounds[1] + margin * ext
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    t0 = (lo[None, :] - origins) * inv
    t1 = (hi[None, :] - origins) * inv
    tmin = np.minimum(t0, t1).max(axis=1)
    tmax = np.maximum(t0, t1).min(axis=1)
    near = np.maximum(tmin, 1e-3)
    valid = tmax > near
    return near, np.maximum(tmax, near + 1e-6), valid


def render_rays(store: nn.ParamStore, model: ConditionalModel, origins: np.ndarray,
                dirs: np.ndarray, near: np.ndarray, far: np.ndarray,
                num_samples: int, jitter: np.ndarray | None = None) -> dict:
    """Alpha-composited color / expected depth / opacity along rays.

    Stratified samples (midpoints when `jitter` is None) are pushed through
    the fine descriptor head and a small MLP yielding softplus density and
    sigmoid color.  Returned depth is the expected hit parameter along the
    (unit) ray directions.
    """
    r = len(origins)
    s = num_samples
    offs = jitter if jitter is not None else np.full((r, s), 0.5)
    edges = np.arange(s, dtype=np.float64)[None, :]
    t_vals = near[:, None] + (edges + offs) * ((far - near)[:, None] / s)
    pts = origins[:, None, :] + t_vals[:, :, None] * dirs[:, None, :]
    desc = query_descriptors(store, model, pts.reshape(-1, 3), "fine")
    dir_enc = nn.positional_encoding(tensor(np.repeat(dirs, s, axis=0)),
                                     store.meta["pe_freqs_dir"])
    head_in = concatenate([desc, dir_enc], axis=-1)
    widths = [head_in.shape[-1], store.meta["render_hidden"], 4]
    raw = nn.mlp_forward(store, "render.head", head_in, widths)
    sigma = raw[:, 0:1].softplus().reshape(r, s)
    color = raw[:, 1:4].sigmoid().reshape(r, s, 3)

    deltas = np.diff(t_vals, axis=1)
    deltas = np.concatenate([deltas, (far[:, None] - t_vals[:, -1:])], axis=1)
    alpha = 1.0 - (-sigma * np.maximum(deltas, 1e-9).astype(np.float32)).exp()
    trans_log = (1.0 - alpha).clip(1e-7, 1.0).log().cumsum(axis=1)
    prev = concatenate([tensor(np.zeros((r, 1))), trans_log[:, :-1]], axis=1)
    weights = alpha * prev.exp()                                  # (R, S)
    rgb = (color * weights.reshape(r, s, 1)).sum(axis=1)          # (R, 3)
    acc = weights.sum(axis=1)                                     # (R,)
    depth = (weights * t_vals.astype(np.float32)).sum(axis=1) / acc.clip(1e-6)
    return {"rgb": rgb, "depth": depth, "opacity": acc, "weights": weights,
            "t_vals": t_vals}


def render_losses(rendered: dict, gt_rgb: np.ndarray, gt_depth_t: np.ndarray,
                  depth_valid: np.ndarray) -> tuple[Tensor, Tensor]:
    """L2 photometric loss and L1 loss on expected depth over valid rays.

    `gt_depth_t` must already be expressed as a distance along the (unit)
    ray, matching the renderer's depth parameterization; supervision against
    the clean ground-truth depth is what teaches the model to ignore noise
    in the raw support maps.
    """
    diff = rendered["rgb"] - np.asarray(gt_rgb, dtype=np.float32)
    loss_render = (diff * diff).mean()
    valid = np.asarray(depth_valid, dtype=bool)
    if valid.sum() == 0:
        return loss_render, tensor(0.0)
    dd = (rendered["depth"] - np.asarray(gt_depth_t, dtype=np.float32)).abs() \
        * valid.astype(np.float32)
    loss_depth = dd.sum() * (1.0 / int(valid.sum()))
    return loss_render, loss_depth


# ---- model assembly ----

def assemble_model(store: nn.ParamStore, supports: list[SupportFrame],
                   bounds: np.ndarray, query_image: np.ndarray | None = None,
                   adapt: bool = True, k_neighbors: int = 8, lift_stride: int = 2,
                   prior_enabled: bool = False) -> ConditionalModel:
    """Build the frozen conditional model for one query.

    When a query image is given and adaptation is on, support pyramids are
    restyled toward the query before lifting and aggregation.
    """
    raw_pyramids = [feat.extract_pyramid(store, f.image) for f in supports]
    query_pyramid = None
    if query_image is not None:
        query_pyramid = feat.extract_pyramid(store, query_image)
    if adapt and query_pyramid is not None:
        q_emb = feat.appearance_embedding(query_pyramid)
        pyramids = []
        for pyr in raw_pyramids:
            deltas = feat.appearance_delta(store, q_emb, feat.appearance_embedding(pyr))
            pyramids.append(feat.modulated_pyramid(store, pyr, deltas))
    else:
        pyramids = raw_pyramids
    fused = warp_and_fuse_depth(supports)
    stacked = build_stacked_maps(pyramids)
    points = lift_support_points(store, supports, pyramids, fused,
                                 lift_stride, bounds=bounds, stacked=stacked)
    knn = GridIndex(points["coarse"].positions)
    return ConditionalModel(frames=supports, pyramids=pyramids, fused=fused,
                            points=points, knn=knn, bounds=np.asarray(bounds, dtype=np.float64),
                            k_neighbors=k_neighbors, prior_enabled=prior_enabled,
                            query_pyramid=query_pyramid, stacked_maps=stacked)
