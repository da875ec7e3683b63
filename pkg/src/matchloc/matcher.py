"""Sparse-3D-to-dense-2D matching, coarse to fine.

Coarse stage: self/cross attention over 3D descriptors and the stride-8
feature grid, correlation + MLP + sigmoid scores, mutual-nearest selection
above a threshold.  Fine stage: a 7x7 stride-4 patch around each coarse
match, one attention block, and a softmax spatial expectation for sub-pixel
refinement.  Ground-truth score matrices come from projecting the 3D points
with the true pose and rejecting occlusions against clean depth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .geometry import Intrinsics, Pose, project
from .tensor import Tensor, as_tensor, concatenate, gather_rows, tensor

FINE_PATCH = 7
FINE_RADIUS = FINE_PATCH // 2


@dataclass
class ScoreMatrix:
    scores: Tensor          # (N, HW) in (0, 1)
    grid_hw: tuple[int, int]
    tau: float = 0.5


@dataclass
class GtScoreMatrix:
    labels: np.ndarray      # (N, HW) binary, at most one positive per row
    valid: np.ndarray       # (N,) in-frustum with consistent depth
    cell_idx: np.ndarray    # (N,) positive cell or -1
    proj_px: np.ndarray     # (N, 2) full-res sub-pixel projections
    grid_hw: tuple[int, int]


@dataclass
class MatchSet:
    point_idx: np.ndarray   # (M,)
    cell_idx: np.ndarray    # (M,)
    scores: np.ndarray      # (M,) descending
    grid_hw: tuple[int, int]
    refined_px: np.ndarray | None = None  # (M, 2) after fine refinement

    def __len__(self):
        return len(self.point_idx)

    def pairs(self) -> set[tuple[int, int]]:
        return {(int(i), int(j)) for i, j in zip(self.point_idx, self.cell_idx)}


def sinusoidal_grid_encoding(h: int, w: int, c: int) -> np.ndarray:
    """Fixed 2D positional encoding for an h*w token grid, (h*w, c)."""
    if c % 4 != 0:
        raise ValueError("channel count must be divisible by 4")
    quarter = c // 4
    freqs = 1.0 / (50.0 ** (np.arange(quarter) / max(quarter, 1)))
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    xs = xs.reshape(-1, 1) * freqs[None, :]
    ys = ys.reshape(-1, 1) * freqs[None, :]
    return np.concatenate([np.sin(xs), np.cos(xs), np.sin(ys), np.cos(ys)],
                          axis=1).astype(np.float32)


def init_matcher(store: nn.ParamStore, rng: np.random.Generator):
    meta = store.meta
    channels = meta["backbone_channels"]
    c_c, c_f = meta["c_coarse"], meta["c_fine"]
    nn.init_affine(store, "match.proj2d.coarse", channels[2], c_c, rng)
    nn.init_affine(store, "match.proj2d.fine", channels[1], c_f, rng)
    # tie the 2D projections to the image-feature rows of the 3D lift maps:
    # both sides then start in the same projected feature space and raw
    # correlation carries signal from step one instead of after the two
    # random maps have been aligned by training
    if "lift.coarse.w" in store:
        store["match.proj2d.coarse.w"].data[:] = store["lift.coarse.w"].data[3:, :]
        store["match.proj2d.fine.w"].data[:] = store["lift.fine.w"].data[3:, :]
    # zero-initialized output projections make every block start as the
    # identity, which keeps deep residual stacks stable from step one
    for blk in range(meta["coarse_blocks"]):
        for name in ("self3", "self2", "cross3", "cross2"):
            nn.init_attention(store, f"match.coarse.b{blk}.{name}", c_c, rng,
                              zero_out_proj=True)
    for name in ("selfp", "cross3", "crossp"):
        nn.init_attention(store, f"match.fine.b0.{name}", c_f, rng, zero_out_proj=True)
    for prefix, c in (("match.coarse.score", c_c), ("match.fine.score", c_f)):
        # start as a positive-part dot product: identity first layer, ones
        # readout scaled so unit-RMS tokens give logits in a useful range
        nn.init_mlp(store, prefix, [c, c, 1], rng)
        store[f"{prefix}.l0.w"].data[:] = np.eye(c, dtype=np.float32)
        store[f"{prefix}.l0.b"].data[:] = 0.0
        store[f"{prefix}.l1.w"].data[:] = 4.0 / c
        store[f"{prefix}.l1.b"].data[:] = -2.0
    meta["score_widths"] = {"coarse": [c_c, c_c, 1], "fine": [c_f, c_f, 1]}


def project_2d_descriptors(store: nn.ParamStore, feature_map: Tensor, level_key: str,
                           add_position: bool = True) -> Tensor:
    """Feature map -> token matrix (HW, C) with optional 2D sinusoidal PE.

    Tokens are RMS-normalized before the encoding is added so position and
    content enter at comparable scale.
    """
    h, w, _ = feature_map.shape
    c = store.meta[f"c_{level_key}"]
    tokens = nn.affine(store, f"match.proj2d.{level_key}",
                       feature_map.reshape(h * w, feature_map.shape[-1]))
    tokens = nn.rms_normalize(tokens)
    if add_position:
        tokens = tokens + sinusoidal_grid_encoding(h, w, c)
    return tokens


def coarse_transform(store: nn.ParamStore, d3d: Tensor, d2d: Tensor
                     ) -> tuple[Tensor, Tensor]:
    """Interleaved residual self- and cross-attention over both token sets.

    Tokens are RMS-normalized on entry: the 3D descriptors arrive orders of
    magnitude smaller than the position-encoded 2D tokens, and correlation
    scoring needs both at unit scale.
    """
    meta = store.meta
    heads = meta["heads"]
    d3, d2 = nn.rms_normalize(as_tensor(d3d)), nn.rms_normalize(as_tensor(d2d))
    for blk in range(meta["coarse_blocks"]):
        p = f"match.coarse.b{blk}"
        d3 = d3 + nn.multi_head_attention(store, f"{p}.self3", d3, d3, d3, heads)[0]
        d2 = d2 + nn.multi_head_attention(store, f"{p}.self2", d2, d2, d2, heads)[0]
        d3 = d3 + nn.multi_head_attention(store, f"{p}.cross3", d3, d2, d2, heads)[0]
        d2 = d2 + nn.multi_head_attention(store, f"{p}.cross2", d2, d3, d3, heads)[0]
    return d3, d2


def coarse_score(store: nn.ParamStore, d3d: Tensor, d2d: Tensor,
                 grid_hw: tuple[int, int], tau: float = 0.5,
                 tile: int | None = None) -> ScoreMatrix:
    """sigmoid(mlp(correlation tensor)) over all (point, cell) pairs.

    `tile` bounds the number of 3D rows expanded at once; tiled and full
    evaluations are numerically identical because every op is row-wise.
    """
    c = d3d.shape[-1]
    widths = store.meta["score_widths"]["coarse"]
    n = d3d.shape[0]
    hw = d2d.shape[0]
    tiles = []
    step = tile or n
    for start in range(0, n, step):
        block = d3d[start : start + step, :]
        corr = block.reshape(block.shape[0], 1, c) * d2d.reshape(1, hw, c)
        logits = nn.mlp_forward(store, "match.coarse.score", corr, widths)
        tiles.append(logits.reshape(block.shape[0], hw))
    logits = tiles[0] if len(tiles) == 1 else concatenate(tiles, axis=0)
    return ScoreMatrix(logits.sigmoid(), grid_hw, tau)


def select_matches(score: ScoreMatrix) -> MatchSet:
    """Mutual-nearest pairs above tau, sorted by descending score.

    Argmax ties break toward the smaller index; the result is bijective in
    both point and cell indices.
    """
    s = np.asarray(score.scores.data, dtype=np.float64)
    best_cell = np.argmax(s, axis=1)
    best_point = np.argmax(s, axis=0)
    points = np.arange(s.shape[0])
    mutual = best_point[best_cell] == points
    keep = mutual & (s[points, best_cell] > score.tau)
    pts = points[keep]
    cells = best_cell[keep]
    vals = s[pts, cells]
    order = np.lexsort((pts, -vals))
    return MatchSet(pts[order], cells[order], vals[order], score.grid_hw)


def gt_score_matrix(points3d: np.ndarray, gt_pose: Pose, intr: Intrinsics,
                    gt_depth: np.ndarray, coarse_stride: int,
                    rel_depth_tol: float = 0.05) -> GtScoreMatrix:
    """Binary labels from ground-truth projection with occlusion rejection.

    A row gets its single positive at the coarse cell containing the
    projection iff the point lands in the frustum and its camera depth
    matches the clean depth map within `rel_depth_tol` relative error;
    otherwise the row is all-negative and flagged invalid.
    """
    pts = np.atleast_2d(points3d)
    h, w = gt_depth.shape
    gh, gw = h // coarse_stride, w // coarse_stride
    pix, z, in_f = project(gt_pose, intr, pts)
    ui = np.clip(np.round(pix[:, 0]).astype(np.int64), 0, w - 1)
    vi = np.clip(np.round(pix[:, 1]).astype(np.int64), 0, h - 1)
    d = gt_depth[vi, ui]
    consistent = in_f & (np.abs(z - d) < rel_depth_tol * np.maximum(z, 1e-9))
    cu = np.minimum((pix[:, 0] // coarse_stride).astype(np.int64), gw - 1)
    cv = np.minimum((pix[:, 1] // coarse_stride).astype(np.int64), gh - 1)
    cell = np.where(consistent, cv * gw + cu, -1)
    labels = np.zeros((len(pts), gh * gw), dtype=np.float32)
    rows = np.nonzero(consistent)[0]
    labels[rows, cell[rows]] = 1.0
    return GtScoreMatrix(labels, consistent, cell, pix, (gh, gw))


def _patch_indices(cells: np.ndarray, grid_hw: tuple[int, int],
                   coarse_stride: int, fine_stride: int,
                   fine_hw: tuple[int, int]):
    """Clamped 7x7 fine-cell windows around coarse cells.

    Returns flat fine-map indices (M, 49) and the window-center pixel
    coordinates (M, 2) at full resolution; windows near the border shift
    inward while coordinates stay absolute.
    """
    gh, gw = grid_hw
    fh, fw = fine_hw
    crow, ccol = cells // gw, cells % gw
    center_px = np.stack([(ccol + 0.5) * coarse_stride - 0.5,
                          (crow + 0.5) * coarse_stride - 0.5], axis=1)
    fine_coord = (center_px - (fine_stride - 1) / 2.0) / fine_stride
    cu = np.clip(np.round(fine_coord[:, 0]).astype(np.int64), FINE_RADIUS, fw - 1 - FINE_RADIUS)
    cv = np.clip(np.round(fine_coord[:, 1]).astype(np.int64), FINE_RADIUS, fh - 1 - FINE_RADIUS)
    offs = np.arange(-FINE_RADIUS, FINE_RADIUS + 1)
    ou, ov = np.meshgrid(offs, offs, indexing="xy")
    flat = (cv[:, None] + ov.reshape(-1)[None, :]) * fw + (cu[:, None] + ou.reshape(-1)[None, :])
    center_full = np.stack([cu * fine_stride + (fine_stride - 1) / 2.0,
                            cv * fine_stride + (fine_stride - 1) / 2.0], axis=1)
    return flat, center_full


def fine_refine(store: nn.ParamStore, matches: MatchSet, fine_d3d: Tensor,
                fine_map: Tensor, fine_stride: int, coarse_stride: int) -> dict:
    """Sub-pixel refinement of coarse matches via softmax spatial expectation.

    Returns the expectation (fine-cell units, Tensor for supervision), the
    refined full-resolution pixels, the patch-center pixels and the softmax
    correlation over the 49 patch cells.
    """
    if len(matches) == 0:
        raise ValueError("no matches to refine")
    meta = store.meta
    heads = meta["heads"]
    fh, fw, c = fine_map.shape
    flat_idx, center_px = _patch_indices(matches.cell_idx, matches.grid_hw,
                                         coarse_stride, fine_stride, (fh, fw))
    m = len(matches)
    patches = gather_rows(fine_map.reshape(fh * fw, c), flat_idx.reshape(-1))
    patches = patches.reshape(m, FINE_PATCH * FINE_PATCH, c)
    d3 = nn.rms_normalize(fine_d3d).reshape(m, 1, c)
    p = "match.fine.b0"
    patches = patches + nn.multi_head_attention(store, f"{p}.selfp", patches, patches,
                                                patches, heads)[0]
    d3 = d3 + nn.multi_head_attention(store, f"{p}.cross3", d3, patches, patches, heads)[0]
    patches = patches + nn.multi_head_attention(store, f"{p}.crossp", patches, d3, d3, heads)[0]
    corr = d3 * patches                                            # (M, 49, C)
    logits = nn.mlp_forward(store, "match.fine.score", corr,
                            store.meta["score_widths"]["fine"])
    s_fine = logits.reshape(m, FINE_PATCH * FINE_PATCH).softmax(axis=-1)
    offs = np.arange(-FINE_RADIUS, FINE_RADIUS + 1, dtype=np.float32)
    ou, ov = np.meshgrid(offs, offs, indexing="xy")
    grid = np.stack([ou.reshape(-1), ov.reshape(-1)], axis=1)      # (49, 2)
    expectation = (s_fine.reshape(m, -1, 1) * grid[None, :, :]).sum(axis=1)  # (M, 2)
    refined = center_px + expectation.data * fine_stride
    return {"expectation": expectation, "refined_px": refined,
            "center_px": center_px, "s_fine": s_fine}


def fine_gt_offsets(proj_px: np.ndarray, center_px: np.ndarray,
                    fine_stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth expectations in fine-cell units plus an in-window mask.

    Matches whose true projection falls outside the 7x7 window are excluded
    from supervision rather than clamped.
    """
    gt = (np.asarray(proj_px) - np.asarray(center_px)) / fine_stride
    in_window = np.all(np.abs(gt) <= FINE_RADIUS, axis=1)
    return gt, in_window


def matching_losses(score: ScoreMatrix, gt: GtScoreMatrix,
                    expectation: Tensor | None, gt_expectation: np.ndarray | None,
                    supervised: np.ndarray | None, alpha: float = 0.25,
                    gamma: float = 2.0, negative_row_weight: float = 1.0
                    ) -> tuple[Tensor, Tensor]:
    """Focal coarse loss plus L2 fine-expectation loss.

    Positive and negative cells are averaged separately and summed:
    positives are one cell in tens of thousands, and a single global mean
    collapses the matcher into predicting all-negative.  Rows without a
    valid ground-truth cell still provide negative supervision, weighted by
    `negative_row_weight`.  The fine loss averages only over supervised
    matches (true positives with in-window targets).
    """
    elems = nn.focal_loss_elements(score.scores, gt.labels, alpha=alpha, gamma=gamma)
    weights = np.broadcast_to(np.where(gt.valid[:, None], 1.0, negative_row_weight),
                              gt.labels.shape).astype(np.float32)
    pos = gt.labels > 0.5
    w_pos = weights * pos
    w_neg = weights * ~pos
    loss_coarse = (elems * w_pos).sum() * (1.0 / max(float(w_pos.sum()), 1.0)) \
        + (elems * w_neg).sum() * (1.0 / max(float(w_neg.sum()), 1.0))
    if expectation is None or gt_expectation is None or supervised is None \
            or int(np.sum(supervised)) == 0:
        return loss_coarse, tensor(0.0)
    sel = np.nonzero(supervised)[0]
    diff = expectation[sel, :] - gt_expectation[sel]
    loss_fine = (diff * diff).sum(axis=1).mean()
    return loss_coarse, loss_fine


def matching_iou(pred_pairs: set[tuple[int, int]], gt_pairs: set[tuple[int, int]]) -> float:
    """|intersection| / |union| at coarse-cell granularity; empty vs empty is 1."""
    if not pred_pairs and not gt_pairs:
        return 1.0
    union = pred_pairs | gt_pairs
    if not union:
        return 1.0
    return len(pred_pairs & gt_pairs) / len(union)
