"""Two-stage training, localization, evaluation, augmentation, checkpoints.

Training follows a multi-scene pretrain then per-scene finetune schedule; a
step picks a target frame, restyles and assembles the conditional model
from selected support frames, and descends the four-term loss (coarse
matching, fine refinement, photometric rendering, depth recovery).
Localization matches sampled 3D points against the query image coarse to
fine and solves PnP inside RANSAC.
"""

from __future__ import annotations

import json
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import features as feat
from . import matcher as mt
from . import model3d as m3d
from . import nn
from .geometry import (Correspondence, InsufficientInliers, Intrinsics, Pose,
                       PoseError, pose_error, project, ransac_pnp)
from .scene import (Scene, SupportFrame, farthest_pose_sampling, load_scene,
                    retrieve_support)
from .synth import render_view
from .tensor import no_grad

REPORT_SCHEMA_VERSION = 1
CHECKPOINT_MAGIC = b"MLCK0001"

# fields whose defaults follow the published evaluation/training protocol
# this implementation mirrors; everything else is a local artifact choice
PROTOCOL_FIELDS = frozenset({
    "epochs_pretrain", "epochs_finetune", "lr", "points_per_localization",
    "retrieval_train_top", "retrieval_train_sample", "retrieval_test_top",
    "coreset_size", "translation_threshold_m", "rotation_threshold_deg",
})


class InsufficientMatches(RuntimeError):
    """Coarse-to-fine matching produced fewer than 4 correspondences."""


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


@dataclass
class Config:
    # training protocol
    epochs_pretrain: int = 30
    epochs_finetune: int = 30
    steps_per_epoch_pretrain: int = 8
    steps_per_epoch_finetune: int = 3
    lr: float = 5e-4
    # per-step workload
    train_points_per_step: int = 512
    rays_per_step: int = 256
    ray_samples: int = 64
    # support selection
    support_policy: str = "retrieval"  # "retrieval" | "coreset"
    retrieval_train_top: int = 20
    retrieval_train_sample: int = 5
    retrieval_test_top: int = 10
    coreset_size: int = 16
    # matching / localization
    points_per_localization: int = 1024
    knn_k: int = 8
    tau: float = 0.5
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    negative_row_weight: float = 1.0
    lift_stride: int = 2
    coarse_stride: int = 8
    fine_stride: int = 4
    ransac_iterations: int = 500
    ransac_threshold_px: float = 2.0
    # evaluation thresholds
    translation_threshold_m: float = 0.05
    rotation_threshold_deg: float = 5.0
    scene_translation_thresholds: dict = field(default_factory=dict)
    psnr_frames: int = 1
    psnr_cap_db: float = 99.0
    # architecture
    backbone_channels: tuple = (16, 32, 64)
    c_coarse: int = 32
    c_fine: int = 32
    heads: int = 4
    coarse_blocks: int = 2
    mv_hidden: int = 64
    render_hidden: int = 64
    prior_hidden: int = 64
    pe_freqs_coord: int = 6
    pe_freqs_dir: int = 4
    pe_freqs_rel: int = 4
    delta_dim: int = 32
    # augmentation
    augment_enabled: bool = True
    aug_zoom: tuple = (0.8, 1.2)
    aug_rotation_deg: float = 15.0
    aug_jitter: float = 0.2
    # toggles
    adaptation_enabled: bool = True
    use_coord_prior: bool = True
    # seeds
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        d["aug_zoom"] = list(self.aug_zoom)
        d["provenance"] = {k: ("protocol" if k in PROTOCOL_FIELDS else "local")
                           for k in d}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        d = dict(d)
        d.pop("provenance", None)
        if "backbone_channels" in d:
            d["backbone_channels"] = tuple(d["backbone_channels"])
        if "aug_zoom" in d:
            d["aug_zoom"] = tuple(d["aug_zoom"])
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "Config":
        return cls.from_dict(json.loads(open(path).read()))


def _rng(seed: int, stream: int, step: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed & 0x7FFFFFFF, stream, step])


_STREAM_INIT, _STREAM_TARGET, _STREAM_AUG, _STREAM_POINTS, _STREAM_RAYS, \
    _STREAM_SUPPORT, _STREAM_LOCALIZE = range(1, 8)


# ---- parameter store construction and checkpoints ----

def build_store(cfg: Config, seed: int) -> nn.ParamStore:
    """Fresh parameter store for every trainable sub-network (prior excluded)."""
    meta = {
        "heads": cfg.heads, "c_coarse": cfg.c_coarse, "c_fine": cfg.c_fine,
        "mv_hidden": cfg.mv_hidden, "render_hidden": cfg.render_hidden,
        "prior_hidden": cfg.prior_hidden, "pe_freqs_rel": cfg.pe_freqs_rel,
        "pe_freqs_dir": cfg.pe_freqs_dir, "pe_freqs_coord": cfg.pe_freqs_coord,
        "coarse_blocks": cfg.coarse_blocks,
    }
    store = nn.ParamStore(meta=meta)
    rng = _rng(seed, _STREAM_INIT)
    feat.init_backbone(store, rng, tuple(cfg.backbone_channels))
    feat.init_appearance(store, rng, tuple(cfg.backbone_channels), cfg.delta_dim)
    m3d.init_model3d(store, rng)
    mt.init_matcher(store, rng)
    return store


def save_checkpoint(store: nn.ParamStore, path, stage: str, cfg: Config,
                    seed: int, scene_name: str | None = None):
    """Single-file checkpoint: JSON manifest + raw little-endian f32 payload."""
    names = store.names()
    params_meta = []
    offset = 0
    for name in names:
        arr = store.params[name].data
        params_meta.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    manifest = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "stage": stage,
        "scene": scene_name,
        "config": cfg.to_dict(),
        "seed": seed,
        "meta": {k: (list(v) if isinstance(v, tuple) else v)
                 for k, v in store.meta.items()},
        "params": params_meta,
        "payload_floats": offset,
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for name in names:
            f.write(store.params[name].data.astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[nn.ParamStore, dict]:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (blob_len,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(blob_len))
        payload = np.frombuffer(f.read(manifest["payload_floats"] * 4), dtype="<f4")
    store = nn.ParamStore(meta=manifest["meta"])
    for pm in manifest["params"]:
        size = int(np.prod(pm["shape"])) if pm["shape"] else 1
        arr = payload[pm["offset"] : pm["offset"] + size].reshape(pm["shape"])
        store.add(pm["name"], arr)
    return store, manifest


# ---- augmentation ----

def _roll_matrix(theta_rad: float) -> np.ndarray:
    c, s = np.cos(theta_rad), np.sin(theta_rad)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _color_jitter(image: np.ndarray, rng: np.random.Generator, amount: float) -> np.ndarray:
    out = image.astype(np.float32)
    out = out + rng.uniform(-amount, amount)
    out = (out - 0.5) * (1.0 + rng.uniform(-amount, amount)) + 0.5
    gray = out.mean(axis=2, keepdims=True)
    out = gray + (out - gray) * (1.0 + rng.uniform(-amount, amount))
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _resample(image: np.ndarray, src_coords: np.ndarray, nearest: bool) -> np.ndarray:
    h, w = image.shape[:2]
    u = np.clip(src_coords[..., 0], 0, w - 1)
    v = np.clip(src_coords[..., 1], 0, h - 1)
    if nearest:
        return image[np.round(v).astype(int), np.round(u).astype(int)]
    u0 = np.clip(np.floor(u).astype(int), 0, w - 2)
    v0 = np.clip(np.floor(v).astype(int), 0, h - 2)
    fu = (u - u0)[..., None] if image.ndim == 3 else (u - u0)
    fv = (v - v0)[..., None] if image.ndim == 3 else (v - v0)
    top = image[v0, u0] * (1 - fu) + image[v0, u0 + 1] * fu
    bot = image[v0 + 1, u0] * (1 - fu) + image[v0 + 1, u0 + 1] * fu
    return top * (1 - fv) + bot * fv


def augment(frame: SupportFrame, cfg: Config, seed: int,
            scene: Scene | None = None) -> SupportFrame:
    """Random zoom (focal scaling), in-plane roll and color jitter.

    The adjusted pose/intrinsics stay consistent with the transformed
    content: with scene geometry available the view is re-rendered exactly;
    otherwise the image and depths are resampled (approximate near depth
    edges).  Color jitter touches RGB only.
    """
    rng = np.random.default_rng([seed & 0x7FFFFFFF, _STREAM_AUG])
    zoom = rng.uniform(*cfg.aug_zoom) if cfg.aug_zoom[0] != cfg.aug_zoom[1] \
        else cfg.aug_zoom[0]
    roll = np.radians(rng.uniform(-cfg.aug_rotation_deg, cfg.aug_rotation_deg)) \
        if cfg.aug_rotation_deg else 0.0
    intr = frame.intr
    new_intr = Intrinsics(intr.fx * zoom, intr.fy * zoom, intr.cx, intr.cy,
                          intr.width, intr.height)
    new_pose = Pose(frame.pose.rotation @ _roll_matrix(roll), frame.pose.translation)

    if scene is not None and scene.geometry:
        detail = float(scene.spec.get("texture_detail", 6.0))
        rgb, depth_gt = render_view(new_pose, new_intr, scene.geometry, detail)
        depth = depth_gt.copy()
    else:
        h, w = frame.hw
        us, vs = np.meshgrid(np.arange(w, dtype=np.float64),
                             np.arange(h, dtype=np.float64))
        du, dv = us - intr.cx, vs - intr.cy
        # invert zoom about the principal point, then invert the roll
        du, dv = du / zoom, dv / zoom
        c, s = np.cos(roll), np.sin(roll)
        src = np.stack([intr.cx + c * du - s * dv, intr.cy + s * du + c * dv], axis=-1)
        rgb = _resample(frame.image, src, nearest=False).astype(np.float32)
        depth = _resample(frame.depth, src, nearest=True).astype(np.float32)
        depth_gt = None if frame.depth_gt is None else \
            _resample(frame.depth_gt, src, nearest=True).astype(np.float32)
    if cfg.aug_jitter > 0:
        rgb = _color_jitter(rgb, rng, cfg.aug_jitter)
    return SupportFrame(rgb, depth, new_pose, new_intr, depth_gt=depth_gt)


# ---- support selection ----

def select_supports(scene: Scene, cfg: Config, store: nn.ParamStore,
                    query_image: np.ndarray | None = None,
                    exclude: int | None = None,
                    train_mode: bool = False,
                    rng: np.random.Generator | None = None) -> list[int]:
    """Support frame indices (into scene.frames) under the configured policy.

    Retrieval ranks training frames by appearance similarity to the query
    (train mode samples `retrieval_train_sample` of the top
    `retrieval_train_top`, test mode takes the top `retrieval_test_top`);
    the coreset policy picks a farthest-pose subset independent of the
    query.  `exclude` drops the target frame itself during training.
    """
    pool = [i for i in scene.train_indices if i != exclude]
    if not pool:
        raise ValueError("no support frames available")
    frames = [scene.frames[i] for i in pool]
    if cfg.support_policy == "coreset":
        k = min(cfg.coreset_size, len(frames))
        chosen = farthest_pose_sampling(frames, k)
    else:
        if query_image is None:
            raise ValueError("retrieval policy needs a query image")
        top = min(cfg.retrieval_train_top if train_mode else cfg.retrieval_test_top,
                  len(frames))
        ranked = retrieve_support(query_image, frames, top,
                                  lambda img: feat.embed_image(store, img))
        if train_mode:
            n = min(cfg.retrieval_train_sample, len(ranked))
            chosen = list((rng or np.random.default_rng(0)).choice(
                len(ranked), size=n, replace=False))
            chosen = [ranked[int(i)] for i in chosen]
        else:
            chosen = ranked
    return [pool[int(i)] for i in chosen]


# ---- ray helpers ----

def pixel_rays(pose: Pose, intr: Intrinsics, pixels: np.ndarray):
    """World-space unit rays through pixels; also returns z-to-ray-length scale."""
    cam = np.stack([(pixels[:, 0] - intr.cx) / intr.fx,
                    (pixels[:, 1] - intr.cy) / intr.fy,
                    np.ones(len(pixels))], axis=1)
    world = cam @ pose.rotation.T
    norms = np.linalg.norm(world, axis=1, keepdims=True)
    origins = np.broadcast_to(pose.translation, world.shape).copy()
    return origins, world / norms, norms[:, 0]


# ---- the shared training step ----

def _train_step(store: nn.ParamStore, scene: Scene, target_idx: int, cfg: Config,
                seed: int, step: int, prior: bool) -> nn.LossBreakdown:
    frame = scene.frames[target_idx]
    if cfg.augment_enabled:
        frame = augment(frame, cfg, seed + 7919 * step, scene=scene)
    rng_sup = _rng(seed, _STREAM_SUPPORT, step)
    support_idx = select_supports(scene, cfg, store, query_image=frame.image,
                                  exclude=target_idx, train_mode=True, rng=rng_sup)
    supports = [scene.frames[i] for i in support_idx]
    model = m3d.assemble_model(store, supports, scene.bounds,
                               query_image=frame.image,
                               adapt=cfg.adaptation_enabled,
                               k_neighbors=cfg.knn_k,
                               lift_stride=cfg.lift_stride,
                               prior_enabled=prior)
    store.zero_grad()

    # matching losses over sampled support points
    nsp = model.points["coarse"]
    rng_pts = _rng(seed, _STREAM_POINTS, step)
    n_pts = min(cfg.train_points_per_step, len(nsp))
    sel = rng_pts.choice(len(nsp), size=n_pts, replace=False)
    points = nsp.positions[sel]
    d3 = m3d.query_descriptors(store, model, points, "coarse")
    d2 = mt.project_2d_descriptors(store, model.query_pyramid[3], "coarse")
    d3t, d2t = mt.coarse_transform(store, d3, d2)
    gh = frame.hw[0] // cfg.coarse_stride
    gw = frame.hw[1] // cfg.coarse_stride
    score = mt.coarse_score(store, d3t, d2t, (gh, gw), tau=cfg.tau)
    gt = mt.gt_score_matrix(points, frame.pose, frame.intr, frame.depth_gt,
                            cfg.coarse_stride)
    pos_rows = np.nonzero(gt.valid)[0]
    expectation = gt_exp = supervised = None
    if len(pos_rows):
        # fine supervision runs at the ground-truth coarse cells (the only
        # true-positive pairs), which keeps the signal alive before the
        # coarse matcher finds anything on its own
        gt_matches = mt.MatchSet(pos_rows, gt.cell_idx[pos_rows],
                                 np.ones(len(pos_rows)), (gh, gw))
        fine_d3 = m3d.query_descriptors(store, model, points[pos_rows], "fine")
        fmap = mt.project_2d_descriptors(store, model.query_pyramid[2], "fine",
                                         add_position=False)
        fh = frame.hw[0] // cfg.fine_stride
        fine_map = fmap.reshape(fh, frame.hw[1] // cfg.fine_stride, cfg.c_fine)
        refined = mt.fine_refine(store, gt_matches, fine_d3, fine_map,
                                 cfg.fine_stride, cfg.coarse_stride)
        expectation = refined["expectation"]
        gt_exp, supervised = mt.fine_gt_offsets(gt.proj_px[pos_rows],
                                                refined["center_px"], cfg.fine_stride)
    loss_coarse, loss_fine = mt.matching_losses(
        score, gt, expectation, gt_exp, supervised,
        alpha=cfg.focal_alpha, gamma=cfg.focal_gamma,
        negative_row_weight=cfg.negative_row_weight)
    (loss_coarse + loss_fine).backward()

    # rendering losses on random query pixels
    rng_rays = _rng(seed, _STREAM_RAYS, step)
    h, w = frame.hw
    px = np.stack([rng_rays.uniform(0, w - 1, cfg.rays_per_step),
                   rng_rays.uniform(0, h - 1, cfg.rays_per_step)], axis=1)
    origins, dirs, z_scale = pixel_rays(frame.pose, frame.intr, px)
    near, far, ray_ok = m3d.ray_box_near_far(origins, dirs, model.bounds)
    loss_render_v = loss_depth_v = 0.0
    if np.any(ray_ok):
        jitter = rng_rays.uniform(size=(int(ray_ok.sum()), cfg.ray_samples))
        rendered = m3d.render_rays(store, model, origins[ray_ok], dirs[ray_ok],
                                   near[ray_ok], far[ray_ok], cfg.ray_samples,
                                   jitter=jitter)
        ui = np.round(px[ray_ok, 0]).astype(int)
        vi = np.round(px[ray_ok, 1]).astype(int)
        z_gt = frame.depth_gt[vi, ui]
        loss_render, loss_depth = m3d.render_losses(
            rendered, frame.image[vi, ui], z_gt * z_scale[ray_ok], z_gt > 0)
        (loss_render + loss_depth).backward()
        loss_render_v, loss_depth_v = loss_render.item(), loss_depth.item()

    breakdown = nn.LossBreakdown.from_parts(loss_coarse.item(), loss_fine.item(),
                                            loss_render_v, loss_depth_v)
    if not np.isfinite(breakdown.total):
        raise DivergenceError(f"non-finite loss at step {step}: {breakdown}")
    nn.adam_step(store, store.collect_grads(), lr=cfg.lr)
    return breakdown


def _run_training(store: nn.ParamStore, scenes: list[Scene], cfg: Config, seed: int,
                  epochs: int, steps_per_epoch: int, prior: bool,
                  log=None) -> list[dict]:
    history = []
    step = 0
    for epoch in range(epochs):
        sums = {"coarse": 0.0, "fine": 0.0, "render": 0.0, "depth": 0.0, "total": 0.0}
        for _ in range(steps_per_epoch):
            scene = scenes[step % len(scenes)]
            rng_t = _rng(seed, _STREAM_TARGET, step)
            target = int(rng_t.choice(scene.train_indices))
            losses = _train_step(store, scene, target, cfg, seed, step, prior)
            for key in sums:
                sums[key] += getattr(losses, key)
            step += 1
        entry = {k: v / steps_per_epoch for k, v in sums.items()}
        entry["epoch"] = epoch
        history.append(entry)
        if log:
            log(f"epoch {epoch + 1}/{epochs}: " +
                " ".join(f"{k}={entry[k]:.4f}" for k in
                         ("coarse", "fine", "render", "depth", "total")))
    return history


def pretrain(scenes: list[Scene], cfg: Config, seed: int,
             log=None) -> tuple[nn.ParamStore, list[dict]]:
    """Multi-scene training from scratch; the coordinate prior stays off."""
    if len(scenes) < 2:
        raise ValueError("pretraining expects at least 2 scenes")
    store = build_store(cfg, seed)
    history = _run_training(store, scenes, cfg, seed, cfg.epochs_pretrain,
                            cfg.steps_per_epoch_pretrain, prior=False, log=log)
    return store, history


def finetune(scene: Scene, base_store: nn.ParamStore, cfg: Config, seed: int,
             log=None) -> tuple[nn.ParamStore, list[dict]]:
    """Per-scene optimization of all parameters on top of a pretrain store.

    Registers the zero-initialized coordinate-residual prior (when enabled)
    so localization starts bit-identical to the base model.
    """
    store = base_store.clone()
    use_prior = cfg.use_coord_prior
    if use_prior and not store.meta.get("prior_registered"):
        m3d.init_coord_prior(store, _rng(seed, _STREAM_INIT, 1))
    history = _run_training(store, [scene], cfg, seed + 1, cfg.epochs_finetune,
                            cfg.steps_per_epoch_finetune, prior=use_prior, log=log)
    return store, history


# ---- localization and evaluation ----

def localize(query_image: np.ndarray, scene: Scene, store: nn.ParamStore,
             cfg: Config, seed: int = 0, adapt: bool | None = None,
             match_fn=None) -> tuple[Pose, dict]:
    """Estimate the camera pose of a query image against a scene.

    Support frames come from the scene's training split only.  `match_fn`
    (model, points) -> list[Correspondence] substitutes the learned
    coarse-to-fine matcher (oracle harnesses); `adapt` overrides the
    appearance-adaptation toggle.

    Raises InsufficientMatches when fewer than 4 correspondences survive
    filtering and propagates InsufficientInliers from RANSAC.
    """
    t_start = time.perf_counter()
    adapt_on = cfg.adaptation_enabled if adapt is None else adapt
    with no_grad():
        support_idx = select_supports(scene, cfg, store, query_image=query_image)
        supports = [scene.frames[i] for i in support_idx]
        prior_on = cfg.use_coord_prior and bool(store.meta.get("prior_registered"))
        model = m3d.assemble_model(store, supports, scene.bounds,
                                   query_image=query_image, adapt=adapt_on,
                                   k_neighbors=cfg.knn_k,
                                   lift_stride=cfg.lift_stride,
                                   prior_enabled=prior_on)
        nsp = model.points["coarse"]
        rng = _rng(seed, _STREAM_LOCALIZE)
        n_pts = min(cfg.points_per_localization, len(nsp))
        sel = rng.choice(len(nsp), size=n_pts, replace=False)
        points = nsp.positions[sel]
        diagnostics = {"num_points": int(n_pts), "support_indices": support_idx,
                       "match_count": 0, "inlier_count": 0, "scores": [],
                       "pairs": set(), "points": points}
        if match_fn is not None:
            corrs = match_fn(model, points)
        else:
            d3 = m3d.query_descriptors(store, model, points, "coarse")
            d2 = mt.project_2d_descriptors(store, model.query_pyramid[3], "coarse")
            d3t, d2t = mt.coarse_transform(store, d3, d2)
            h, w = supports[0].hw
            gh, gw = h // cfg.coarse_stride, w // cfg.coarse_stride
            score = mt.coarse_score(store, d3t, d2t, (gh, gw), tau=cfg.tau)
            matches = mt.select_matches(score)
            diagnostics["match_count"] = len(matches)
            diagnostics["scores"] = [float(s) for s in matches.scores]
            diagnostics["pairs"] = matches.pairs()
            if len(matches) < 4:
                raise InsufficientMatches(
                    f"{len(matches)} matches after mutual-nearest filtering")
            fine_d3 = m3d.query_descriptors(store, model,
                                            points[matches.point_idx], "fine")
            fmap = mt.project_2d_descriptors(store, model.query_pyramid[2], "fine",
                                             add_position=False)
            fine_map = fmap.reshape(h // cfg.fine_stride, w // cfg.fine_stride,
                                    cfg.c_fine)
            refined = mt.fine_refine(store, matches, fine_d3, fine_map,
                                     cfg.fine_stride, cfg.coarse_stride)
            corrs = [Correspondence(points[p], px, float(s))
                     for p, px, s in zip(matches.point_idx, refined["refined_px"],
                                         matches.scores)]
        intr = supports[0].intr
        pose, inliers = ransac_pnp(corrs, intr, iterations=cfg.ransac_iterations,
                                   inlier_threshold_px=cfg.ransac_threshold_px,
                                   seed=seed)
        diagnostics["inlier_count"] = int(inliers.sum())
        diagnostics["elapsed_s"] = time.perf_counter() - t_start
    return pose, diagnostics


@dataclass
class EvalReport:
    scene: str
    accuracy: float
    median_translation_cm: float
    median_rotation_deg: float
    matching_iou: float
    psnr_db: float
    num_frames: int
    failures: int
    translation_threshold_m: float
    rotation_threshold_deg: float
    per_frame: list = field(default_factory=list)
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_dict(self) -> dict:
        return asdict(self)


def is_correct(err: PoseError, t_thresh_m: float, r_thresh_deg: float) -> bool:
    """The accuracy criterion: both errors strictly under their thresholds."""
    return err.translation_error < t_thresh_m and err.rotation_error < r_thresh_deg


def scene_thresholds(scene: Scene, cfg: Config) -> tuple[float, float]:
    t = cfg.scene_translation_thresholds.get(scene.name, cfg.translation_threshold_m)
    return float(t), cfg.rotation_threshold_deg


def render_image(store: nn.ParamStore, model: m3d.ConditionalModel, pose: Pose,
                 intr: Intrinsics, cfg: Config, chunk: int = 512) -> np.ndarray:
    """Full-image volume render at a given camera (deterministic midpoints)."""
    h, w = intr.height, intr.width
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    px = np.stack([us.ravel(), vs.ravel()], axis=1)
    origins, dirs, _ = pixel_rays(pose, intr, px)
    near, far, ok = m3d.ray_box_near_far(origins, dirs, model.bounds)
    rgb = np.zeros((h * w, 3), dtype=np.float32)
    with no_grad():
        valid_idx = np.flatnonzero(ok)
        for start in range(0, len(valid_idx), chunk):
            sub = valid_idx[start : start + chunk]
            out = m3d.render_rays(store, model, origins[sub], dirs[sub],
                                  near[sub], far[sub], cfg.ray_samples)
            rgb[sub] = out["rgb"].data
    return rgb.reshape(h, w, 3)


def psnr(rendered: np.ndarray, reference: np.ndarray, cap_db: float = 99.0) -> float:
    mse = float(np.mean((rendered.astype(np.float64) - reference.astype(np.float64)) ** 2))
    if mse <= 0:
        return cap_db
    return min(10.0 * np.log10(1.0 / mse), cap_db)


def _eval_one(args):
    frame_idx, scene, store, cfg, seed, adapt = args
    frame = scene.frames[frame_idx]
    record = {"frame": int(frame_idx)}
    try:
        pose, diag = localize(frame.image, scene, store, cfg,
                              seed=seed + frame_idx, adapt=adapt)
        err = pose_error(pose, frame.pose)
        gt = mt.gt_score_matrix(diag["points"], frame.pose, frame.intr,
                                frame.depth_gt, cfg.coarse_stride)
        gt_pairs = {(int(i), int(c)) for i, c in
                    zip(np.nonzero(gt.valid)[0], gt.cell_idx[gt.valid])}
        record.update({
            "translation_error_m": err.translation_error,
            "rotation_error_deg": err.rotation_error,
            "match_count": diag["match_count"],
            "inlier_count": diag["inlier_count"],
            "iou": mt.matching_iou(diag["pairs"], gt_pairs),
            "elapsed_s": diag["elapsed_s"],
            "error": None,
        })
    except (InsufficientMatches, InsufficientInliers) as exc:
        record.update({"error": type(exc).__name__, "iou": 0.0})
    return record


def evaluate(scene: Scene, frame_indices: list[int], store: nn.ParamStore,
             cfg: Config, seed: int = 0, threads: int = 1,
             adapt: bool | None = None) -> EvalReport:
    """Localize each frame, score accuracy/medians/IoU, render PSNR views.

    Frames that raise are counted as incorrect and excluded from medians.
    `threads` parallelizes per-frame localization without changing any
    reported number (frames are independent and results gather by index).
    """
    tasks = [(i, scene, store, cfg, seed, adapt) for i in frame_indices]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(_eval_one, tasks))
    else:
        records = [_eval_one(t) for t in tasks]

    t_thresh, r_thresh = scene_thresholds(scene, cfg)
    ok_records = [r for r in records if r["error"] is None]
    correct = sum(1 for r in ok_records
                  if is_correct(PoseError(r["translation_error_m"],
                                          r["rotation_error_deg"]),
                                t_thresh, r_thresh))
    accuracy = correct / len(records) if records else 0.0
    med_t = float(np.median([r["translation_error_m"] for r in ok_records]) * 100) \
        if ok_records else float("inf")
    med_r = float(np.median([r["rotation_error_deg"] for r in ok_records])) \
        if ok_records else float("inf")
    iou = float(np.mean([r["iou"] for r in records])) if records else 0.0

    psnr_vals = []
    with no_grad():
        for frame_idx in frame_indices[: cfg.psnr_frames]:
            frame = scene.frames[frame_idx]
            support_idx = select_supports(scene, cfg, store, query_image=frame.image)
            supports = [scene.frames[i] for i in support_idx]
            prior_on = cfg.use_coord_prior and bool(store.meta.get("prior_registered"))
            adapt_on = cfg.adaptation_enabled if adapt is None else adapt
            model = m3d.assemble_model(store, supports, scene.bounds,
                                       query_image=frame.image, adapt=adapt_on,
                                       k_neighbors=cfg.knn_k,
                                       lift_stride=cfg.lift_stride,
                                       prior_enabled=prior_on)
            rendered = render_image(store, model, frame.pose, frame.intr, cfg)
            psnr_vals.append(psnr(rendered, frame.image, cfg.psnr_cap_db))
    return EvalReport(
        scene=scene.name, accuracy=accuracy, median_translation_cm=med_t,
        median_rotation_deg=med_r, matching_iou=iou,
        psnr_db=float(np.mean(psnr_vals)) if psnr_vals else 0.0,
        num_frames=len(records), failures=len(records) - len(ok_records),
        translation_threshold_m=t_thresh, rotation_threshold_deg=r_thresh,
        per_frame=records)


def shift_scene_images(scene: Scene, gain, bias, indices: list[int]) -> Scene:
    """Copy of the scene with a global color shift applied to given frames."""
    gain = np.asarray(gain, dtype=np.float32)
    bias = np.asarray(bias, dtype=np.float32)
    frames = list(scene.frames)
    for i in indices:
        f = frames[i]
        shifted = np.clip(f.image * gain + bias, 0.0, 1.0).astype(np.float32)
        frames[i] = SupportFrame(shifted, f.depth, f.pose, f.intr, depth_gt=f.depth_gt)
    return replace(scene, frames=frames)


def appearance_shift_eval(scene: Scene, store: nn.ParamStore, shift: dict,
                          cfg: Config, seed: int = 0,
                          threads: int = 1) -> dict[str, EvalReport]:
    """Evaluate under a test-image color shift with adaptation on and off."""
    shifted = shift_scene_images(scene, shift.get("gain", [1.0, 1.0, 1.0]),
                                 shift.get("bias", [0.0, 0.0, 0.0]),
                                 scene.test_indices)
    on = evaluate(shifted, scene.test_indices, store, cfg, seed=seed,
                  threads=threads, adapt=True)
    off = evaluate(shifted, scene.test_indices, store, cfg, seed=seed,
                   threads=threads, adapt=False)
    return {"enabled": on, "disabled": off}
