"""Posed RGB-D scenes: containers, disk format, support selection, depth fusion.

Scene directory layout: `scene.json` manifest plus per-frame binary PPM (P6)
images and raw little-endian float32 depth maps; clean ground-truth depth
sits next to the noisy depth with a `_gt` suffix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Intrinsics, Pose, project, unproject

SCENE_SCHEMA_VERSION = 1


@dataclass
class SupportFrame:
    """One posed RGB-D view; depth 0 marks invalid pixels."""

    image: np.ndarray          # (H, W, 3) float32 in [0, 1]
    depth: np.ndarray          # (H, W) float32 meters, raw / noisy
    pose: Pose
    intr: Intrinsics
    depth_gt: np.ndarray | None = None  # clean depth when the scene is synthetic

    def __post_init__(self):
        if self.image.shape[:2] != self.depth.shape:
            raise ValueError("image and depth dimensions differ")
        if np.any(self.depth < 0):
            raise ValueError("negative depth")

    @property
    def hw(self) -> tuple[int, int]:
        return self.depth.shape


@dataclass
class Scene:
    name: str
    frames: list[SupportFrame]
    bounds: np.ndarray                 # (2, 3) lo / hi corners, meters
    geometry: list = field(default_factory=list)
    train_indices: list[int] = field(default_factory=list)
    test_indices: list[int] = field(default_factory=list)
    spec: dict = field(default_factory=dict)
    seed: int = 0

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.bounds[1] - self.bounds[0]))

    def train_frames(self) -> list[SupportFrame]:
        return [self.frames[i] for i in self.train_indices]

    def test_frames(self) -> list[SupportFrame]:
        return [self.frames[i] for i in self.test_indices]


@dataclass
class FusedDepth:
    depth: np.ndarray  # (H, W) float32, 0 where invalid
    valid: np.ndarray  # (H, W) bool


# ---- PPM / raw-depth / manifest I/O ----

def write_ppm(path: Path, image: np.ndarray):
    img8 = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = img8.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(img8.tobytes())


def read_ppm(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    parts = []
    pos = 0
    while len(parts) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        parts.append(data[start:pos])
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    pos += 1  # single whitespace after maxval
    pix = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return (pix.reshape(h, w, 3).astype(np.float32) / float(maxval))


def write_raw_depth(path: Path, depth: np.ndarray):
    np.asarray(depth, dtype="<f4").tofile(path)


def read_raw_depth(path: Path, height: int, width: int) -> np.ndarray:
    arr = np.fromfile(path, dtype="<f4")
    if arr.size != height * width:
        raise ValueError(f"{path}: expected {height * width} floats, got {arr.size}")
    return arr.reshape(height, width)


def save_scene(scene: Scene, out_dir: Path):
    from .synth import Sphere, Triangle  # local import to avoid a cycle

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames_meta = []
    for i, fr in enumerate(scene.frames):
        image_name = f"frame_{i:03d}.ppm"
        depth_name = f"frame_{i:03d}.depth"
        gt_name = f"frame_{i:03d}_gt.depth"
        write_ppm(out_dir / image_name, fr.image)
        write_raw_depth(out_dir / depth_name, fr.depth)
        if fr.depth_gt is not None:
            write_raw_depth(out_dir / gt_name, fr.depth_gt)
        frames_meta.append({
            "image": image_name,
            "depth": depth_name,
            "depth_gt": gt_name if fr.depth_gt is not None else None,
            "pose": [float(x) for x in fr.pose.matrix4().reshape(-1)],
            "height": int(fr.depth.shape[0]),
            "width": int(fr.depth.shape[1]),
        })
    geo_meta = []
    for prim in scene.geometry:
        if isinstance(prim, Sphere):
            geo_meta.append({"type": "sphere", "center": prim.center.tolist(),
                             "radius": float(prim.radius), "color": prim.color.tolist(),
                             "tex_seed": prim.tex_seed})
        elif isinstance(prim, Triangle):
            geo_meta.append({"type": "triangle",
                             "vertices": [prim.v0.tolist(), prim.v1.tolist(), prim.v2.tolist()],
                             "color": prim.color.tolist(), "tex_seed": prim.tex_seed})
    intr = scene.frames[0].intr
    manifest = {
        "schema_version": SCENE_SCHEMA_VERSION,
        "name": scene.name,
        "seed": scene.seed,
        "bounds": scene.bounds.tolist(),
        "intrinsics": {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
                       "width": intr.width, "height": intr.height},
        "frames": frames_meta,
        "splits": {"train": scene.train_indices, "test": scene.test_indices},
        "geometry": geo_meta,
        "spec": scene.spec,
    }
    (out_dir / "scene.json").write_text(json.dumps(manifest, indent=1))


def load_scene(scene_dir: Path) -> Scene:
    from .synth import Sphere, Triangle  # local import to avoid a cycle

    scene_dir = Path(scene_dir)
    manifest = json.loads((scene_dir / "scene.json").read_text())
    im = manifest["intrinsics"]
    intr = Intrinsics(im["fx"], im["fy"], im["cx"], im["cy"], im["width"], im["height"])
    frames = []
    for fm in manifest["frames"]:
        image = read_ppm(scene_dir / fm["image"])
        depth = read_raw_depth(scene_dir / fm["depth"], fm["height"], fm["width"])
        gt = None
        if fm.get("depth_gt"):
            gt = read_raw_depth(scene_dir / fm["depth_gt"], fm["height"], fm["width"])
        frames.append(SupportFrame(image, depth, Pose.from_matrix4(fm["pose"]), intr,
                                   depth_gt=gt))
    geometry = []
    for gm in manifest.get("geometry", []):
        if gm["type"] == "sphere":
            geometry.append(Sphere(np.array(gm["center"]), gm["radius"],
                                   np.array(gm["color"]), gm["tex_seed"]))
        else:
            v = [np.array(x) for x in gm["vertices"]]
            geometry.append(Triangle(v[0], v[1], v[2], np.array(gm["color"]), gm["tex_seed"]))
    return Scene(name=manifest["name"], frames=frames,
                 bounds=np.array(manifest["bounds"]), geometry=geometry,
                 train_indices=list(manifest["splits"]["train"]),
                 test_indices=list(manifest["splits"]["test"]),
                 spec=manifest.get("spec", {}), seed=manifest.get("seed", 0))


# ---- support selection ----

def farthest_pose_sampling(frames: list[SupportFrame], k: int) -> list[int]:
    """Greedy viewing-angle coreset, in selection order, starting at index 0.

    Each round adds the frame whose forward axis is most different (max-min
    angle) from every frame already selected; argmax breaks ties toward the
    smaller index.
    """
    if not 1 <= k <= len(frames):
        raise ValueError(f"k={k} out of range for {len(frames)} frames")
    fwd = np.stack([f.pose.forward for f in frames])
    fwd = fwd / np.linalg.norm(fwd, axis=1, keepdims=True)
    angles = np.degrees(np.arccos(np.clip(fwd @ fwd.T, -1.0, 1.0)))
    selected = [0]
    min_dist = angles[0].copy()
    while len(selected) < k:
        nxt = int(np.argmax(min_dist))
        selected.append(nxt)
        np.minimum(min_dist, angles[nxt], out=min_dist)
    return selected


def appearance_similarity(query_emb: np.ndarray, frame_embs: np.ndarray) -> np.ndarray:
    """Cosine similarity over the contrast half of appearance embeddings.

    Embeddings are [channel means | channel stds]; the mean half swings
    wildly under global brightness changes and its magnitude drowns the
    informative part of a plain concat cosine, so ranking uses the
    mean-centered std half (shift-robust, content-sensitive).  The full
    embedding still drives appearance adaptation.
    """
    def prep(e):
        half = e[..., e.shape[-1] // 2 :]
        half = half - half.mean(axis=-1, keepdims=True)
        return half

    q = prep(np.atleast_1d(query_emb))
    f = prep(frame_embs)
    denom = np.maximum(np.linalg.norm(q) * np.linalg.norm(f, axis=1), 1e-12)
    return f @ q / denom


def retrieve_support(query_image: np.ndarray, frames: list[SupportFrame], k: int,
                     embed_fn) -> list[int]:
    """Rank frames by appearance similarity to the query, top-k.

    `embed_fn(image) -> 1-D vector` supplies the descriptor (channel mean /
    std of a low-level feature map in the full pipeline).  Ties keep the
    smaller frame index.
    """
    if k > len(frames):
        raise ValueError("k exceeds frame count")
    query_emb = np.asarray(embed_fn(query_image), dtype=np.float64)
    embs = np.stack([np.asarray(embed_fn(f.image), dtype=np.float64) for f in frames])
    sims = appearance_similarity(query_emb, embs)
    order = np.argsort(-sims, kind="stable")
    return [int(i) for i in order[:k]]


# ---- depth warping and fusion ----

def _warp_depth_into(target: SupportFrame, source: SupportFrame) -> np.ndarray:
    """Z-buffered map of source depths seen from the target view (0 = none)."""
    h, w = target.hw
    buf = np.full(h * w, np.inf)
    vs, us = np.nonzero(source.depth > 0)
    if len(us) == 0:
        return np.zeros((h, w), dtype=np.float32)
    pix = np.stack([us, vs], axis=1).astype(np.float64)
    pts = unproject(source.pose, source.intr, pix, source.depth[vs, us])
    proj, z, in_frustum = project(target.pose, target.intr, pts)
    ui = np.round(proj[:, 0]).astype(np.int64)
    vi = np.round(proj[:, 1]).astype(np.int64)
    ok = in_frustum & (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
    np.minimum.at(buf, vi[ok] * w + ui[ok], z[ok])
    buf[~np.isfinite(buf)] = 0.0
    return buf.reshape(h, w).astype(np.float32)


def warp_and_fuse_depth(frames: list[SupportFrame], rel_tol: float = 0.05) -> list[FusedDepth]:
    """Cross-frame depth validation and completion.

    For each target frame all other raw depths are warped in and z-buffered;
    per pixel, the largest cluster of observations mutually within `rel_tol`
    relative depth (anchor-based, ties to the nearest anchor) is fused by
    median when it has at least two members.  Pixels without a consistent
    cluster keep the target's raw value when valid.
    """
    if not frames:
        raise ValueError("no frames to fuse")
    fused_all = []
    for t_idx, target in enumerate(frames):
        h, w = target.hw
        obs = [target.depth.reshape(-1).astype(np.float64)]
        for s_idx, source in enumerate(frames):
            if s_idx != t_idx:
                obs.append(_warp_depth_into(target, source).reshape(-1).astype(np.float64))
        stack_ = np.stack(obs, axis=1)                     # (HW, M), col 0 = target raw
        valid = stack_ > 0
        vals = np.where(valid, stack_, np.nan)
        # support count per anchor: observations within rel_tol of the anchor
        diff = np.abs(vals[:, :, None] - vals[:, None, :])          # (HW, M, M)
        within = (diff <= rel_tol * vals[:, :, None]) & valid[:, None, :]
        counts = np.where(valid, within.sum(axis=2), 0).astype(np.int64)
        # anchor at the target's own raw value where it exists (validation /
        # denoising); holes fall back to the best-supported warped cluster
        # with ties toward the nearest depth (completion across occlusions)
        anchor_key = counts.astype(np.float64) - 1e-9 * np.where(valid, vals, np.inf)
        best = np.argmax(np.where(valid, anchor_key, -np.inf), axis=1)
        best = np.where(valid[:, 0], 0, best)
        rows = np.arange(stack_.shape[0])
        best_count = counts[rows, best]
        in_cluster = within[rows, best] & valid
        cluster_vals = np.where(in_cluster, stack_, np.inf)
        cluster_vals.sort(axis=1)
        n = in_cluster.sum(axis=1)
        n_safe = np.maximum(n, 1)
        lo_idx = (n_safe - 1) // 2
        hi_idx = n_safe // 2
        median = 0.5 * (cluster_vals[rows, lo_idx] + cluster_vals[rows, hi_idx])

        fused = np.zeros(h * w, dtype=np.float32)
        ok = best_count >= 2
        fused[ok] = median[ok].astype(np.float32)
        raw = target.depth.reshape(-1)
        keep_raw = (~ok) & (raw > 0)
        fused[keep_raw] = raw[keep_raw]
        valid_mask = fused > 0
        fused_all.append(FusedDepth(fused.reshape(h, w), valid_mask.reshape(h, w)))
    return fused_all
