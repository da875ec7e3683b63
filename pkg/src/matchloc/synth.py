"""Synthetic desk-scale RGB-D scene generation by ray casting.

Scenes are boxes of procedurally textured spheres and triangles over a
floor, viewed by cameras on a sphere segment that look at the (jittered)
centroid.  Rendering produces view-independent reflectance and exact
z-depth; a noise model then corrupts depth into the "raw" maps while the
exact depth is kept as ground truth.  Everything is deterministic per seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Intrinsics, Pose
from .scene import Scene, SupportFrame


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float
    color: np.ndarray
    tex_seed: int

    def bounds(self):
        c, r = np.asarray(self.center), self.radius
        return c - r, c + r


@dataclass(frozen=True)
class Triangle:
    v0: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    color: np.ndarray
    tex_seed: int

    def bounds(self):
        v = np.stack([self.v0, self.v1, self.v2])
        return v.min(axis=0), v.max(axis=0)


@dataclass
class SceneSpec:
    num_primitives: int = 10
    extent_m: float = 2.0
    texture_detail: float = 6.0
    num_frames: int = 25
    num_test_frames: int = 5
    image_size: int = 64
    fov_deg: float = 55.0
    depth_sigma_rel: float = 0.02
    dropout_rate: float = 0.10

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        spec = cls()
        noise = d.pop("noise", None) if isinstance(d, dict) else None
        for k, v in dict(d).items():
            if not hasattr(spec, k):
                raise ValueError(f"unknown scene spec field: {k}")
            setattr(spec, k, type(getattr(spec, k))(v))
        if noise:
            spec.depth_sigma_rel = float(noise.get("depth_sigma_rel", spec.depth_sigma_rel))
            spec.dropout_rate = float(noise.get("dropout_rate", spec.dropout_rate))
        return spec

    def to_dict(self) -> dict:
        return {
            "num_primitives": self.num_primitives,
            "extent_m": self.extent_m,
            "texture_detail": self.texture_detail,
            "num_frames": self.num_frames,
            "num_test_frames": self.num_test_frames,
            "image_size": self.image_size,
            "fov_deg": self.fov_deg,
            "noise": {"depth_sigma_rel": self.depth_sigma_rel,
                      "dropout_rate": self.dropout_rate},
        }


# ---- procedural texture ----

_HASH_PRIMES = np.array([0x9E3779B97F4A7C15, 0xC2B2AE3D27D4EB4F, 0x165667B19E3779F9],
                        dtype=np.uint64)


def _lattice_hash(cells: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic pseudo-random value in [0, 1) per integer lattice cell."""
    with np.errstate(over="ignore"):
        u = cells.astype(np.int64).astype(np.uint64)
        h = (u[..., 0] * _HASH_PRIMES[0]) ^ (u[..., 1] * _HASH_PRIMES[1]) \
            ^ (u[..., 2] * _HASH_PRIMES[2]) ^ (np.uint64(seed) * np.uint64(0x2545F4914F6CDD1D))
        h ^= h >> np.uint64(33)
        h *= np.uint64(0xFF51AFD7ED558CCD)
        h ^= h >> np.uint64(33)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def surface_color(points: np.ndarray, base_color: np.ndarray, tex_seed: int,
                  detail: float) -> np.ndarray:
    """Reflectance at 3D surface points: sinusoidal stripes + lattice patches.

    Purely a function of world position so every view observes the same
    color, which is what makes multiview feature matching well posed.
    """
    pts = np.atleast_2d(points)
    rng = np.random.default_rng(tex_seed)
    freqs = rng.uniform(0.5, 1.5, size=(3, 3)) * detail * rng.choice([-1, 1], size=(3, 3))
    phases = rng.uniform(0, 2 * np.pi, size=3)
    waves = np.sin(pts @ freqs.T + phases).mean(axis=1)          # [-1, 1]
    cells = np.floor(pts * (detail * 1.7) + rng.uniform(0, 1, size=3))
    patch = _lattice_hash(cells, tex_seed)                        # [0, 1)
    shade = 0.35 + 0.30 * (0.5 + 0.5 * waves) + 0.35 * patch
    return np.clip(base_color[None, :] * shade[:, None], 0.0, 1.0)


# ---- ray-primitive intersection ----

def _intersect_sphere(origin: np.ndarray, dirs: np.ndarray, sphere: Sphere) -> np.ndarray:
    oc = origin - sphere.center
    a = np.einsum("nd,nd->n", dirs, dirs)
    b = 2.0 * dirs @ oc
    c = oc @ oc - sphere.radius ** 2
    disc = b * b - 4 * a * c
    t = np.full(len(dirs), np.inf)
    hit = disc >= 0
    if np.any(hit):
        sq = np.sqrt(disc[hit])
        t0 = (-b[hit] - sq) / (2 * a[hit])
        t1 = (-b[hit] + sq) / (2 * a[hit])
        tt = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
        t[hit] = tt
    return t


def _intersect_triangle(origin: np.ndarray, dirs: np.ndarray, tri: Triangle) -> np.ndarray:
    """Moeller-Trumbore, one origin against many directions."""
    e1 = tri.v1 - tri.v0
    e2 = tri.v2 - tri.v0
    pvec = np.cross(dirs, e2)
    det = pvec @ e1
    t = np.full(len(dirs), np.inf)
    ok = np.abs(det) > 1e-12
    if not np.any(ok):
        return t
    inv = 1.0 / det[ok]
    tvec = origin - tri.v0
    u = (pvec[ok] @ tvec) * inv
    qvec = np.cross(tvec, e1)
    v = (dirs[ok] @ qvec) * inv
    tt = (e2 @ qvec) * inv
    good = (u >= 0) & (v >= 0) & (u + v <= 1) & (tt > 1e-9)
    vals = np.where(good, tt, np.inf)
    t[ok] = vals
    return t


def raycast(origin: np.ndarray, dirs: np.ndarray, primitives: list) -> tuple[np.ndarray, np.ndarray]:
    """Nearest hit parameter and primitive id (-1 for miss) per ray."""
    best_t = np.full(len(dirs), np.inf)
    best_id = np.full(len(dirs), -1, dtype=np.int64)
    for i, prim in enumerate(primitives):
        if isinstance(prim, Sphere):
            t = _intersect_sphere(origin, dirs, prim)
        else:
            t = _intersect_triangle(origin, dirs, prim)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_id[closer] = i
    return best_t, best_id


def render_view(pose: Pose, intr: Intrinsics, primitives: list,
                texture_detail: float) -> tuple[np.ndarray, np.ndarray]:
    """Ray-cast RGB reflectance and exact z-depth (0 where no surface).

    Rays use unnormalized camera directions with unit z so the hit parameter
    equals the camera-frame depth directly.
    """
    h, w = intr.height, intr.width
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    cam_dirs = np.stack([(us.ravel() - intr.cx) / intr.fx,
                         (vs.ravel() - intr.cy) / intr.fy,
                         np.ones(h * w)], axis=1)
    world_dirs = cam_dirs @ pose.rotation.T
    t, prim_id = raycast(pose.translation, world_dirs, primitives)

    rgb = np.zeros((h * w, 3))
    depth = np.where(np.isfinite(t), t, 0.0)
    for i, prim in enumerate(primitives):
        sel = prim_id == i
        if not np.any(sel):
            continue
        hits = pose.translation + world_dirs[sel] * t[sel, None]
        rgb[sel] = surface_color(hits, prim.color, prim.tex_seed, texture_detail)
    return (rgb.reshape(h, w, 3).astype(np.float32),
            depth.reshape(h, w).astype(np.float32))


# ---- camera and primitive placement ----

def _look_at(position: np.ndarray, target: np.ndarray) -> Pose:
    """Camera-to-world pose with x-right / y-down / z-forward, world up +z."""
    fwd = target - position
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0])
    x = np.cross(fwd, up)
    x = x / np.linalg.norm(x)
    y = np.cross(fwd, x)
    return Pose(np.stack([x, y, fwd], axis=1), position)


def _random_primitives(rng: np.random.Generator, spec: SceneSpec) -> list:
    e = spec.extent_m
    prims: list = []
    # floor: two triangles closing the bottom of the box
    lo, hi, z = -e / 2, e / 2, -e / 2
    floor_color = rng.uniform(0.35, 0.85, size=3)
    floor_seed = int(rng.integers(1 << 31))
    prims.append(Triangle(np.array([lo, lo, z]), np.array([hi, lo, z]),
                          np.array([hi, hi, z]), floor_color, floor_seed))
    prims.append(Triangle(np.array([lo, lo, z]), np.array([hi, hi, z]),
                          np.array([lo, hi, z]), floor_color, floor_seed))
    for _ in range(spec.num_primitives):
        color = rng.uniform(0.25, 1.0, size=3)
        tex_seed = int(rng.integers(1 << 31))
        if rng.uniform() < 0.6:
            radius = rng.uniform(0.08, 0.16) * e
            center = np.array([rng.uniform(-0.32, 0.32) * e,
                               rng.uniform(-0.32, 0.32) * e,
                               rng.uniform(-0.5 * e + radius, 0.22 * e)])
            prims.append(Sphere(center, radius, color, tex_seed))
        else:
            c = np.array([rng.uniform(-0.32, 0.32) * e,
                          rng.uniform(-0.32, 0.32) * e,
                          rng.uniform(-0.38, 0.25) * e])
            d1 = rng.normal(size=3) * 0.18 * e
            d2 = rng.normal(size=3) * 0.18 * e
            v = np.clip(np.stack([c - d1, c + d1, c + d2]), -e / 2, e / 2)
            prims.append(Triangle(v[0], v[1], v[2], color, tex_seed))
    return prims


def scene_bounds(primitives: list) -> np.ndarray:
    los, his = zip(*(p.bounds() for p in primitives))
    return np.stack([np.min(los, axis=0), np.max(his, axis=0)])


def sample_camera(rng: np.random.Generator, spec: SceneSpec, azimuth: float) -> Pose:
    e = spec.extent_m
    polar = np.radians(rng.uniform(30.0, 62.0))
    radius = rng.uniform(0.95, 1.35) * e
    pos = radius * np.array([np.sin(polar) * np.cos(azimuth),
                             np.sin(polar) * np.sin(azimuth),
                             np.cos(polar)])
    target = rng.uniform(-0.08, 0.08, size=3) * e
    return _look_at(pos, target)


def generate_scene(spec: SceneSpec | dict, seed: int, name: str | None = None) -> Scene:
    """Build a full synthetic scene: geometry, cameras, renders, depth noise."""
    if isinstance(spec, dict):
        spec = SceneSpec.from_dict(dict(spec))
    if spec.num_frames < 2:
        raise ValueError("need at least 2 frames")
    if spec.image_size < 16:
        raise ValueError("image_size must be >= 16")
    rng = np.random.default_rng(seed)
    prims = _random_primitives(rng, spec)
    bounds = scene_bounds(prims)

    size = spec.image_size
    focal = 0.5 * size / np.tan(np.radians(spec.fov_deg) / 2)
    intr = Intrinsics(focal, focal, (size - 1) / 2.0, (size - 1) / 2.0, size, size)

    frames = []
    for i in range(spec.num_frames):
        azimuth = (i + rng.uniform(0.0, 0.6)) * 2 * np.pi / spec.num_frames
        pose = sample_camera(rng, spec, azimuth)
        rgb, depth_gt = render_view(pose, intr, prims, spec.texture_detail)
        depth = depth_gt.copy()
        valid = depth_gt > 0
        if spec.depth_sigma_rel > 0:
            mult = 1.0 + spec.depth_sigma_rel * rng.standard_normal(depth.shape).astype(np.float32)
            depth = np.where(valid, np.maximum(depth * mult, 1e-3), 0.0).astype(np.float32)
        if spec.dropout_rate > 0:
            drop = rng.uniform(size=depth.shape) < spec.dropout_rate
            depth = np.where(drop, 0.0, depth).astype(np.float32)
        frames.append(SupportFrame(rgb, depth, pose, intr, depth_gt=depth_gt))

    n_test = min(spec.num_test_frames, spec.num_frames - 1)
    split_train = list(range(spec.num_frames - n_test))
    split_test = list(range(spec.num_frames - n_test, spec.num_frames))
    return Scene(name=name or f"scene{seed}", frames=frames, bounds=bounds,
                 geometry=prims, train_indices=split_train, test_indices=split_test,
                 spec=spec.to_dict(), seed=seed)
