"""Camera geometry: poses, pinhole projection, pose metrics, PnP + RANSAC.

Conventions: poses are camera-to-world, camera axes x-right / y-down /
z-forward, pixel (u, v) has u along width.  Integer pixel coordinates
address pixel centers.  All geometry runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DegenerateConfiguration(ValueError):
    """The minimal solver has no solution for the given points."""


class InsufficientInliers(RuntimeError):
    """RANSAC could not find a hypothesis supported by >= 4 inliers."""


@dataclass(frozen=True)
class Pose:
    """SE(3) camera-to-world transform."""

    rotation: np.ndarray     # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def validate(self, tol: float = 1e-9):
        r = self.rotation
        if not np.allclose(r @ r.T, np.eye(3), atol=tol):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > max(tol, 1e-9):
            raise ValueError("rotation determinant is not +1")

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: apply `other` first, then `self`."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return (pts - self.translation) @ self.rotation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return pts @ self.rotation.T + self.translation

    @property
    def center(self) -> np.ndarray:
        return self.translation

    @property
    def forward(self) -> np.ndarray:
        """World direction of the camera z (viewing) axis."""
        return self.rotation[:, 2]

    def matrix4(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix4(m) -> "Pose":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return Pose(m[:3, :3], m[:3, 3])


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")

    def k_matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


@dataclass(frozen=True)
class Correspondence:
    point3d: np.ndarray  # (3,) world meters
    pixel2d: np.ndarray  # (2,) pixels
    score: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "point3d", np.asarray(self.point3d, dtype=np.float64))
        object.__setattr__(self, "pixel2d", np.asarray(self.pixel2d, dtype=np.float64))


@dataclass(frozen=True)
class PoseError:
    translation_error: float  # meters
    rotation_error: float     # degrees


def project(pose: Pose, intr: Intrinsics, points: np.ndarray):
    """Project world points; returns (pixels (N,2), depth (N,), in_frustum (N,)).

    Points behind the camera are flagged, never rejected; their pixel values
    are computed from the (negative-z) division and should be ignored.
    """
    cam = pose.world_to_camera(points)
    z = cam[:, 2]
    safe_z = np.where(np.abs(z) < 1e-12, 1e-12, z)
    u = intr.fx * cam[:, 0] / safe_z + intr.cx
    v = intr.fy * cam[:, 1] / safe_z + intr.cy
    pixels = np.stack([u, v], axis=1)
    in_frustum = (z > 0) & (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
    return pixels, z, in_frustum


def unproject(pose: Pose, intr: Intrinsics, pixel, depth) -> np.ndarray:
    """Lift pixel(s) at camera-frame depth(s) to world points."""
    pixel = np.atleast_2d(np.asarray(pixel, dtype=np.float64))
    depth = np.atleast_1d(np.asarray(depth, dtype=np.float64))
    if np.any(depth <= 0):
        raise ValueError("unproject requires positive depth")
    x = (pixel[:, 0] - intr.cx) / intr.fx * depth
    y = (pixel[:, 1] - intr.cy) / intr.fy * depth
    cam = np.stack([x, y, depth], axis=1)
    return pose.camera_to_world(cam)


def pose_error(pred: Pose, gt: Pose) -> PoseError:
    """Translation distance and relative rotation angle arccos((tr-1)/2).

    The angle is evaluated as atan2(|antisymmetric part|, (tr-1)/2), which
    equals arccos((tr-1)/2) for angles in [0, pi] but keeps linear instead of
    square-root sensitivity to rounding near zero; arccos on float64-stored
    rotations bottoms out around 1e-6 degrees.  Bit-equal rotations return
    exactly zero.
    """
    dt = float(np.linalg.norm(pred.translation - gt.translation))
    if np.array_equal(pred.rotation, gt.rotation):
        return PoseError(dt, 0.0)
    rel = pred.rotation.T @ gt.rotation
    cos_angle = np.clip((np.trace(rel) - 1.0) / 2.0, -1.0, 1.0)
    vec = 0.5 * np.array([rel[2, 1] - rel[1, 2],
                          rel[0, 2] - rel[2, 0],
                          rel[1, 0] - rel[0, 1]])
    sin_angle = np.linalg.norm(vec)
    dr = float(np.degrees(np.arctan2(sin_angle, cos_angle)))
    return PoseError(dt, dr)


def _orthonormalize(r: np.ndarray) -> np.ndarray:
    """Nearest rotation by polar decomposition (det forced to +1)."""
    u, _, vt = np.linalg.svd(r)
    d = np.sign(np.linalg.det(u @ vt))
    u[:, -1] *= d
    return u @ vt


def _kabsch(cam_pts: np.ndarray, world_pts: np.ndarray) -> Pose:
    """Rigid camera-to-world transform best mapping cam_pts onto world_pts."""
    cc = cam_pts.mean(axis=0)
    cw = world_pts.mean(axis=0)
    h = (cam_pts - cc).T @ (world_pts - cw)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    s = np.diag([1.0, 1.0, d])
    r = vt.T @ s @ u.T
    return Pose(r, cw - r @ cc)


def _bearings(intr: Intrinsics, pixels: np.ndarray) -> np.ndarray:
    rays = np.stack([(pixels[:, 0] - intr.cx) / intr.fx,
                     (pixels[:, 1] - intr.cy) / intr.fy,
                     np.ones(len(pixels))], axis=1)
    return rays / np.linalg.norm(rays, axis=1, keepdims=True)


def _p3p_candidates(world: np.ndarray, bearings: np.ndarray) -> list[Pose]:
    """Grunert's three-point resection; returns all feasible candidate poses.

    Distances s2 = u*s1, s3 = v*s1 are eliminated down to a quartic in v,
    assembled numerically with polynomial arithmetic instead of a hand
    expansion of the coefficients.
    """
    p1, p2, p3 = world
    a2 = float(np.sum((p2 - p3) ** 2))
    b2 = float(np.sum((p1 - p3) ** 2))
    c2 = float(np.sum((p1 - p2) ** 2))
    if min(a2, b2, c2) < 1e-18:
        raise DegenerateConfiguration("coincident points in minimal set")
    f1, f2, f3 = bearings
    cos_a = float(f2 @ f3)
    cos_b = float(f1 @ f3)
    cos_g = float(f1 @ f2)

    # eq A: u^2 + v^2 - 2 u v cos_a - (a2/b2) (1 + v^2 - 2 v cos_b) = 0
    # eq B: 1 + u^2 - 2 u cos_g - (c2/b2) (1 + v^2 - 2 v cos_b) = 0
    # A - B gives u = N(v) / D(v); substitute into B and clear D^2.
    ab = a2 / b2
    cb = c2 / b2
    q = np.array([1.0, -2 * cos_b, 1.0])          # v^2 - 2 cos_b v + 1
    n_poly = np.polysub((ab - cb) * q, np.array([1.0, 0.0, -1.0]))  # numerator of u
    d_poly = np.array([-2 * cos_a, 2 * cos_g])                      # denominator of u
    # B * D^2: N^2 - 2 cos_g N D + D^2 (1 - cb (v^2 - 2 cos_b v + 1)) = 0
    quartic = np.polyadd(
        np.polysub(np.polymul(n_poly, n_poly),
                   2 * cos_g * np.polymul(n_poly, d_poly)),
        np.polymul(np.polymul(d_poly, d_poly),
                   np.polysub(np.array([1.0]), cb * q)))
    quartic = np.trim_zeros(quartic, "f")
    if quartic.size < 2:
        raise DegenerateConfiguration("degenerate quartic in P3P")

    poses = []
    for root in np.roots(quartic):
        if abs(root.imag) > 1e-8:
            continue
        v = float(root.real)
        if v <= 0:
            continue
        denom = float(np.polyval(d_poly, v))
        if abs(denom) < 1e-12:
            continue
        u = float(np.polyval(n_poly, v)) / denom
        if u <= 0:
            continue
        s1_sq = b2 / (1 + v * v - 2 * v * cos_b)
        if s1_sq <= 0:
            continue
        s1 = np.sqrt(s1_sq)
        cam_pts = np.stack([s1 * f1, u * s1 * f2, v * s1 * f3])
        poses.append(_kabsch(cam_pts, world))
    if not poses:
        raise DegenerateConfiguration("P3P produced no feasible pose")
    return poses


def _reprojection_errors(pose: Pose, intr: Intrinsics, world: np.ndarray,
                         pixels: np.ndarray) -> np.ndarray:
    proj, z, _ = project(pose, intr, world)
    err = np.linalg.norm(proj - pixels, axis=1)
    return np.where(z > 0, err, np.inf)


def _p3p_best(world: np.ndarray, pixels: np.ndarray, intr: Intrinsics) -> Pose:
    """P3P on the first three points, disambiguated on the fourth."""
    bearings = _bearings(intr, pixels[:3])
    candidates = _p3p_candidates(world[:3], bearings)
    errs = [_reprojection_errors(p, intr, world[3:4], pixels[3:4])[0] for p in candidates]
    return candidates[int(np.argmin(errs))]


def _refine_pose_lm(pose: Pose, intr: Intrinsics, world: np.ndarray, pixels: np.ndarray,
                    max_iters: int = 100, grad_tol: float = 1e-10) -> tuple[Pose, bool]:
    """Levenberg-Marquardt on the 6-DoF pose; returns (pose, converged)."""
    q = pose.rotation.T.copy()   # world-to-camera rotation
    t = pose.translation.copy()  # camera center
    lam = 1e-6

    def residuals(q_, t_):
        cam = (world - t_) @ q_.T
        z = cam[:, 2]
        safe_z = np.where(np.abs(z) < 1e-12, 1e-12, z)
        u = intr.fx * cam[:, 0] / safe_z + intr.cx
        v = intr.fy * cam[:, 1] / safe_z + intr.cy
        return np.stack([u, v], axis=1) - pixels, cam

    converged = False
    res, cam = residuals(q, t)
    cost = float(np.sum(res ** 2))
    for _ in range(max_iters):
        x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
        z = np.where(np.abs(z) < 1e-12, 1e-12, z)
        # d(pixel)/d(cam point)
        j_proj = np.zeros((len(world), 2, 3))
        j_proj[:, 0, 0] = intr.fx / z
        j_proj[:, 0, 2] = -intr.fx * x / z ** 2
        j_proj[:, 1, 1] = intr.fy / z
        j_proj[:, 1, 2] = -intr.fy * y / z ** 2
        # cam = exp(w)^ q (X - t): d(cam)/dw = -[cam]x, d(cam)/dt = -q
        j_cam_w = np.zeros((len(world), 3, 3))
        j_cam_w[:, 0, 1] = cam[:, 2]
        j_cam_w[:, 0, 2] = -cam[:, 1]
        j_cam_w[:, 1, 0] = -cam[:, 2]
        j_cam_w[:, 1, 2] = cam[:, 0]
        j_cam_w[:, 2, 0] = cam[:, 1]
        j_cam_w[:, 2, 1] = -cam[:, 0]
        jac = np.concatenate([
            np.einsum("nij,njk->nik", j_proj, j_cam_w),
            np.einsum("nij,jk->nik", j_proj, -q),
        ], axis=2).reshape(-1, 6)
        r = res.reshape(-1)
        g = jac.T @ r
        if np.linalg.norm(g) < grad_tol:
            converged = True
            break
        h = jac.T @ jac
        step_ok = False
        for _ in range(12):
            try:
                delta = np.linalg.solve(h + lam * np.diag(np.diag(h)) + 1e-15 * np.eye(6), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            w = delta[:3]
            angle = np.linalg.norm(w)
            if angle < 1e-15:
                dr = np.eye(3)
            else:
                k = w / angle
                kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
                dr = np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * (kx @ kx)
            q_new = _orthonormalize(dr @ q)
            t_new = t + delta[3:]
            res_new, cam_new = residuals(q_new, t_new)
            cost_new = float(np.sum(res_new ** 2))
            if cost_new < cost:
                q, t, res, cam, cost = q_new, t_new, res_new, cam_new, cost_new
                lam = max(lam * 0.3, 1e-12)
                step_ok = True
                break
            lam *= 10
        if not step_ok:
            # no descent direction left at any damping: treat as converged
            converged = np.linalg.norm(g) < 1e-6
            break
    return Pose(q.T, t), converged


def solve_pnp(corrs: list[Correspondence], intr: Intrinsics) -> Pose:
    """Least-squares pose from >= 4 correspondences (P3P seed + LM refine).

    Raises DegenerateConfiguration when no minimal solution exists.  When LM
    stops on the iteration cap rather than the gradient tolerance the
    best-effort pose is still returned.
    """
    if len(corrs) < 4:
        raise ValueError("solve_pnp requires at least 4 correspondences")
    world = np.stack([c.point3d for c in corrs])
    pixels = np.stack([c.pixel2d for c in corrs])

    seed = None
    n = len(corrs)
    # first workable minimal set among a few deterministic picks
    for combo in _seed_combos(n):
        try:
            seed = _p3p_best(world[list(combo)], pixels[list(combo)], intr)
            break
        except DegenerateConfiguration:
            continue
    if seed is None:
        raise DegenerateConfiguration("no P3P seed found")
    pose, _ = _refine_pose_lm(seed, intr, world, pixels)
    return pose


def _seed_combos(n: int):
    yield (0, 1, 2, 3)
    if n > 4:
        step = max(n // 4, 1)
        idx = [(i * step) % n for i in range(4)]
        if len(set(idx)) == 4:
            yield tuple(idx)
        yield tuple(range(n - 4, n))


def ransac_pnp(corrs: list[Correspondence], intr: Intrinsics,
               iterations: int = 500, inlier_threshold_px: float = 2.0,
               seed: int = 0) -> tuple[Pose, np.ndarray]:
    """Hypothesize-and-verify PnP; returns (pose, inlier mask in input order).

    Sampling draws index sets from a canonically sorted copy (pixel, then
    point, lexicographically) so the result is invariant to permutations of
    the input list for a fixed seed.
    """
    if len(corrs) < 4:
        raise ValueError("ransac_pnp requires at least 4 correspondences")
    world = np.stack([c.point3d for c in corrs])
    pixels = np.stack([c.pixel2d for c in corrs])
    order = np.lexsort((world[:, 2], world[:, 1], world[:, 0], pixels[:, 1], pixels[:, 0]))
    w_sorted = world[order]
    p_sorted = pixels[order]
    n = len(corrs)

    rng = np.random.default_rng(seed)
    best_count = -1
    best_mask = None
    for _ in range(iterations):
        pick = rng.choice(n, size=4, replace=False)
        try:
            hyp = _p3p_best(w_sorted[pick], p_sorted[pick], intr)
        except DegenerateConfiguration:
            continue
        errs = _reprojection_errors(hyp, intr, w_sorted, p_sorted)
        mask = errs < inlier_threshold_px
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
    if best_mask is None or best_count < 4:
        raise InsufficientInliers(f"best support {max(best_count, 0)} < 4")

    inlier_idx = np.flatnonzero(best_mask)
    subset = [Correspondence(w_sorted[i], p_sorted[i]) for i in inlier_idx]
    pose = solve_pnp(subset, intr)
    final_sorted = _reprojection_errors(pose, intr, w_sorted, p_sorted) < inlier_threshold_px
    if int(final_sorted.sum()) < 4:
        raise InsufficientInliers("refit pose lost inlier support")
    final_mask = np.zeros(n, dtype=bool)
    final_mask[order] = final_sorted
    return pose, final_mask
