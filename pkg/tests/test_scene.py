"""Scene generation, disk format, support selection, depth fusion."""

import numpy as np
import pytest

from matchloc import features as feat
from matchloc.geometry import Intrinsics, unproject
from matchloc.scene import (FusedDepth, SupportFrame, farthest_pose_sampling,
                            load_scene, read_ppm, read_raw_depth, retrieve_support,
                            save_scene, warp_and_fuse_depth, write_ppm,
                            write_raw_depth)
from matchloc.synth import (SceneSpec, Sphere, Triangle, _look_at, generate_scene,
                            render_view)


@pytest.fixture(scope="module")
def noisy_scene():
    return generate_scene(SceneSpec(num_frames=6, image_size=48,
                                    depth_sigma_rel=0.03, dropout_rate=0.12), seed=3)


class TestGeneration:
    def test_deterministic_per_seed(self):
        spec = SceneSpec(num_frames=4, image_size=32)
        a = generate_scene(spec, seed=9)
        b = generate_scene(spec, seed=9)
        for fa, fb in zip(a.frames, b.frames):
            assert np.array_equal(fa.image, fb.image)
            assert np.array_equal(fa.depth, fb.depth)
            assert np.array_equal(fa.pose.matrix4(), fb.pose.matrix4())
        c = generate_scene(spec, seed=10)
        assert not np.array_equal(a.frames[0].image, c.frames[0].image)

    def test_zero_noise_keeps_exact_depth(self):
        scene = generate_scene(SceneSpec(num_frames=3, image_size=32,
                                         depth_sigma_rel=0.0, dropout_rate=0.0), seed=5)
        for f in scene.frames:
            assert np.array_equal(f.depth, f.depth_gt)

    def test_depths_within_bounds(self, noisy_scene):
        lo, hi = noisy_scene.bounds
        margin = 0.01 * (hi - lo)
        for f in noisy_scene.frames:
            vs, us = np.nonzero(f.depth_gt > 0)
            pts = unproject(f.pose, f.intr, np.stack([us, vs], 1).astype(float),
                            f.depth_gt[vs, us].astype(float))
            assert np.all(pts >= lo - margin - 1e-9)
            assert np.all(pts <= hi + margin + 1e-9)

    def test_depth_matches_independent_raycaster(self):
        scene = generate_scene(SceneSpec(num_frames=2, image_size=24,
                                         depth_sigma_rel=0.0, dropout_rate=0.0), seed=7)
        frame = scene.frames[0]
        rng = np.random.default_rng(0)
        rows = rng.integers(0, 24, 60)
        cols = rng.integers(0, 24, 60)
        for v, u in zip(rows, cols):
            expected = _oracle_ray_depth(frame, scene.geometry, u, v)
            got = frame.depth_gt[v, u]
            if expected == 0.0 or got == 0.0:
                assert expected == got
            else:
                assert abs(expected - got) < 1e-6

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            generate_scene(SceneSpec(num_frames=1), seed=0)
        with pytest.raises(ValueError):
            generate_scene(SceneSpec(image_size=8), seed=0)


def _oracle_ray_depth(frame, prims, u, v):
    """Second, independent intersection routine (geometric sphere test,
    plane-then-barycentric triangle test)."""
    d_cam = np.array([(u - frame.intr.cx) / frame.intr.fx,
                      (v - frame.intr.cy) / frame.intr.fy, 1.0])
    d = frame.pose.rotation @ d_cam
    t0 = frame.pose.translation
    best = np.inf
    for p in prims:
        if isinstance(p, Sphere):
            oc = p.center - t0
            tc = oc @ d / (d @ d)
            d2 = oc @ oc - tc ** 2 * (d @ d)
            if d2 <= p.radius ** 2:
                dt = np.sqrt((p.radius ** 2 - d2) / (d @ d))
                for cand in (tc - dt, tc + dt):
                    if 1e-9 < cand < best:
                        best = cand
        else:
            n = np.cross(p.v1 - p.v0, p.v2 - p.v0)
            denom = n @ d
            if abs(denom) < 1e-14:
                continue
            cand = n @ (p.v0 - t0) / denom
            if cand <= 1e-9 or cand >= best:
                continue
            x = t0 + cand * d
            e0, e1, e2 = p.v1 - p.v0, p.v2 - p.v0, x - p.v0
            d00, d01, d11 = e0 @ e0, e0 @ e1, e1 @ e1
            den = d00 * d11 - d01 * d01
            if abs(den) < 1e-18:
                continue
            a = (d11 * (e2 @ e0) - d01 * (e2 @ e1)) / den
            b = (d00 * (e2 @ e1) - d01 * (e2 @ e0)) / den
            if a >= -1e-12 and b >= -1e-12 and a + b <= 1 + 1e-12:
                best = cand
    return best if np.isfinite(best) else 0.0


class TestSceneIO:
    def test_round_trip(self, noisy_scene, tmp_path):
        save_scene(noisy_scene, tmp_path)
        loaded = load_scene(tmp_path)
        assert loaded.name == noisy_scene.name
        assert np.array_equal(loaded.bounds, noisy_scene.bounds)
        assert loaded.train_indices == noisy_scene.train_indices
        assert loaded.test_indices == noisy_scene.test_indices
        assert len(loaded.geometry) == len(noisy_scene.geometry)
        for fa, fb in zip(noisy_scene.frames, loaded.frames):
            assert np.array_equal(fa.depth, fb.depth)
            assert np.array_equal(fa.depth_gt, fb.depth_gt)
            assert np.array_equal(fa.pose.matrix4(), fb.pose.matrix4())
            # images quantize to 8 bits in the PPM
            assert np.abs(fa.image - fb.image).max() <= 0.5 / 255 + 1e-6

    def test_ppm_and_depth_primitives(self, tmp_path):
        rng = np.random.default_rng(1)
        img = rng.uniform(size=(5, 7, 3)).astype(np.float32)
        write_ppm(tmp_path / "x.ppm", img)
        back = read_ppm(tmp_path / "x.ppm")
        assert back.shape == (5, 7, 3)
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-6
        depth = rng.uniform(0, 4, size=(5, 7)).astype(np.float32)
        write_raw_depth(tmp_path / "x.depth", depth)
        assert np.array_equal(read_raw_depth(tmp_path / "x.depth", 5, 7), depth)

    def test_depth_size_mismatch(self, tmp_path):
        write_raw_depth(tmp_path / "bad.depth", np.zeros((2, 2), dtype=np.float32))
        with pytest.raises(ValueError):
            read_raw_depth(tmp_path / "bad.depth", 3, 3)


class TestFarthestPoseSampling:
    def _frames_with_yaws(self, yaws_deg):
        frames = []
        size = 32
        intr = Intrinsics(30.0, 30.0, 15.5, 15.5, size, size)
        for yaw in np.radians(yaws_deg):
            target = np.array([np.cos(yaw), np.sin(yaw), 0.0])
            pose = _look_at(np.zeros(3) + np.array([0, 0, 1e-6]), target)
            frames.append(SupportFrame(np.zeros((size, size, 3), dtype=np.float32),
                                       np.zeros((size, size), dtype=np.float32),
                                       pose, intr))
        return frames

    def test_k_equals_length_returns_selection_order(self, noisy_scene):
        out = farthest_pose_sampling(noisy_scene.frames, len(noisy_scene.frames))
        assert sorted(out) == list(range(len(noisy_scene.frames)))
        assert out[0] == 0

    def test_hand_oracle_three_yaws(self):
        frames = self._frames_with_yaws([0.0, 10.0, 180.0])
        assert farthest_pose_sampling(frames, 2) == [0, 2]

    def test_matches_greedy_oracle(self, noisy_scene):
        fwd = np.stack([f.pose.forward for f in noisy_scene.frames])
        ang = np.degrees(np.arccos(np.clip(fwd @ fwd.T, -1, 1)))

        def oracle(k):
            sel = [0]
            while len(sel) < k:
                best_i, best_d = -1, -1.0
                for i in range(len(fwd)):
                    d = min(ang[i][j] for j in sel)
                    if d > best_d:
                        best_d, best_i = d, i
                sel.append(best_i)
            return sel

        for k in range(1, len(noisy_scene.frames) + 1):
            assert farthest_pose_sampling(noisy_scene.frames, k) == oracle(k)

    def test_prefix_property(self, noisy_scene):
        full = farthest_pose_sampling(noisy_scene.frames, len(noisy_scene.frames))
        for k in range(1, len(full)):
            assert farthest_pose_sampling(noisy_scene.frames, k) == full[:k]

    def test_k_out_of_range(self, noisy_scene):
        with pytest.raises(ValueError):
            farthest_pose_sampling(noisy_scene.frames, 0)
        with pytest.raises(ValueError):
            farthest_pose_sampling(noisy_scene.frames, len(noisy_scene.frames) + 1)


class TestRetrieval:
    @staticmethod
    def _embed(img):
        return np.concatenate([img.mean(axis=(0, 1)), img.std(axis=(0, 1))])

    def test_identical_frame_ranked_first(self, noisy_scene):
        out = retrieve_support(noisy_scene.frames[3].image, noisy_scene.frames, 3,
                               self._embed)
        assert out[0] == 3

    def test_k_one_two_frames(self, noisy_scene):
        out = retrieve_support(noisy_scene.frames[0].image, noisy_scene.frames[:2], 1,
                               self._embed)
        assert len(out) == 1

    def test_k_exceeds_frames(self, noisy_scene):
        with pytest.raises(ValueError):
            retrieve_support(noisy_scene.frames[0].image, noisy_scene.frames,
                             len(noisy_scene.frames) + 1, self._embed)

    def test_brightness_shift_beats_unrelated(self, store):
        # the brightened copy of a stored frame must outrank a frame from an
        # unrelated scene
        hits = 0
        trials = 40
        for t in range(trials):
            scene = generate_scene(SceneSpec(num_frames=2, image_size=64), seed=500 + t)
            unrelated = generate_scene(SceneSpec(num_frames=2, image_size=64),
                                       seed=900 + t)
            f0 = scene.frames[0]
            frames = [f0, SupportFrame(unrelated.frames[0].image, f0.depth,
                                       f0.pose, f0.intr)]
            query = np.clip(f0.image + 0.2, 0.0, 1.0).astype(np.float32)
            ranked = retrieve_support(query, frames, 2,
                                      lambda img: feat.embed_image(store, img))
            hits += ranked[0] == 0
        assert hits / trials >= 0.95


class TestDepthFusion:
    def test_single_frame_is_raw(self, noisy_scene):
        f = noisy_scene.frames[0]
        fused = warp_and_fuse_depth([f])
        assert np.array_equal(fused[0].depth, f.depth)
        assert np.array_equal(fused[0].valid, f.depth > 0)

    def test_identical_noiseless_frames(self):
        scene = generate_scene(SceneSpec(num_frames=3, image_size=32,
                                         depth_sigma_rel=0.0, dropout_rate=0.0), seed=5)
        f = scene.frames[0]
        dupes = [SupportFrame(f.image, f.depth, f.pose, f.intr) for _ in range(3)]
        for fd in warp_and_fuse_depth(dupes):
            assert np.array_equal(fd.depth, f.depth)

    def test_noisy_plane_error_reduction(self):
        rng = np.random.default_rng(0)
        big = 6.0
        plane = [Triangle(np.array([-big, -big, 0.0]), np.array([big, -big, 0.0]),
                          np.array([big, big, 0.0]), np.full(3, 0.5), 1),
                 Triangle(np.array([-big, -big, 0.0]), np.array([big, big, 0.0]),
                          np.array([-big, big, 0.0]), np.full(3, 0.5), 1)]
        size = 40
        focal = 0.5 * size / np.tan(np.radians(55) / 2)
        intr = Intrinsics(focal, focal, (size - 1) / 2, (size - 1) / 2, size, size)
        frames = []
        for i in range(5):
            az = i * 2 * np.pi / 5
            pose = _look_at(np.array([1.2 * np.cos(az), 1.2 * np.sin(az), 2.0]),
                            np.array([0.1, 0.0, 0.0]))
            rgb, gt = render_view(pose, intr, plane, 4.0)
            noisy = np.where(gt > 0, gt * (1 + 0.02 * rng.standard_normal(gt.shape)
                                           .astype(np.float32)), 0).astype(np.float32)
            frames.append(SupportFrame(rgb, noisy, pose, intr, depth_gt=gt))
        fused = warp_and_fuse_depth(frames)
        raw_err = np.mean([np.abs(f.depth - f.depth_gt)[(f.depth > 0)].mean()
                           for f in frames])
        fus_err = np.mean([np.abs(fd.depth - f.depth_gt)[fd.valid].mean()
                           for f, fd in zip(frames, fused)])
        assert fus_err < raw_err

    def test_two_agreeing_observations_stay_valid(self, noisy_scene):
        fused = warp_and_fuse_depth(noisy_scene.frames[:4])
        for f, fd in zip(noisy_scene.frames[:4], fused):
            # wherever the raw map was valid the fused map must stay valid
            assert np.all(fd.valid[f.depth > 0])

    def test_fills_some_dropout_holes(self, noisy_scene):
        fused = warp_and_fuse_depth(noisy_scene.frames)
        filled = 0
        for f, fd in zip(noisy_scene.frames, fused):
            filled += int((fd.valid & (f.depth == 0) & (f.depth_gt > 0)).sum())
        assert filled > 0
