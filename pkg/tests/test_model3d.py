"""Conditional 3D model: lifting, visibility, aggregation, prior, rendering."""

import numpy as np
import pytest

from conftest import randomized_store
from matchloc import model3d as m3d
from matchloc import nn
from matchloc.geometry import project
from matchloc.pipeline import Config
from matchloc.scene import FusedDepth, warp_and_fuse_depth
from matchloc.synth import SceneSpec, generate_scene
from matchloc.tensor import Tensor, grad_check, no_grad, tensor

rng = np.random.default_rng(0)


class TestLift:
    def test_noiseless_confidence_is_one(self, store):
        # a single support frame fuses to exactly its own raw depth
        scene = generate_scene(SceneSpec(num_frames=3, image_size=32,
                                         depth_sigma_rel=0.0, dropout_rate=0.0), seed=4)
        model = m3d.assemble_model(store, scene.frames[:1], scene.bounds, adapt=False)
        assert np.allclose(model.points["coarse"].confidences, 1.0)

    def test_confidence_at_five_percent_gap(self, store, small_scene):
        frames = [small_scene.frames[0]]
        import matchloc.features as feat
        pyramids = [feat.extract_pyramid(store, frames[0].image)]
        fused_raw = warp_and_fuse_depth(frames)
        # force fused = raw / 1.05 so the raw depth sits 5% above fused
        fused = [FusedDepth((fused_raw[0].depth / 1.05).astype(np.float32),
                            fused_raw[0].valid)]
        pts = m3d.lift_support_points(store, frames, pyramids, fused, stride=4)
        conf = pts["coarse"].confidences
        assert np.allclose(conf[conf < 1.0], np.exp(-1.0), atol=1e-3)

    def test_positions_reproject_to_pixels(self, store, small_scene):
        frames = small_scene.frames[:3]
        import matchloc.features as feat
        pyramids = [feat.extract_pyramid(store, f.image) for f in frames]
        fused = warp_and_fuse_depth(frames)
        pts = m3d.lift_support_points(store, frames, pyramids, fused, stride=2)
        nsp = pts["coarse"]
        stride_grid = 2
        for fi, frame in enumerate(frames):
            sel = nsp.frame_idx == fi
            pix, _, _ = project(frame.pose, frame.intr, nsp.positions[sel])
            assert np.abs(pix - np.round(pix / stride_grid) * stride_grid).max() < 1e-6

    def test_unit_view_dirs(self, scene_model):
        model, _ = scene_model
        norms = np.linalg.norm(model.points["coarse"].view_dirs, axis=1)
        assert np.abs(norms - 1.0).max() < 1e-6

    def test_empty_depths_raise(self, store, small_scene):
        import matchloc.features as feat
        from matchloc.scene import SupportFrame
        f = small_scene.frames[0]
        empty = SupportFrame(f.image, np.zeros_like(f.depth), f.pose, f.intr)
        pyramids = [feat.extract_pyramid(store, empty.image)]
        fused = warp_and_fuse_depth([empty])
        with pytest.raises(ValueError):
            m3d.lift_support_points(store, [empty], pyramids, fused, stride=2)


class TestVisibility:
    def test_on_surface_with_zero_bias(self, store, scene_model):
        model, _ = scene_model
        frame, fus = model.frames[0], model.fused[0]
        vs, us = np.nonzero(fus.valid)
        pick = slice(0, 50)
        from matchloc.geometry import unproject
        pts = unproject(frame.pose, frame.intr,
                        np.stack([us[pick], vs[pick]], 1).astype(float),
                        fus.depth[vs[pick], us[pick]].astype(float))
        old_b = store["vis.b"].data.copy()
        store["vis.b"].data = np.array(0.0, dtype=np.float32)
        try:
            vis = m3d.visibility(store, pts, [frame], [fus]).data
        finally:
            store["vis.b"].data = old_b
        assert np.abs(vis - 0.5).max() < 1e-4

    def test_point_far_behind_surface(self, store, scene_model):
        model, _ = scene_model
        frame, fus = model.frames[0], model.fused[0]
        v, u = np.argwhere(fus.valid)[100]
        d = float(fus.depth[v, u])
        # pick a small scale so "10 sigma behind" is reachable at positive
        # depth, then solve (d - z + b) / (s z) = -10 for z
        s_val = 0.02
        old_b, old_s = store["vis.b"].data.copy(), store["vis.s_raw"].data.copy()
        store["vis.b"].data = np.array(0.0, dtype=np.float32)
        store["vis.s_raw"].data = np.array(np.log(np.expm1(s_val)), dtype=np.float32)
        try:
            z = d / (1 - 10 * s_val)
            from matchloc.geometry import unproject
            pt = unproject(frame.pose, frame.intr, np.array([[u, v]], dtype=float),
                           np.array([z]))
            vis = m3d.visibility(store, pt, [frame], [fus]).data
        finally:
            store["vis.b"].data = old_b
            store["vis.s_raw"].data = old_s
        assert vis[0, 0] < 0.01

    def test_behind_camera_is_exactly_zero(self, store, scene_model):
        model, _ = scene_model
        frame, fus = model.frames[0], model.fused[0]
        behind = frame.pose.center - 2.0 * frame.pose.forward
        vis = m3d.visibility(store, behind[None, :], [frame], [fus]).data
        assert vis[0, 0] == 0.0

    def test_monotone_in_depth_behind(self, store, scene_model):
        model, _ = scene_model
        frame, fus = model.frames[0], model.fused[0]
        v, u = np.argwhere(fus.valid)[40]
        d = float(fus.depth[v, u])
        from matchloc.geometry import unproject
        depths = d * np.array([1.0, 1.1, 1.3, 1.6, 2.0])
        pix = np.repeat(np.array([[u, v]], dtype=float), len(depths), axis=0)
        pts = unproject(frame.pose, frame.intr, pix, depths)
        vis = m3d.visibility(store, pts, [frame], [fus]).data[:, 0]
        assert np.all(np.diff(vis) <= 1e-9)


class TestAggregation:
    def test_identical_features_zero_variance(self, store, small_scene):
        # same frame repeated: every view contributes the same sample
        f = small_scene.frames[0]
        from matchloc.scene import SupportFrame
        dupes = [SupportFrame(f.image, f.depth, f.pose, f.intr) for _ in range(3)]
        model = m3d.assemble_model(store, dupes, small_scene.bounds, adapt=False)
        pts = model.points["coarse"].positions[:40]
        vis = m3d.visibility(store, pts, model.frames, model.fused)
        import matchloc.features as feat
        # recompute the mean/variance pieces the mv MLP consumes
        n, v = len(pts), 3
        pix = np.concatenate([project(fr.pose, fr.intr, pts)[0] for fr in model.frames])
        rows = np.repeat(np.arange(v), n)
        rgb = model.sample_stacked(0, rows, pix)
        lvl = model.sample_stacked(3, rows, pix)
        from matchloc.tensor import concatenate
        feats = concatenate([rgb, lvl], axis=-1).data.reshape(v, n, -1)
        assert np.abs(feats.std(axis=0)).max() < 1e-6

    def test_matches_loop_oracle(self, store, scene_model):
        model, _ = scene_model
        pts = model.points["coarse"].positions[10:30].astype(np.float64)
        with no_grad():
            vis = m3d.visibility(store, pts, model.frames, model.fused)
            f_m = m3d.aggregate_multiview(store, pts, model, vis, "coarse")
        # loop oracle: per point, weighted mean/var then the same MLP
        n, v = len(pts), len(model.frames)
        samples = np.zeros((n, v, 67))
        for j, frame in enumerate(model.frames):
            pix, _, _ = project(frame.pose, frame.intr, pts)
            with no_grad():
                s0 = m3d.sample_frame_level(model.stacked_maps[0], v, 0,
                                            np.full(len(pts), j), pix).data
                s3 = m3d.sample_frame_level(model.stacked_maps[3], v, 3,
                                            np.full(len(pts), j), pix).data
            samples[:, j, :] = np.concatenate([s0, s3], axis=1)
        w = vis.data.astype(np.float64)
        mv_in = np.zeros((n, 2 * 67 + 1))
        for i in range(n):
            tot = w[i].sum()
            if tot < 1e-8:
                mv_in[i, -1] = 1.0
                continue
            wn = w[i] / tot
            mu = (samples[i] * wn[:, None]).sum(axis=0)
            var = (((samples[i] - mu) ** 2) * wn[:, None]).sum(axis=0)
            mv_in[i, :67] = mu
            mv_in[i, 67:134] = var
        with no_grad():
            widths = [135, store.meta["mv_hidden"], store.meta["c_coarse"]]
            oracle = nn.mlp_forward(store, "agg.coarse.mv", tensor(mv_in), widths).data
        assert np.abs(oracle - f_m.data).max() < 1e-4

    def test_local_k1_collapses(self, store):
        meta = store.meta
        c = meta["c_coarse"]
        f_m = tensor(rng.normal(size=(5, c)))
        neigh = tensor(rng.normal(size=(5, 1, c)))
        conf = np.ones((5, 1))
        dists = np.full((5, 1), 0.3)
        rel = rng.normal(size=(5, 1, 3)) * 0.01
        desc, inter = m3d.aggregate_local(store, f_m, neigh, conf, dists, rel,
                                          "coarse", pos_scale=1.0)
        assert np.allclose(inter.w_attention.data, 1.0)
        assert np.allclose(inter.w_distance, 1.0)
        assert np.abs(desc.data - inter.correlated.data[:, 0, :]).max() < 1e-6

    def test_zero_confidence_kills_descriptor(self, store):
        c = store.meta["c_coarse"]
        f_m = tensor(rng.normal(size=(4, c)))
        neigh = tensor(rng.normal(size=(4, 6, c)))
        conf = np.zeros((4, 6))
        dists = np.abs(rng.normal(size=(4, 6))) + 0.1
        rel = rng.normal(size=(4, 6, 3)) * 0.01
        desc, _ = m3d.aggregate_local(store, f_m, neigh, conf, dists, rel,
                                      "coarse", pos_scale=1.0)
        assert np.all(desc.data == 0.0)

    def test_matches_equation_loop_oracle(self, store):
        c = store.meta["c_coarse"]
        k = 7
        f_m = tensor(rng.normal(size=(6, c)))
        neigh_np = rng.normal(size=(6, k, c))
        conf = rng.uniform(0.2, 1.0, size=(6, k))
        dists = np.abs(rng.normal(size=(6, k))) + 0.05
        rel = rng.normal(size=(6, k, 3)) * 0.02
        with no_grad():
            desc, inter = m3d.aggregate_local(store, f_m, tensor(neigh_np), conf,
                                              dists, rel, "coarse", pos_scale=1.0)
        w_a = inter.w_attention.data.astype(np.float64)
        values = inter.correlated.data.astype(np.float64)
        oracle = np.zeros((6, c))
        for i in range(6):
            wd = 1.0 / (dists[i] + 1e-6)
            wd = wd / wd.sum()
            for kk in range(k):
                w = w_a[i, kk] * wd[kk] * conf[i, kk]
                oracle[i] += w * values[i, kk] / k
        assert np.abs(oracle - desc.data).max() < 1e-6

    def test_w_final_definition(self, store):
        c = store.meta["c_coarse"]
        f_m = tensor(rng.normal(size=(3, c)))
        neigh = tensor(rng.normal(size=(3, 4, c)))
        conf = rng.uniform(size=(3, 4))
        dists = np.abs(rng.normal(size=(3, 4))) + 0.1
        rel = np.zeros((3, 4, 3))
        _, inter = m3d.aggregate_local(store, f_m, neigh, conf, dists, rel,
                                       "coarse", pos_scale=1.0)
        assert np.abs(inter.w_attention.data.sum(axis=1) - 1.0).max() < 1e-5
        expect = inter.w_attention.data * inter.w_distance * conf
        assert np.abs(inter.w_final.data - expect).max() < 1e-6
        assert np.all(inter.w_final.data >= 0)


class TestQueryDescriptors:
    def test_shape_and_duplicates(self, store, scene_model):
        model, _ = scene_model
        pts = model.points["coarse"].positions[:3]
        x = np.stack([pts[0], pts[0], pts[1]])
        with no_grad():
            d = m3d.query_descriptors(store, model, x, "coarse")
        assert d.shape == (3, store.meta["c_coarse"])
        assert np.array_equal(d.data[0], d.data[1])

    def test_prior_zero_init_is_bit_equal(self, tiny_cfg, small_scene):
        s = randomized_store(tiny_cfg, seed=21)
        supports = [small_scene.frames[i] for i in (0, 2, 4)]
        base = m3d.assemble_model(s, supports, small_scene.bounds, adapt=False)
        m3d.init_coord_prior(s, np.random.default_rng(5))
        with_prior = m3d.assemble_model(s, supports, small_scene.bounds, adapt=False,
                                        prior_enabled=True)
        x = base.points["coarse"].positions[5:25]
        with no_grad():
            a = m3d.query_descriptors(s, base, x, "coarse").data
            b = m3d.query_descriptors(s, with_prior, x, "coarse").data
        assert np.array_equal(a, b)

    def test_chunked_equals_unchunked(self, store, scene_model):
        model, _ = scene_model
        x = model.points["coarse"].positions[:60]
        with no_grad():
            a = m3d.query_descriptors(store, model, x, "coarse", chunk=60).data
            b = m3d.query_descriptors(store, model, x, "coarse", chunk=17).data
        assert np.abs(a - b).max() < 1e-6


class TestCoordResidual:
    def test_zero_at_init(self, tiny_cfg, small_scene):
        from matchloc.pipeline import build_store
        s = build_store(tiny_cfg, seed=3)
        m3d.init_coord_prior(s, np.random.default_rng(1))
        x = rng.uniform(-1, 1, size=(10, 3))
        out = m3d.coord_residual(s, x, small_scene.bounds, "coarse")
        assert np.all(out.data == 0.0)

    def test_disabled_raises(self, tiny_cfg, small_scene):
        from matchloc.pipeline import build_store
        s = build_store(tiny_cfg, seed=3)
        with pytest.raises(m3d.DisabledPriorError):
            m3d.coord_residual(s, np.zeros((1, 3)), small_scene.bounds, "coarse")

    @pytest.mark.parametrize("dtype,eps,tol", [(np.float64, 1e-5, 1e-6),
                                               (np.float32, 1e-3, 1e-3)])
    def test_gradient(self, tiny_cfg, dtype, eps, tol):
        cfg = Config(backbone_channels=(2, 3, 4), c_coarse=4, c_fine=4, heads=2,
                     mv_hidden=6, render_hidden=6, prior_hidden=6,
                     pe_freqs_rel=2, pe_freqs_dir=2, pe_freqs_coord=2)
        s = randomized_store(cfg, seed=13)
        m3d.init_coord_prior(s, np.random.default_rng(2))
        r = np.random.default_rng(10)  # kink-margin seed for the ReLU layers
        for name in s.names():
            if name.startswith("prior") and np.all(s[name].data == 0):
                s[name].data = r.normal(size=s[name].shape).astype(np.float32) * 0.05
        x = r.uniform(-0.5, 0.5, size=(6, 3))
        bounds = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])
        names = [n for n in s.names() if n.startswith("prior.coarse")]

        def fn(params):
            s2 = nn.ParamStore(meta=s.meta)
            s2.params = dict(s.params)
            for n, p in zip(names, params):
                s2.params[n] = p
            out = m3d.coord_residual(s2, x, bounds, "coarse")
            return (out * out).mean()

        with no_grad():
            mag = float(np.abs(m3d.coord_residual(s, x, bounds, "coarse").data).mean())
        assert mag > 1e-4  # alive
        err = grad_check(fn, [s[n] for n in names], eps=eps, dtype=dtype)
        assert err < tol, err


class TestRendering:
    def test_zero_density_black_and_transparent(self, store, scene_model):
        model, _ = scene_model
        # force the density head to large negative raw values
        w = store["render.head.l1.w"].data.copy()
        b = store["render.head.l1.b"].data.copy()
        store["render.head.l1.w"].data = np.zeros_like(w)
        store["render.head.l1.b"].data = np.array([-40.0, 0, 0, 0], dtype=np.float32)
        try:
            origins = np.repeat(model.frames[0].pose.center[None, :], 4, axis=0)
            dirs = np.repeat(model.frames[0].pose.forward[None, :], 4, axis=0)
            near, far, ok = m3d.ray_box_near_far(origins, dirs, model.bounds)
            with no_grad():
                out = m3d.render_rays(store, model, origins, dirs, near, far, 16)
            assert np.abs(out["rgb"].data).max() < 1e-6
            assert np.abs(out["opacity"].data).max() < 1e-6
        finally:
            store["render.head.l1.w"].data = w
            store["render.head.l1.b"].data = b

    def test_weights_bounded(self, store, scene_model):
        model, _ = scene_model
        rng2 = np.random.default_rng(4)
        origins = np.repeat(model.frames[1].pose.center[None, :], 32, axis=0)
        target = model.bounds.mean(axis=0) + rng2.normal(size=(32, 3)) * 0.2
        dirs = target - origins
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        near, far, ok = m3d.ray_box_near_far(origins, dirs, model.bounds)
        with no_grad():
            out = m3d.render_rays(store, model, origins[ok], dirs[ok],
                                  near[ok], far[ok], 32)
        w = out["weights"].data
        assert np.all(w >= 0)
        assert np.all(w.sum(axis=1) <= 1.0 + 1e-6)

    def test_single_sample_closed_form(self, store, scene_model):
        model, _ = scene_model
        origins = np.repeat(model.frames[0].pose.center[None, :], 3, axis=0)
        dirs = np.repeat(model.frames[0].pose.forward[None, :], 3, axis=0)
        near, far, _ = m3d.ray_box_near_far(origins, dirs, model.bounds)
        with no_grad():
            out = m3d.render_rays(store, model, origins, dirs, near, far, 1)
            # recompute sigma/color for the same midpoints through the head
            t_mid = near + 0.5 * (far - near)
            pts = origins + t_mid[:, None] * dirs
            desc = m3d.query_descriptors(store, model, pts, "fine")
            enc = nn.positional_encoding(tensor(dirs), store.meta["pe_freqs_dir"])
            from matchloc.tensor import concatenate
            head_in = concatenate([desc, enc], axis=-1)
            raw = nn.mlp_forward(store, "render.head", head_in,
                                 [head_in.shape[-1], store.meta["render_hidden"], 4])
            sigma = raw[:, 0:1].softplus().data[:, 0]
            color = raw[:, 1:4].sigmoid().data
        delta = far - t_mid
        alpha = 1.0 - np.exp(-sigma * delta)
        assert np.abs(out["opacity"].data - alpha).max() < 1e-5
        assert np.abs(out["rgb"].data - alpha[:, None] * color).max() < 1e-5

    def test_opaque_slab_expected_depth(self, tiny_cfg, small_scene):
        # huge positive density bias renders the box near plane as a slab
        s = randomized_store(tiny_cfg, seed=31)
        supports = [small_scene.frames[i] for i in (0, 2, 4)]
        model = m3d.assemble_model(s, supports, small_scene.bounds, adapt=False)
        s["render.head.l0.w"].data = np.zeros_like(s["render.head.l0.w"].data)
        s["render.head.l0.b"].data = np.zeros_like(s["render.head.l0.b"].data)
        s["render.head.l1.w"].data = np.zeros_like(s["render.head.l1.w"].data)
        s["render.head.l1.b"].data = np.array([60.0, 0, 0, 0], dtype=np.float32)
        origins = np.repeat(supports[0].pose.center[None, :], 5, axis=0)
        dirs = small_scene.bounds.mean(axis=0)[None, :] - origins
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        near, far, _ = m3d.ray_box_near_far(origins, dirs, model.bounds)
        num_samples = 32
        with no_grad():
            out = m3d.render_rays(s, model, origins, dirs, near, far, num_samples)
        spacing = (far - near) / num_samples
        # fully opaque from the first sample: expected depth = first midpoint
        assert np.abs(out["depth"].data - (near + 0.5 * spacing)).max() \
            < spacing.max() + 1e-6

    def test_render_losses_trivials(self):
        class R(dict):
            pass

        rendered = {"rgb": tensor(np.full((4, 3), 0.5)),
                    "depth": tensor(np.array([1.0, 2.0, 3.0, 4.0]))}
        lr_, ld = m3d.render_losses(rendered, np.full((4, 3), 0.5),
                                    np.array([1.0, 2.0, 3.0, 4.0]),
                                    np.ones(4, dtype=bool))
        assert lr_.item() < 1e-12 and ld.item() < 1e-12
        lr_, ld = m3d.render_losses(rendered, np.full((4, 3), 0.4),
                                    np.array([1.05, 2.05, 3.05, 4.05]),
                                    np.ones(4, dtype=bool))
        assert abs(lr_.item() - 0.01) < 1e-5
        assert abs(ld.item() - 0.05) < 1e-5


class TestModelGradients:
    """Trainable 3D-model paths against finite differences on tiny shapes."""

    @pytest.fixture(scope="class")
    def tiny_setup(self):
        cfg = Config(backbone_channels=(2, 3, 4), c_coarse=4, c_fine=4, heads=2,
                     mv_hidden=6, render_hidden=6, prior_hidden=6,
                     pe_freqs_rel=2, pe_freqs_dir=2, pe_freqs_coord=2)
        s = randomized_store(cfg, seed=41)
        scene = generate_scene(SceneSpec(num_frames=3, image_size=16,
                                         depth_sigma_rel=0.01, dropout_rate=0.05),
                               seed=17)
        model = m3d.assemble_model(s, scene.frames[:2], scene.bounds, adapt=False,
                                   lift_stride=4, k_neighbors=4)
        return s, scene, model

    def _check(self, s, names, fn, tol64=2e-6, tol32=1e-3):
        params = [s[n] for n in names]
        err64 = grad_check(fn, params, eps=1e-5, dtype=np.float64)
        assert err64 < tol64, (names, err64)
        err32 = grad_check(fn, params, eps=1e-3, dtype=np.float32)
        assert err32 < tol32, (names, err32)

    def test_visibility_scalars(self, tiny_setup):
        s, scene, model = tiny_setup
        pts = model.points["coarse"].positions[:12]

        def fn(params):
            s2 = nn.ParamStore(meta=s.meta)
            s2.params = dict(s.params)
            s2.params["vis.b"], s2.params["vis.s_raw"] = params
            vis = m3d.visibility(s2, pts, model.frames, model.fused)
            return (vis * vis).sum()

        self._check(s, ["vis.b", "vis.s_raw"], fn)

    def test_local_attention_params(self, tiny_setup):
        s, scene, model = tiny_setup
        r = np.random.default_rng(5)
        c = s.meta["c_coarse"]
        f_m = r.normal(size=(6, c))
        neigh = r.normal(size=(6, 4, c))
        conf = r.uniform(0.5, 1.0, size=(6, 4))
        dists = np.abs(r.normal(size=(6, 4))) + 0.1
        rel = r.normal(size=(6, 4, 3)) * 0.02
        names = [n for n in s.names() if n.startswith("agg.coarse.local")
                 or n.startswith("agg.coarse.relpos")]

        def fn(params):
            s2 = nn.ParamStore(meta=s.meta)
            s2.params = dict(s.params)
            for n, p in zip(names, params):
                s2.params[n] = p
            desc, inter = m3d.aggregate_local(s2, Tensor(f_m), Tensor(neigh), conf,
                                              dists, rel, "coarse", pos_scale=1.0)
            return (desc * desc).sum() + (inter.w_attention * inter.w_attention).sum()

        self._check(s, names, fn)

    def test_render_head_params(self, tiny_setup):
        s, scene, model = tiny_setup
        origins = np.repeat(scene.frames[0].pose.center[None, :], 2, axis=0)
        dirs = scene.bounds.mean(axis=0)[None, :] + np.array([[0.02, 0, 0], [0, 0.03, 0]]) \
            - origins
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        near, far, _ = m3d.ray_box_near_far(origins, dirs, model.bounds)
        names = [n for n in s.names() if n.startswith("render.head")]

        def fn(params):
            s2 = nn.ParamStore(meta=s.meta)
            s2.params = dict(s.params)
            for n, p in zip(names, params):
                s2.params[n] = p
            out = m3d.render_rays(s2, model, origins, dirs, near, far, 5)
            return (out["rgb"] * out["rgb"]).sum() + out["depth"].sum() * 0.1

        self._check(s, names, fn)

    def test_multiview_mlp_params(self, tiny_setup):
        s, scene, model = tiny_setup
        pts = model.points["coarse"].positions[:10]
        names = [n for n in s.names() if n.startswith("agg.coarse.mv")]

        def fn(params):
            s2 = nn.ParamStore(meta=s.meta)
            s2.params = dict(s.params)
            for n, p in zip(names, params):
                s2.params[n] = p
            vis = m3d.visibility(s2, pts, model.frames, model.fused)
            f_m = m3d.aggregate_multiview(s2, pts, model, vis, "coarse")
            return (f_m * f_m).mean()

        self._check(s, names, fn)
