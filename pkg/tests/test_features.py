"""Backbone pyramid and appearance adaptation."""

import numpy as np
import pytest

from matchloc import features as feat
from matchloc import nn
from matchloc.tensor import Tensor, grad_check, tensor

rng = np.random.default_rng(0)


def _small_store(channels=(4, 6, 8), delta_dim=5, seed=1):
    store = nn.ParamStore()
    r = np.random.default_rng(seed)
    feat.init_backbone(store, r, channels)
    feat.init_appearance(store, r, channels, delta_dim)
    return store


class TestPyramid:
    def test_shapes_default_channels(self, store):
        img = rng.uniform(size=(64, 64, 3)).astype(np.float32)
        pyr = feat.extract_pyramid(store, img)
        assert pyr[0].shape == (64, 64, 3)
        assert pyr[1].shape == (32, 32, 16)
        assert pyr[2].shape == (16, 16, 32)
        assert pyr[3].shape == (8, 8, 64)

    def test_odd_sizes_floor(self):
        store = _small_store()
        img = rng.uniform(size=(50, 34, 3)).astype(np.float32)
        pyr = feat.extract_pyramid(store, img)
        assert pyr[1].shape[:2] == (25, 17)
        assert pyr[2].shape[:2] == (13, 9)
        assert pyr[3].shape[:2] == (7, 5)

    def test_zero_weights_zero_features(self):
        store = _small_store()
        for name, p in store.params.items():
            if name.startswith("backbone"):
                p.data = np.zeros_like(p.data)
        pyr = feat.extract_pyramid(store, rng.uniform(size=(16, 16, 3)))
        for lvl in (1, 2, 3):
            assert np.all(pyr[lvl].data == 0)

    def test_too_small_rejected(self):
        store = _small_store()
        with pytest.raises(ValueError):
            feat.extract_pyramid(store, np.zeros((8, 8, 3)))

    @pytest.mark.parametrize("dtype,eps,tol", [(np.float64, 1e-5, 1e-6),
                                               (np.float32, 1e-3, 1e-3)])
    def test_pyramid_gradients(self, dtype, eps, tol):
        # seed chosen so no ReLU pre-activation sits within eps of zero
        # (finite differences are meaningless across the kink)
        store = _small_store(channels=(2, 3, 4), seed=5)
        img = np.random.default_rng(105).uniform(size=(16, 16, 3))
        names = [n for n in store.names() if n.startswith("backbone")]

        def fn(params):
            s = nn.ParamStore(meta=store.meta)
            s.params = dict(store.params)
            for n, p in zip(names, params):
                s.params[n] = p
            pyr = feat.extract_pyramid(s, Tensor(img))
            return sum(((pyr[l] * pyr[l]).mean() for l in (1, 2, 3)), tensor(0.0))

        pyr = feat.extract_pyramid(store, tensor(img))
        assert all(np.abs(pyr[l].data).mean() > 1e-3 for l in (1, 2, 3))  # alive
        err = grad_check(fn, [store[n] for n in names], eps=eps, dtype=dtype)
        assert err < tol, err


class TestAppearanceEmbedding:
    def test_constant_map(self):
        pyr = {1: tensor(np.full((6, 6, 3), 0.7))}
        emb = feat.appearance_embedding(pyr).data
        assert np.allclose(emb[:3], 0.7, atol=1e-6)
        # floor is sqrt(variance epsilon) = 1e-4 exactly, up to rounding
        assert np.all(emb[3:] <= 1e-4 * (1 + 1e-5))

    def test_two_pixel_channel(self):
        fmap = np.zeros((1, 2, 1), dtype=np.float32)
        fmap[0, 1, 0] = 2.0
        emb = feat.appearance_embedding({1: tensor(fmap)}).data
        assert abs(emb[0] - 1.0) < 1e-6          # mean
        assert abs(emb[1] - 1.0) < 1e-4          # population std

    def test_matches_two_pass_oracle(self):
        fmap = np.random.default_rng(4).normal(size=(9, 7, 5))
        emb = feat.appearance_embedding({1: Tensor(fmap)}).data
        mean = fmap.reshape(-1, 5).mean(axis=0)
        var = ((fmap.reshape(-1, 5) - mean) ** 2).mean(axis=0)
        assert np.abs(emb[:5] - mean).max() < 1e-6
        assert np.abs(emb[5:] - np.sqrt(var + 1e-8)).max() < 1e-6


class TestAppearanceDelta:
    def test_identity_at_matched_styles(self):
        store = _small_store()
        emb = tensor(rng.normal(size=(8,)))
        deltas = feat.appearance_delta(store, emb, emb)
        for lvl, (gamma, beta) in deltas.items():
            assert np.all(gamma.data == 1.0)
            assert np.all(beta.data == 0.0)

    def test_identity_at_init_any_inputs(self):
        store = _small_store()
        a = tensor(rng.normal(size=(8,)))
        b = tensor(rng.normal(size=(8,)))
        deltas = feat.appearance_delta(store, a, b)
        for gamma, beta in deltas.values():
            assert np.all(gamma.data == 1.0)
            assert np.all(beta.data == 0.0)

    def test_zeroed_heads_identity_with_trained_delta(self):
        store = _small_store()
        r = np.random.default_rng(5)
        for name, p in store.params.items():
            if name.startswith("appear.delta"):
                p.data = r.normal(size=p.shape).astype(np.float32) * 0.1
            if ".gamma.w" in name or ".beta.w" in name:
                p.data = np.zeros_like(p.data)
        deltas = feat.appearance_delta(store, tensor(r.normal(size=8)),
                                       tensor(r.normal(size=8)))
        for gamma, beta in deltas.values():
            assert np.all(gamma.data == 1.0)
            assert np.all(beta.data == 0.0)

    @pytest.mark.parametrize("dtype,eps,tol", [(np.float64, 1e-5, 1e-6),
                                               (np.float32, 1e-3, 1e-3)])
    def test_delta_path_gradient(self, dtype, eps, tol):
        store = _small_store(seed=6)
        r = np.random.default_rng(7)
        # jiggle the zero-init last layer so gradients reach every weight
        for name in ("appear.delta.l1.w", "appear.delta.l1.b"):
            store[name].data = r.normal(size=store[name].shape).astype(np.float32) * 0.1
        t_emb = r.normal(size=8)
        s_emb = r.normal(size=8)
        names = [n for n in store.names() if n.startswith("appear")]

        def fn(params):
            s = nn.ParamStore(meta=store.meta)
            s.params = dict(store.params)
            for n, p in zip(names, params):
                s.params[n] = p
            deltas = feat.appearance_delta(s, Tensor(t_emb), Tensor(s_emb))
            total = tensor(0.0)
            for gamma, beta in deltas.values():
                total = total + (gamma * gamma).sum() + (beta * beta).sum()
            return total

        err = grad_check(fn, [store[n] for n in names], eps=eps, dtype=dtype)
        assert err < tol, err


class TestModulate:
    def test_identity(self):
        fmap = tensor(rng.normal(size=(4, 5, 3)))
        out = feat.modulate(fmap, tensor(np.ones(3)), tensor(np.zeros(3)))
        assert np.allclose(out.data, fmap.data, atol=1e-7)

    def test_constant_offset(self):
        fmap = tensor(rng.normal(size=(4, 5, 3)))
        out = feat.modulate(fmap, tensor(np.zeros(3)), tensor([0.3, -0.1, 2.0]))
        assert np.allclose(out.data, np.broadcast_to([0.3, -0.1, 2.0], (4, 5, 3)),
                           atol=1e-6)

    def test_matches_scalar_loop(self):
        fmap = rng.normal(size=(3, 4, 2)).astype(np.float32)
        gamma = np.array([2.0, -0.5], dtype=np.float32)
        beta = np.array([-1.0, 0.25], dtype=np.float32)
        out = feat.modulate(tensor(fmap), tensor(gamma), tensor(beta)).data
        for i in range(3):
            for j in range(4):
                for c in range(2):
                    assert abs(out[i, j, c] - (gamma[c] * fmap[i, j, c] + beta[c])) < 1e-6

    def test_linearity_identity(self):
        r = np.random.default_rng(8)
        x = tensor(r.normal(size=(4, 4, 3)))
        y = tensor(r.normal(size=(4, 4, 3)))
        gamma = tensor(r.normal(size=3))
        beta = tensor(r.normal(size=3))
        a, b = 0.7, -1.3
        lhs = feat.modulate(x * a + y * b, gamma, beta).data
        rhs = (feat.modulate(x, gamma, beta) * a + feat.modulate(y, gamma, beta) * b
               - (a + b - 1) * beta.reshape(1, 1, 3)).data
        assert np.abs(lhs - rhs).max() < 1e-5

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            feat.modulate(tensor(np.zeros((2, 2, 3))), tensor(np.ones(4)),
                          tensor(np.zeros(4)))

    def test_f1_never_modulated(self):
        store = _small_store()
        pyr = feat.extract_pyramid(store, rng.uniform(size=(16, 16, 3)))
        emb = feat.appearance_embedding(pyr)
        deltas = feat.appearance_delta(store, emb * 0.5, emb)
        out = feat.modulated_pyramid(store, pyr, deltas)
        assert out[1] is pyr[1]
