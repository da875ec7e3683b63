import numpy as np
import pytest

from matchloc import features as feat
from matchloc import matcher as mt
from matchloc import model3d as m3d
from matchloc import nn
from matchloc.geometry import Pose
from matchloc.pipeline import Config, build_store
from matchloc.synth import SceneSpec, generate_scene


def random_pose(rng: np.random.Generator) -> Pose:
    a = rng.normal(size=(3, 3))
    q, _ = np.linalg.qr(a)
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return Pose(q, rng.uniform(-2, 2, 3))


@pytest.fixture(scope="session")
def tiny_cfg() -> Config:
    return Config(epochs_pretrain=2, steps_per_epoch_pretrain=2,
                  epochs_finetune=2, steps_per_epoch_finetune=1,
                  rays_per_step=48, ray_samples=24, train_points_per_step=128,
                  points_per_localization=256, psnr_frames=1)


@pytest.fixture(scope="session")
def small_scene():
    return generate_scene(SceneSpec(num_frames=8, num_test_frames=2, image_size=64),
                          seed=11, name="unit")


@pytest.fixture(scope="session")
def store(tiny_cfg):
    return build_store(tiny_cfg, seed=7)


@pytest.fixture(scope="session")
def scene_model(store, small_scene, tiny_cfg):
    supports = [small_scene.frames[i] for i in (0, 2, 4, 5)]
    query = small_scene.frames[1]
    model = m3d.assemble_model(store, supports, small_scene.bounds,
                               query_image=query.image, adapt=True,
                               k_neighbors=tiny_cfg.knn_k, lift_stride=2)
    return model, query


def randomized_store(cfg: Config, seed: int) -> nn.ParamStore:
    """A store whose zero-initialized layers are jiggled so gradients flow."""
    s = build_store(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    for name, p in s.params.items():
        if np.all(p.data == 0):
            p.data = rng.normal(size=p.shape).astype(np.float32) * 0.05
    return s
