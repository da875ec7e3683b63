"""Short diagnostic: does the coarse matcher separate positives from negatives?"""
import sys
import time

import numpy as np

sys.path.insert(0, "src")
from matchloc import matcher as mt
from matchloc import model3d as m3d
from matchloc.pipeline import Config, _train_step, build_store, select_supports
from matchloc.synth import SceneSpec, generate_scene
from matchloc.tensor import no_grad

cfg = Config()
scenes = [generate_scene(SceneSpec(num_frames=12, num_test_frames=2, image_size=64),
                         seed=s, name=f"s{s}") for s in (101, 102)]
store = build_store(cfg, seed=0)


def probe(tag):
    scene = scenes[0]
    frame = scene.frames[scene.test_indices[0]]
    with no_grad():
        sup = select_supports(scene, cfg, store, query_image=frame.image)
        supports = [scene.frames[i] for i in sup]
        model = m3d.assemble_model(store, supports, scene.bounds,
                                   query_image=frame.image, adapt=True)
        nsp = model.points["coarse"]
        rng = np.random.default_rng(1)
        pts = nsp.positions[rng.choice(len(nsp), size=512, replace=False)]
        d3 = m3d.query_descriptors(store, model, pts, "coarse")
        d2 = mt.project_2d_descriptors(store, model.query_pyramid[3], "coarse")
        d3t, d2t = mt.coarse_transform(store, d3, d2)
        sm = mt.coarse_score(store, d3t, d2t, (8, 8), tau=cfg.tau)
    gt = mt.gt_score_matrix(pts, frame.pose, frame.intr, frame.depth_gt, 8)
    s = sm.scores.data
    pos = s[gt.labels > 0.5]
    neg = s[gt.labels < 0.5]
    valid = gt.valid
    hit = (np.argmax(s, axis=1)[valid] == gt.cell_idx[valid]).mean()
    matches = mt.select_matches(sm)
    correct = sum(1 for p, c in zip(matches.point_idx, matches.cell_idx)
                  if gt.cell_idx[p] == c)
    print(f"[{tag}] pos {pos.mean():.3f}±{pos.std():.3f} neg {neg.mean():.3f} "
          f"p99 {np.quantile(neg, 0.99):.3f} | argmax-hit {hit:.2f} | "
          f"matches {len(matches)} correct {correct}")


probe("init")
step = 0
t0 = time.time()
for it in range(150):
    scene = scenes[step % 2]
    rng_t = np.random.default_rng([0, 2, step])
    target = int(rng_t.choice(scene.train_indices))
    losses = _train_step(store, scene, target, cfg, 0, step, prior=False)
    step += 1
    if (it + 1) % 30 == 0:
        print(f"step {it+1}: coarse {losses.coarse:.4f} fine {losses.fine:.4f} "
              f"depth {losses.depth:.4f} ({(time.time()-t0)/(it+1):.2f}s/step)")
        probe(f"step{it+1}")
