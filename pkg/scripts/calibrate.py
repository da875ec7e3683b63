"""Calibration run: does the default-ish schedule learn to localize?"""
import sys
import time

import numpy as np

sys.path.insert(0, "src")
from matchloc.pipeline import Config, pretrain, finetune, evaluate
from matchloc.synth import SceneSpec, generate_scene

cfg = Config()
spec = SceneSpec(num_frames=25, num_test_frames=5, image_size=64)
scenes = [generate_scene(spec, seed=s, name=f"scene{s}") for s in (101, 102, 103, 104)]
for s in scenes:
    print(s.name, "diameter", round(s.diameter, 3), "5% =", round(0.05 * s.diameter, 3))

t0 = time.time()
store, hist = pretrain(scenes, cfg, seed=0, log=print)
print(f"pretrain done in {(time.time()-t0)/60:.1f} min")

for sc in scenes[:2]:
    rep = evaluate(sc, sc.test_indices, store, cfg, seed=0)
    print(f"[pretrain] {sc.name}: acc {rep.accuracy:.2f} med {rep.median_translation_cm:.1f}cm/"
          f"{rep.median_rotation_deg:.2f}deg IoU {rep.matching_iou:.3f} PSNR {rep.psnr_db:.1f} "
          f"fail {rep.failures}")

t0 = time.time()
store_ft, hist_ft = finetune(scenes[0], store, cfg, seed=0, log=print)
print(f"finetune done in {(time.time()-t0)/60:.1f} min")
rep = evaluate(scenes[0], scenes[0].test_indices, store_ft, cfg, seed=0)
print(f"[finetune] {scenes[0].name}: acc {rep.accuracy:.2f} med {rep.median_translation_cm:.1f}cm/"
      f"{rep.median_rotation_deg:.2f}deg IoU {rep.matching_iou:.3f} PSNR {rep.psnr_db:.1f} "
      f"fail {rep.failures}")
