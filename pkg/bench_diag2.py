"""Mechanism diagnostics: optimization health, clean AP, hallucination FPs."""
import numpy as np

from catmouse.config import desk_config
from catmouse.detector import decode, forward, load_checkpoint
from catmouse.autodiff import Tensor
from catmouse.evaluation import evaluate
from catmouse.game import eval_seed_for, game_datasets, optimize_patch, patch_seed
from catmouse.patches import (
    ApplicationProtocol,
    LossWeights,
    Patch,
    apply_protocol,
    patch_loss,
)

cfg = desk_config(seed=0)
_, patch_ds, eval_ds = game_datasets(cfg)
model = load_checkpoint("/tmp/model0.cmld")
model.set_trainable(False)
es = eval_seed_for(cfg)

clean = evaluate(model, eval_ds, "clean", eval_seed=es)
print(f"clean AP = {clean.ap:.3f}", flush=True)

patch = optimize_patch(model, patch_ds, cfg, patch_seed(cfg, 1, 0, "train"))
obj_w = LossWeights(obj=1.0, smooth=0.0, validity=0.0)
tp = ApplicationProtocol.for_mode("patch-train")


def obj_of(p):
    return patch_loss(model, patch_ds.scenes[:24], p, obj_w, tp, seed=99).item()


print(f"learned patch obj = {obj_of(patch):.3f}", flush=True)
for lvl in (0.0, 0.3, 0.5, 0.55, 0.7, 1.0):
    gray = Patch(pixels=np.full((3, cfg.patch_size, cfg.patch_size), lvl, dtype=np.float32),
                 order=1, index=0, role="train", regime=cfg.regime)
    print(f"gray({lvl:.2f}) obj = {obj_of(gray):.3f}", flush=True)

# hallucination-only FP pressure: paste on background at eval protocol,
# count detections that match no target
ep = ApplicationProtocol.for_mode("eval", p_box=0.0, p_hal=1.0)
from catmouse.util import rng_for

fp_scores = []
for scene in eval_ds.scenes[:24]:
    rng = rng_for(777, "hal", scene.index)
    applied = apply_protocol(scene, patch, ep, rng=rng)
    raw = forward(model, Tensor(applied.image[None]))
    dets = decode(raw, conf_threshold=0.05)
    for d in dets:
        best = 0.0
        for b in scene.target_boxes:
            ix = max(0.0, min(d.box.x_max, b.x_max) - max(d.box.x_min, b.x_min))
            iy = max(0.0, min(d.box.y_max, b.y_max) - max(d.box.y_min, b.y_min))
            inter = ix * iy
            iou = inter / (d.box.area + b.area - inter)
            best = max(best, iou)
        if best < 0.3:
            fp_scores.append(d.score)
print(f"hallucination FPs over 24 scenes: {len(fp_scores)}, "
      f"scores {np.round(fp_scores, 2).tolist()[:12]}", flush=True)
