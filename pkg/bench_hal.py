"""Hallucination FP pressure for learned vs noise patches."""
import numpy as np

from catmouse.autodiff import Tensor
from catmouse.config import desk_config
from catmouse.detector import decode, forward, load_checkpoint
from catmouse.evaluation import evaluate, grayscale_baseline
from catmouse.game import eval_seed_for, game_datasets, optimize_patch, patch_seed
from catmouse.patches import ApplicationProtocol, apply_protocol, init_patch
from catmouse.util import rng_for

cfg = desk_config(seed=0)
_, patch_ds, eval_ds = game_datasets(cfg)
model = load_checkpoint("/tmp/model0.cmld")
model.set_trainable(False)

learned = optimize_patch(model, patch_ds, cfg, patch_seed(cfg, 1, 0, "train"))
noise = init_patch(cfg.patch_size, seed=314)


def hal_fps(patch, tag):
    proto = ApplicationProtocol.for_mode("eval", p_box=0.0, p_hal=1.0)
    scores = []
    for scene in eval_ds.scenes[:24]:
        applied = apply_protocol(scene, patch, proto, eval_seed=1234)
        raw = forward(model, Tensor(applied.image[None]))
        for d in decode(raw, conf_threshold=0.05):
            best = 0.0
            for b in scene.target_boxes:
                ix = max(0.0, min(d.box.x_max, b.x_max) - max(d.box.x_min, b.x_min))
                iy = max(0.0, min(d.box.y_max, b.y_max) - max(d.box.y_min, b.y_min))
                inter = ix * iy
                best = max(best, inter / (d.box.area + b.area - inter))
            if best < 0.3:
                scores.append(d.score)
    hi = sum(s > 0.5 for s in scores)
    print(f"{tag}: {len(scores)} FPs over 24 scenes, {hi} above 0.5, "
          f"top {sorted(scores, reverse=True)[:6]}", flush=True)


def clean_fps():
    scores = []
    for scene in eval_ds.scenes[:24]:
        raw = forward(model, Tensor(scene.image[None]))
        for d in decode(raw, conf_threshold=0.05):
            best = 0.0
            for b in scene.target_boxes:
                ix = max(0.0, min(d.box.x_max, b.x_max) - max(d.box.x_min, b.x_min))
                iy = max(0.0, min(d.box.y_max, b.y_max) - max(d.box.y_min, b.y_min))
                inter = ix * iy
                best = max(best, inter / (d.box.area + b.area - inter))
            if best < 0.3:
                scores.append(d.score)
    print(f"clean-scene FPs: {len(scores)}, top {sorted(scores, reverse=True)[:6]}", flush=True)


clean_fps()
hal_fps(learned, "learned")
hal_fps(noise, "noise-init")
