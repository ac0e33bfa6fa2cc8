"""Where does the attack stall: per-head suppression + reach upper bound."""
import time
from dataclasses import replace

import numpy as np

from catmouse.autodiff import Tensor
from catmouse.config import desk_config
from catmouse.detector import forward, load_checkpoint
from catmouse.evaluation import evaluate, grayscale_baseline
from catmouse.game import eval_seed_for, game_datasets, optimize_patch, patch_seed
from catmouse.patches import ApplicationProtocol, apply_protocol

cfg = desk_config(seed=0)
det_ds, patch_ds, eval_ds = game_datasets(cfg)
model = load_checkpoint("/tmp/model0.cmld")
model.set_trainable(False)
es = eval_seed_for(cfg)


def head_stats(patch, protocol, tag):
    """Mean per-head in-box max sigmoid on patched eval scenes."""
    o2o_all, o2m_all = [], []
    for scene in eval_ds.scenes[:24]:
        if patch is None:
            img = scene.image
        else:
            img = apply_protocol(scene, patch, protocol, eval_seed=es).image
        raw = forward(model, Tensor(img[None]))
        G = raw.grid
        cell = model.image_size / G
        centers = (np.arange(G) + 0.5) * cell
        for box in scene.target_boxes:
            ij = [
                (i, j)
                for i in range(G)
                for j in range(G)
                if box.x_min <= centers[j] <= box.x_max and box.y_min <= centers[i] <= box.y_max
            ]
            if not ij:
                continue
            o2o = max(raw.o2o_logits.data[0, i, j] for i, j in ij)
            o2m = max(raw.o2m_logits.data[0, i, j] for i, j in ij)
            o2o_all.append(1 / (1 + np.exp(-o2o)))
            o2m_all.append(1 / (1 + np.exp(-o2m)))
    print(
        f"{tag}: o2o sigmoid mean {np.mean(o2o_all):.3f} (p10 {np.percentile(o2o_all,10):.3f}), "
        f"o2m mean {np.mean(o2m_all):.3f}",
        flush=True,
    )


eval_protocol = ApplicationProtocol.for_mode(
    "eval", resize_range=(0.5, 0.5), p_box=1.0, p_hal=0.0
)
head_stats(None, eval_protocol, "clean")

t0 = time.time()
patch = optimize_patch(model, patch_ds, replace(cfg, lambda_smooth=0.05, patch_lr=0.03), patch_seed(cfg, 1, 0, "train"))
print(f"attack@0.3-0.6: {time.time()-t0:.0f}s", flush=True)
head_stats(patch, eval_protocol, "patched(all boxes)@0.5")
res = evaluate(model, eval_ds, patch, protocol=ApplicationProtocol.for_mode("eval"), eval_seed=es)
print(f"  AP {res.ap:.3f}", flush=True)

# reach upper bound: train and evaluate with a patch nearly covering the box
big_train = ApplicationProtocol.for_mode("patch-train", resize_range=(0.8, 1.2))
import catmouse.patches as P

orig = P._MODE_DEFAULTS["patch-train"]
P._MODE_DEFAULTS["patch-train"] = (1.0, 0.0, (0.8, 1.2), True, "random-in-box")
t0 = time.time()
big = optimize_patch(model, patch_ds, replace(cfg, lambda_smooth=0.05, patch_lr=0.03), patch_seed(cfg, 1, 1, "train"))
P._MODE_DEFAULTS["patch-train"] = orig
print(f"attack@0.8-1.2: {time.time()-t0:.0f}s", flush=True)
big_eval = ApplicationProtocol.for_mode("eval", resize_range=(1.0, 1.0), p_box=1.0, p_hal=0.0)
head_stats(big, big_eval, "big patch(all boxes)@1.0")
res = evaluate(model, eval_ds, big, protocol=ApplicationProtocol.for_mode("eval", resize_range=(1.0, 1.0)), eval_seed=es)
print(f"  AP {res.ap:.3f}", flush=True)
