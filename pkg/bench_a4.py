"""Attack-effectiveness benchmark: 1st-order patch vs 0th-order model."""
import sys
import time

import numpy as np

from catmouse.config import desk_config
from catmouse.detector import train_detector
from catmouse.evaluation import evaluate, grayscale_baseline
from catmouse.game import eval_seed_for, game_datasets, model_seed, optimize_patch, patch_seed
from catmouse.patches import ApplicationProtocol

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
cfg = desk_config(seed=seed)
t0 = time.time()
det_ds, patch_ds, eval_ds = game_datasets(cfg)
print(f"datasets: {time.time()-t0:.1f}s", flush=True)

t0 = time.time()
model = train_detector(
    det_ds, epochs=cfg.detector_epochs, seed=model_seed(cfg, 0), variant=cfg.variant,
    lr=cfg.detector_lr, weight_decay=cfg.weight_decay, batch_size=cfg.detector_batch,
)
print(f"train model0: {time.time()-t0:.1f}s", flush=True)
model.set_trainable(False)

protocol = ApplicationProtocol.for_mode(
    "eval", resize_range=(cfg.eval_resize, cfg.eval_resize), p_box=cfg.p_box, p_hal=cfg.p_hal
)
es = eval_seed_for(cfg)
t0 = time.time()
clean = evaluate(model, eval_ds, "clean", eval_seed=es)
gray = grayscale_baseline(model, eval_ds, protocol, eval_seed=es)
print(f"baselines: {time.time()-t0:.1f}s clean={clean.ap:.3f} gray={gray.mean:.3f}+-{gray.std:.3f}", flush=True)

t0 = time.time()
losses = []
patch = optimize_patch(
    model, patch_ds, cfg, patch_seed(cfg, 1, 0, "validation"), role="validation",
    progress=lambda e, l: losses.append(l),
)
print(f"optimize: {time.time()-t0:.1f}s loss {losses[0]:.4f} -> {losses[-1]:.4f}", flush=True)
print("loss curve:", " ".join(f"{l:.3f}" for l in losses[::6]), flush=True)

res = evaluate(model, eval_ds, patch, protocol=protocol, eval_seed=es)
delta = gray.mean - res.ap
print(f"SEED {seed}: patched={res.ap:.3f} delta={delta:.3f} (gate >= 0.15)", flush=True)
