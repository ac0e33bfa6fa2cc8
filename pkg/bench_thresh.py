"""Eval decode threshold sweep: clean AP vs attack ΔAP."""
import time
from dataclasses import replace

import numpy as np

import catmouse.evaluation as E
from catmouse.config import desk_config
from catmouse.detector import load_checkpoint
from catmouse.evaluation import evaluate, grayscale_baseline
from catmouse.game import eval_seed_for, game_datasets, optimize_patch, patch_seed
from catmouse.patches import ApplicationProtocol

cfg = desk_config(seed=0)
_, patch_ds, eval_ds = game_datasets(cfg)
model = load_checkpoint("/tmp/model0.cmld")
model.set_trainable(False)
es = eval_seed_for(cfg)
protocol = ApplicationProtocol.for_mode("eval")

t0 = time.time()
patch = optimize_patch(
    model, patch_ds, replace(cfg, lambda_smooth=0.05, patch_lr=0.03), patch_seed(cfg, 1, 0, "train")
)
print(f"attack: {time.time()-t0:.0f}s", flush=True)

for thr in (0.05, 0.15, 0.25, 0.35):
    E.EVAL_CONF_THRESHOLD = thr
    clean = evaluate(model, eval_ds, "clean", eval_seed=es)
    gray = grayscale_baseline(model, eval_ds, protocol, eval_seed=es)
    res = evaluate(model, eval_ds, patch, protocol=protocol, eval_seed=es)
    print(
        f"thr={thr:.2f}: clean={clean.ap:.3f} gray={gray.mean:.3f}+-{gray.std:.3f} "
        f"patched={res.ap:.3f} delta={gray.mean-res.ap:+.3f}",
        flush=True,
    )
