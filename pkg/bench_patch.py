"""Patch-attack tuning loop against a cached 0th-order checkpoint."""
import sys
import time
from dataclasses import replace

import numpy as np

from catmouse.config import desk_config
from catmouse.detector import load_checkpoint, save_checkpoint, train_detector
from catmouse.evaluation import evaluate, grayscale_baseline
from catmouse.game import eval_seed_for, game_datasets, model_seed, optimize_patch, patch_seed
from catmouse.autodiff import Tensor
from catmouse import autodiff as ad
from catmouse.patches import ApplicationProtocol, LossWeights, apply_protocol, patch_loss

CKPT = "/tmp/model0.cmld"

cfg = desk_config(seed=0)
det_ds, patch_ds, eval_ds = game_datasets(cfg)
try:
    model = load_checkpoint(CKPT)
    print("loaded cached model", flush=True)
except FileNotFoundError:
    t0 = time.time()
    model = train_detector(
        det_ds, epochs=cfg.detector_epochs, seed=model_seed(cfg, 0), variant=cfg.variant,
        lr=cfg.detector_lr, weight_decay=cfg.weight_decay, batch_size=cfg.detector_batch,
    )
    save_checkpoint(model, CKPT)
    print(f"trained model: {time.time()-t0:.0f}s", flush=True)
model.set_trainable(False)

protocol = ApplicationProtocol.for_mode(
    "eval", resize_range=(cfg.eval_resize, cfg.eval_resize), p_box=cfg.p_box, p_hal=cfg.p_hal
)
es = eval_seed_for(cfg)
gray = grayscale_baseline(model, eval_ds, protocol, eval_seed=es)
print(f"gray={gray.mean:.3f}+-{gray.std:.3f}", flush=True)


def attack(tag, **over):
    c = replace(cfg, **over)
    t0 = time.time()
    patch = optimize_patch(model, patch_ds, c, patch_seed(c, 1, 0, "validation"), role="validation")
    dt = time.time() - t0
    # loss decomposition on the finished patch
    w = LossWeights(obj=c.lambda_obj, smooth=c.lambda_smooth, validity=c.lambda_validity)
    obj = patch_loss(model, patch_ds.scenes[:16], patch,
                     LossWeights(obj=1.0, smooth=0.0, validity=0.0),
                     ApplicationProtocol.for_mode("patch-train"), seed=123).item()
    res = evaluate(model, eval_ds, patch, protocol=protocol, eval_seed=es)
    print(
        f"{tag}: {dt:.0f}s obj(sigmoid)={obj:.3f} patched={res.ap:.3f} "
        f"delta={gray.mean - res.ap:+.3f}",
        flush=True,
    )
    return patch


for args in sys.argv[1:]:
    # form: tag:key=val,key=val
    tag, _, kvs = args.partition(":")
    over = {}
    for kv in kvs.split(","):
        if not kv:
            continue
        k, _, v = kv.partition("=")
        cur = getattr(cfg, k)
        over[k] = type(cur)(v) if not isinstance(cur, bool) else v == "True"
    attack(tag, **over)
