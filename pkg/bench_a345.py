"""Measure clean AP, 3-seed patch median, and the hardening effect on the
cached 0th-order checkpoint."""
import sys
import time

from catmouse.config import desk_config
from catmouse.detector import load_checkpoint, train_detector
from catmouse.evaluation import evaluate, grayscale_baseline
from catmouse.game import eval_seed_for, game_datasets, model_seed, optimize_patch, patch_seed
from catmouse.patches import ApplicationProtocol

cfg = desk_config(seed=0)
det_ds, patch_ds, eval_ds = game_datasets(cfg)
model = load_checkpoint("/tmp/model0.cmld")
model.set_trainable(False)

protocol = ApplicationProtocol.for_mode(
    "eval", resize_range=(cfg.eval_resize, cfg.eval_resize), p_box=cfg.p_box, p_hal=cfg.p_hal
)
es = eval_seed_for(cfg)

clean = evaluate(model, eval_ds, source="clean", eval_seed=es)
print(f"clean={clean.ap:.3f}", flush=True)
gray = grayscale_baseline(model, eval_ds, protocol, eval_seed=es)
print(f"gray={gray.mean:.3f}+-{gray.std:.3f}", flush=True)

patches = []
for idx in range(3):
    t0 = time.time()
    p = optimize_patch(model, patch_ds, cfg, patch_seed(cfg, 1, idx, "validation"), role="validation")
    res = evaluate(model, eval_ds, p, protocol=protocol, eval_seed=es)
    print(f"patch[{idx}]: {time.time()-t0:.0f}s ap={res.ap:.3f} delta={gray.mean-res.ap:+.3f}", flush=True)
    patches.append(p)

if "--harden" in sys.argv:
    t0 = time.time()
    train_pool = [
        optimize_patch(model, patch_ds, cfg, patch_seed(cfg, 1, i, "train"), role="train")
        for i in range(cfg.k)
    ]
    print(f"train pool: {time.time()-t0:.0f}s ({len(train_pool)} patches)", flush=True)
    t0 = time.time()
    hardened = train_detector(
        det_ds, epochs=cfg.detector_epochs, seed=model_seed(cfg, 1), variant=cfg.variant,
        lr=cfg.detector_lr, weight_decay=cfg.weight_decay, batch_size=cfg.detector_batch,
        patch_pool=train_pool, pi=cfg.pi, adv_resize=(cfg.adv_resize_lo, cfg.adv_resize_hi),
        order=1, regime=cfg.regime,
    )
    hardened.set_trainable(False)
    print(f"hardened: {time.time()-t0:.0f}s", flush=True)
    hclean = evaluate(hardened, eval_ds, source="clean", eval_seed=es)
    hgray = grayscale_baseline(hardened, eval_ds, protocol, eval_seed=es)
    print(f"hardened clean={hclean.ap:.3f} gray={hgray.mean:.3f}+-{hgray.std:.3f}", flush=True)
    for idx, p in enumerate(patches):
        res = evaluate(hardened, eval_ds, p, protocol=protocol, eval_seed=es)
        print(f"hardened vs patch[{idx}]: ap={res.ap:.3f} delta={hgray.mean-res.ap:+.3f}", flush=True)
