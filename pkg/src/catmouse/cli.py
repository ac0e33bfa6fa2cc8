"""Command-line interface.

Exit codes: 0 success, 1 usage error (unknown flags, bad config
values), 2 runtime failure (missing files, diverged optimization).
Long-running subcommands narrate progress on stderr; results meant for
capture go to stdout.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, GameConfig, PRESETS, load_config, save_config
from .detector import load_checkpoint, save_checkpoint, train_detector
from .evaluation import evaluate, grayscale_baseline
from .game import (
    TRANSFER_JSON,
    game_datasets,
    harden,
    load_game,
    model_seed,
    optimize_patch,
    patch_seed,
    run_game,
    run_transfer,
    save_transfer,
    train_zoo,
    eval_seed_for,
)
from .manifest import MANIFEST_NAME, RunManifest
from .patches import ApplicationProtocol, load_patch, patch_png, save_patch
from .scenes import DatasetSpec, export_dataset, generate_dataset


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems instead of exiting itself."""

    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _say(message: str) -> None:
    print(message, file=sys.stderr, flush=True)


def build_parser() -> _Parser:
    shared = _Parser(add_help=False)
    shared.add_argument("--config", metavar="PATH", help="config file overlaid on the preset")
    shared.add_argument("--preset", choices=sorted(PRESETS), default="desk", help="base parameter set")
    shared.add_argument("--seed", type=int, metavar="U64", help="master seed override")
    shared.add_argument("--out", metavar="DIR", help="output directory")

    parser = _Parser(prog="catmouse", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("gen-data", parents=[shared], help="render a scene family to PNG + JSON")
    p.add_argument("--family", choices=("detector-train", "patch-train", "eval"), default="eval")
    p.add_argument("--count", type=int, default=None, help="scene count (default: the config's count)")

    sub.add_parser("train-detector", parents=[shared], help="train a standard 0th-order detector")

    p = sub.add_parser("optimize-patch", parents=[shared], help="optimize an evasion patch against a checkpoint")
    p.add_argument("--model", required=True, metavar="CKPT", help="detector checkpoint to attack")
    p.add_argument("--role", choices=("train", "validation"), default="train")
    p.add_argument("--index", type=int, default=0)

    p = sub.add_parser("harden", parents=[shared], help="adversarially train against a patch pool")
    p.add_argument("--pool", required=True, nargs="+", metavar="PATCH", help="patch files forming the pool")
    p.add_argument("--order", type=int, default=1, help="order tag for the hardened model")

    p = sub.add_parser("game", parents=[shared], help="run the full cat-and-mouse loop")
    p.add_argument("--stop-after-order", type=int, default=None, metavar="N",
                   help="persist through order N and exit early (resume later)")

    p = sub.add_parser("transfer", parents=[shared], help="replay a run's validation patches on a model zoo")
    p.add_argument("--run", required=True, metavar="DIR", help="finished game run directory")
    p.add_argument("--zoo-size", type=int, default=5)

    p = sub.add_parser("evaluate", parents=[shared], help="AP of a checkpoint, clean or patched")
    p.add_argument("--model", required=True, metavar="CKPT")
    p.add_argument("--patch", metavar="PATCH", help="evaluate under this patch instead of clean")
    p.add_argument("--grayscale", action="store_true", help="report the 11-level grayscale baseline too")

    p = sub.add_parser("report", parents=[shared], help="emit ledger CSV and SVG figures for a run")
    p.add_argument("run", metavar="DIR", help="game run directory")

    return parser


def _resolve_config(args) -> GameConfig:
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"{path}: config file not found")
        cfg = load_config(path, preset=args.preset)
    else:
        cfg = PRESETS[args.preset]()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _need_out(args) -> Path:
    if not args.out:
        raise _UsageError(f"catmouse {args.command}: --out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model(path_str: str):
    path = Path(path_str)
    if not path.exists():
        raise FileNotFoundError(f"{path}: checkpoint not found")
    return load_checkpoint(path)


def _eval_protocol(cfg: GameConfig) -> ApplicationProtocol:
    return ApplicationProtocol.for_mode(
        "eval", resize_range=(cfg.eval_resize, cfg.eval_resize), p_box=cfg.p_box, p_hal=cfg.p_hal
    )


# ---------------------------------------------------------------------------
# subcommand bodies


def _cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    out = _need_out(args)
    counts = {"detector-train": cfg.detector_scenes, "patch-train": cfg.patch_scenes, "eval": cfg.eval_scenes}
    count = args.count if args.count is not None else counts[args.family]
    from .util import derive_seed

    spec = DatasetSpec.for_family(args.family, derive_seed(cfg.seed, "data", args.family), cfg.image_size)
    dataset = generate_dataset(spec, count)
    ann = export_dataset(dataset, out)
    print(f"{count} {args.family} scenes -> {ann}")
    return 0


def _cmd_train_detector(args) -> int:
    cfg = _resolve_config(args)
    out = _need_out(args)
    det_ds, _, _ = game_datasets(cfg)
    _say(f"training {cfg.variant} detector: {len(det_ds)} scenes, {cfg.detector_epochs} epochs")
    model = train_detector(
        det_ds,
        epochs=cfg.detector_epochs,
        seed=model_seed(cfg, 0),
        variant=cfg.variant,
        lr=cfg.detector_lr,
        weight_decay=cfg.weight_decay,
        batch_size=cfg.detector_batch,
        progress=lambda e, l: _say(f"epoch {e}: loss {l:.4f}") if e % 10 == 0 else None,
    )
    path = out / "model.cmld"
    save_checkpoint(model, path)
    save_config(cfg, out / "config.txt")
    print(f"checkpoint -> {path}")
    return 0


def _cmd_optimize_patch(args) -> int:
    cfg = _resolve_config(args)
    out = _need_out(args)
    model = _load_model(args.model)
    _, patch_ds, _ = game_datasets(cfg)
    seed = patch_seed(cfg, model.order + 1, args.index, args.role)
    _say(f"optimizing order-{model.order + 1} {args.role} patch {args.index} (seed {seed})")
    patch = optimize_patch(
        model, patch_ds, cfg, seed, role=args.role, index=args.index,
        progress=lambda e, l: _say(f"epoch {e}: loss {l:.4f}") if e % 10 == 0 else None,
    )
    path = out / f"patch-{args.role}-{args.index:02d}.cmpt"
    save_patch(patch, path)
    patch_png(patch, path.with_suffix(".png"))
    print(f"patch -> {path}")
    return 0


def _cmd_harden(args) -> int:
    cfg = _resolve_config(args)
    out = _need_out(args)
    pool = []
    for p in args.pool:
        path = Path(p)
        if not path.exists():
            raise FileNotFoundError(f"{path}: patch file not found")
        pool.append(load_patch(path))
    det_ds, _, _ = game_datasets(cfg)
    _say(f"hardening with pool of {len(pool)} patches, pi={cfg.pi}")
    model = harden(
        det_ds, pool, cfg, model_seed(cfg, args.order), order=args.order,
        progress=lambda e, l: _say(f"epoch {e}: loss {l:.4f}") if e % 10 == 0 else None,
    )
    path = out / "model.cmld"
    save_checkpoint(model, path)
    print(f"checkpoint -> {path}")
    return 0


def _cmd_game(args) -> int:
    cfg = _resolve_config(args)
    out = _need_out(args)
    result = run_game(cfg, out, stop_after_order=args.stop_after_order, progress=_say)
    if not result.complete:
        print(f"run {result.run_id} stopped early at {result.run_dir} (resume by re-running)")
        return 0
    heat = result.heatmap
    print(f"run {result.run_id} complete: {len(result.state.ledger.records)} ledger rows")
    for r, m in enumerate(heat.model_orders):
        cells = " ".join(f"{heat.delta[r, c]:+.3f}" for c in range(len(heat.patch_orders)))
        print(f"model {m}: dAP {cells} | mu {heat.row_mu[r]:+.3f}")
    return 0


def _cmd_transfer(args) -> int:
    cfg = _resolve_config(args)
    run_dir = Path(args.run)
    if not run_dir.exists():
        raise FileNotFoundError(f"{run_dir}: run directory not found")
    game = load_game(run_dir)
    if not game.state.validation_patches:
        raise FileNotFoundError(f"{run_dir}: no validation patches found (game not finished?)")
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    zoo = train_zoo(cfg, args.zoo_size, progress=_say)
    zoo_dir = out / "zoo"
    zoo_dir.mkdir(exist_ok=True)
    for i, member in enumerate(zoo):
        save_checkpoint(member, zoo_dir / f"member-{i:02d}.cmld")
    result = run_transfer(
        game.state.validation_patches, zoo, cfg, run_id=game.run_id, progress=_say
    )
    save_transfer(result, out / TRANSFER_JSON)
    if (out / MANIFEST_NAME).exists():
        manifest = RunManifest.load(out)
        manifest.record(out, out / TRANSFER_JSON)
        for i in range(len(zoo)):
            manifest.record(out, zoo_dir / f"member-{i:02d}.cmld")
        manifest.save(out)
    print(f"transfer over {len(zoo)} models -> {out / TRANSFER_JSON}")
    for p in result.patch_orders:
        print(
            f"order {p}: AP {result.mean_ap[p]:.3f} +- {result.std_ap[p]:.3f}, "
            f"dAP {result.delta_mean[p]:+.3f}"
        )
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _resolve_config(args)
    model = _load_model(args.model)
    model.set_trainable(False)
    _, _, eval_ds = game_datasets(cfg)
    seed = eval_seed_for(cfg)
    protocol = _eval_protocol(cfg)
    clean = evaluate(model, eval_ds, "clean", eval_seed=seed)
    print(f"clean AP {clean.ap:.4f} ({clean.detection_count} detections, {clean.gt_count} boxes)")
    if args.grayscale:
        gray = grayscale_baseline(model, eval_ds, protocol, eval_seed=seed)
        print(f"grayscale AP {gray.mean:.4f} +- {gray.std:.4f}")
    if args.patch:
        patch_path = Path(args.patch)
        if not patch_path.exists():
            raise FileNotFoundError(f"{patch_path}: patch file not found")
        patch = load_patch(patch_path)
        res = evaluate(model, eval_ds, patch, protocol=protocol, eval_seed=seed)
        print(f"patched AP {res.ap:.4f} (order-{patch.order} {patch.role} patch {patch.index})")
    return 0


def _cmd_report(args) -> int:
    from .reporting import write_report

    run_dir = Path(args.run)
    if not run_dir.exists():
        raise FileNotFoundError(f"{run_dir}: run directory not found")
    out = Path(args.out) if args.out else run_dir
    written = write_report(run_dir, out)
    if not (run_dir / TRANSFER_JSON).exists():
        _say("note: no transfer results in this run; transfer.svg skipped")
    for path in written:
        print(str(path))
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-detector": _cmd_train_detector,
    "optimize-patch": _cmd_optimize_patch,
    "harden": _cmd_harden,
    "game": _cmd_game,
    "transfer": _cmd_transfer,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise _UsageError(parser.format_usage().rstrip())
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
