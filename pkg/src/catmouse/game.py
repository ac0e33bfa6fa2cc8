"""The cat-and-mouse loop.

One round of the game: optimize patches against the current detector
(the mouse move), then train a hardened detector against a pool of
those patches (the cat move). ``run_game`` iterates rounds to the
configured maximum order, persists every artifact, and fills the
evaluation ledger that the heatmap is built from. ``run_transfer``
replays the validation patches against a zoo of independently trained
0th-order models.

Everything here is deterministic given the config: per-artifact seeds
are derived from the master seed and the artifact's coordinates (order,
index, role), so a resumed run produces byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .autodiff import Tape
from .config import GameConfig, load_config, serialize_config
from .detector import DetectorModel, load_checkpoint, save_checkpoint, train_detector
from .evaluation import (
    EvalLedger,
    EvalRecord,
    HeatmapMatrix,
    build_heatmap,
    evaluate,
    grayscale_baseline,
)
from .manifest import MANIFEST_NAME, RunManifest
from .optim import AdamWState, adamw_step, step_decay_lr, zero_grads
from .patches import (
    ApplicationProtocol,
    LossWeights,
    Patch,
    finalize_patch,
    init_patch,
    load_patch,
    patch_loss,
    patch_png,
    save_patch,
)
from .scenes import Dataset, DatasetSpec, generate_dataset
from .util import derive_seed, rng_for

CONFIG_SNAPSHOT = "config.txt"
EVENT_LOG = "events.log"
LEDGER_JSON = "ledger.json"
LEDGER_CSV = "ledger.csv"
TRANSFER_JSON = "transfer.json"
MODEL_FILE = "model.cmld"


# ---------------------------------------------------------------------------
# game state


def patch_fingerprint(patch: Patch) -> str:
    """Content hash of the exact pixel bytes; used for pool audits."""
    return hashlib.sha256(np.ascontiguousarray(patch.pixels.data, dtype="<f4").tobytes()).hexdigest()


@dataclass
class GameState:
    """Everything the loop has produced so far.

    ``models[n]`` is the n-th-order detector; ``train_patches[n]`` and
    ``validation_patches[n]`` hold the order-n patches in index order.
    """

    config: GameConfig
    models: dict[int, DetectorModel] = field(default_factory=dict)
    train_patches: dict[int, list[Patch]] = field(default_factory=dict)
    validation_patches: dict[int, list[Patch]] = field(default_factory=dict)
    ledger: EvalLedger | None = None

    def pool_for_order(self, order: int) -> list[Patch]:
        """Adversarial-training pool for the model of ``order``.

        Successive regime: every train patch of order <= ``order``.
        Non-successive: exactly the order-``order`` train patches.
        """
        if order < 1:
            raise ValueError(f"pools exist for orders >= 1, got {order}")
        if self.config.regime == "successive":
            orders = range(1, order + 1)
        else:
            orders = range(order, order + 1)
        pool: list[Patch] = []
        for o in orders:
            if o not in self.train_patches:
                raise ValueError(f"no train patches of order {o} available for the order-{order} pool")
            pool.extend(self.train_patches[o])
        return pool

    def pool_sizes(self) -> dict[int, int]:
        return {o: len(self.pool_for_order(o)) for o in sorted(self.train_patches)}

    def check_invariants(self) -> None:
        """Role/order consistency plus the pool-composition law."""
        for order, group in self.train_patches.items():
            for p in group:
                if p.role != "train" or p.order != order:
                    raise ValueError(f"patch tagged {p.role}/{p.order} filed under train order {order}")
        validation_prints = set()
        for order, group in self.validation_patches.items():
            for p in group:
                if p.role != "validation" or p.order != order:
                    raise ValueError(f"patch tagged {p.role}/{p.order} filed under validation order {order}")
                validation_prints.add(patch_fingerprint(p))
        k = self.config.k
        for order in self.train_patches:
            pool = self.pool_for_order(order)
            want = order * k if self.config.regime == "successive" else k
            if len(pool) != want:
                raise ValueError(f"order-{order} pool has {len(pool)} patches, expected {want}")
            for p in pool:
                if patch_fingerprint(p) in validation_prints:
                    raise ValueError(f"validation patch leaked into the order-{order} training pool")


# ---------------------------------------------------------------------------
# the two moves


def optimize_patch(
    model: DetectorModel,
    dataset: Dataset,
    config: GameConfig,
    seed: int,
    *,
    role: str = "train",
    index: int = 0,
    progress: Callable[[int, float], None] | None = None,
) -> Patch:
    """Evasion attack on a frozen detector; returns the next-order patch.

    AdamW on the patch pixels, minimizing the combined objectness +
    smoothness + validity loss over mini-batches of the dataset, with
    the learning rate dropped by 10x every ``patch_decay_every`` epochs.
    Deterministic per seed. A non-finite loss aborts with the epoch and
    batch in the message rather than silently writing a broken patch.
    """
    if len(dataset) == 0:
        raise ValueError("patch optimization needs at least one scene")
    model.set_trainable(False)
    patch = init_patch(config.patch_size, seed)
    patch.pixels.requires_grad = True
    weights = LossWeights(obj=config.lambda_obj, smooth=config.lambda_smooth, validity=config.lambda_validity)
    protocol = ApplicationProtocol.for_mode("patch-train")
    state = AdamWState(lr=config.patch_lr)
    shuffle = rng_for(seed, "patch-shuffle")
    scenes = dataset.scenes
    n = len(scenes)
    for epoch in range(config.patch_epochs):
        state.lr = step_decay_lr(config.patch_lr, epoch, config.patch_decay_every)
        perm = shuffle.permutation(n)
        epoch_loss = 0.0
        for bi, lo in enumerate(range(0, n, config.patch_batch)):
            batch = [scenes[int(i)] for i in perm[lo : lo + config.patch_batch]]
            with Tape() as tape:
                loss = patch_loss(
                    model, batch, patch, weights, protocol, seed=derive_seed(seed, "batch", epoch, bi)
                )
                value = loss.item()
                if not np.isfinite(value):
                    raise RuntimeError(
                        f"patch optimization diverged: non-finite loss at epoch {epoch}, batch {bi}"
                    )
                tape.backward(loss)
            adamw_step([patch.pixels], state)
            zero_grads([patch.pixels])
            epoch_loss += value * len(batch)
        if progress is not None:
            progress(epoch, epoch_loss / n)
    return finalize_patch(
        patch,
        order=model.order + 1,
        index=index,
        role=role,
        regime=config.regime,
        seed=seed,
        source_model_order=model.order,
    )


def harden(
    dataset: Dataset,
    pool: Sequence[Patch],
    config: GameConfig,
    seed: int,
    *,
    order: int,
    progress: Callable[[int, float], None] | None = None,
) -> DetectorModel:
    """Patch-aware training round: a fresh detector trained with pool
    patches pasted into a fraction pi of ground-truth boxes."""
    pool = list(pool)
    if not pool:
        raise ValueError("hardening requires a non-empty patch pool")
    for p in pool:
        if p.role == "validation":
            raise ValueError("validation patches must never enter a training pool")
    return train_detector(
        dataset,
        epochs=config.detector_epochs,
        seed=seed,
        variant=config.variant,
        lr=config.detector_lr,
        weight_decay=config.weight_decay,
        batch_size=config.detector_batch,
        patch_pool=pool,
        pi=config.pi,
        adv_resize=(config.adv_resize_lo, config.adv_resize_hi),
        order=order,
        regime=config.regime,
        progress=progress,
    )


# ---------------------------------------------------------------------------
# datasets and seeds


def game_datasets(config: GameConfig) -> tuple[Dataset, Dataset, Dataset]:
    """(detector-train, patch-train, eval) datasets for one game."""

    def build(family: str, count: int) -> Dataset:
        spec = DatasetSpec.for_family(family, derive_seed(config.seed, "data", family), config.image_size)
        return generate_dataset(spec, count)

    return (
        build("detector-train", config.detector_scenes),
        build("patch-train", config.patch_scenes),
        build("eval", config.eval_scenes),
    )


def model_seed(config: GameConfig, order: int) -> int:
    return derive_seed(config.seed, "model", order)

def patch_seed(config: GameConfig, order: int, index: int, role: str) -> int:
    return derive_seed(config.seed, "patch", order, index, role)

def eval_seed_for(config: GameConfig) -> int:
    return derive_seed(config.seed, "eval")


# ---------------------------------------------------------------------------
# persistence helpers


def _patch_file(role: str, index: int) -> str:
    return f"patch-{role}-{index:02d}.cmpt"


def _order_dir(root: Path, order: int) -> Path:
    return root / f"order-{order:02d}"


def _atomic_bytes(path: Path, data: bytes) -> None:
    tmp = path.with_name("tmp-" + path.name)
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _atomic_save(path: Path, writer: Callable[[Path], None]) -> None:
    # the temp name keeps the extension so format-sniffing writers work
    tmp = path.with_name("tmp-" + path.name)
    writer(tmp)
    os.replace(tmp, path)


class _EventLog:
    """Append-only run log; also echoes to a progress callback."""

    def __init__(self, path: Path, echo: Callable[[str], None] | None = None):
        self.path = path
        self.echo = echo

    def __call__(self, message: str) -> None:
        stamp = time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(f"[{stamp}] {message}\n")
        if self.echo is not None:
            self.echo(message)


# ---------------------------------------------------------------------------
# the full game


@dataclass
class GameResult:
    run_id: str
    run_dir: Path
    state: GameState
    heatmap: HeatmapMatrix | None
    complete: bool


def run_id_for(config: GameConfig) -> str:
    return "run-" + config.config_hash()[:12]


def run_game(
    config: GameConfig,
    out_dir: str | Path,
    *,
    stop_after_order: int | None = None,
    progress: Callable[[str], None] | None = None,
) -> GameResult:
    """Play the game to ``config.max_order`` and evaluate everything.

    The run directory holds a config snapshot, one subdirectory per
    order (checkpoint plus that order's patches), the evaluation ledger
    as JSON and CSV, a manifest with content hashes, and an event log.
    A directory left by an interrupted run resumes from the last fully
    persisted order; a directory created under a different config is
    refused. ``stop_after_order`` ends the run early after that order's
    artifacts are on disk (used to exercise resume).
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    run_id = run_id_for(config)

    snapshot = root / CONFIG_SNAPSHOT
    if snapshot.exists():
        existing = load_config(snapshot)
        if existing.config_hash() != config.config_hash():
            raise ValueError(
                f"{root}: run directory was created with a different config "
                f"(hash {existing.config_hash()[:12]} vs {config.config_hash()[:12]}); refusing to resume"
            )
        manifest = RunManifest.load(root) if (root / MANIFEST_NAME).exists() else RunManifest.new(run_id, config.config_hash())
    else:
        _atomic_bytes(snapshot, serialize_config(config).encode("utf-8"))
        manifest = RunManifest.new(run_id, config.config_hash())
        manifest.record(root, snapshot)
        manifest.save(root)

    log = _EventLog(root / EVENT_LOG, progress)
    state = GameState(config=config)
    det_ds, patch_ds, eval_ds = game_datasets(config)
    N, k, V = config.max_order, config.k, config.validation_count

    for order in range(N + 1):
        odir = _order_dir(root, order)
        model_path = odir / MODEL_FILE
        wanted = [model_path]
        if order >= 1:
            wanted += [odir / _patch_file("train", j) for j in range(k)]
            wanted += [odir / _patch_file("validation", v) for v in range(V)]
        if all(p.exists() for p in wanted):
            state.models[order] = load_checkpoint(model_path)
            if order >= 1:
                state.train_patches[order] = [load_patch(odir / _patch_file("train", j)) for j in range(k)]
                state.validation_patches[order] = [
                    load_patch(odir / _patch_file("validation", v)) for v in range(V)
                ]
            log(f"order {order}: restored from {odir.name}")
            continue

        odir.mkdir(exist_ok=True)
        if order == 0:
            log("order 0: training the standard detector")
            model = train_detector(
                det_ds,
                epochs=config.detector_epochs,
                seed=model_seed(config, 0),
                variant=config.variant,
                lr=config.detector_lr,
                weight_decay=config.weight_decay,
                batch_size=config.detector_batch,
                order=0,
                regime="standard",
            )
        else:
            attacked = state.models[order - 1]
            for role, count, bucket in (
                ("train", k, state.train_patches),
                ("validation", V, state.validation_patches),
            ):
                group: list[Patch] = []
                for idx in range(count):
                    seed = patch_seed(config, order, idx, role)
                    log(f"order {order}: optimizing {role} patch {idx} (seed {seed})")
                    p = optimize_patch(attacked, patch_ds, config, seed, role=role, index=idx)
                    path = odir / _patch_file(role, idx)
                    _atomic_save(path, lambda tmp, p=p: save_patch(p, tmp))
                    _atomic_save(path.with_suffix(".png"), lambda tmp, p=p: patch_png(p, tmp))
                    manifest.record(root, path)
                    manifest.record(root, path.with_suffix(".png"))
                    group.append(p)
                bucket[order] = group
            pool = state.pool_for_order(order)
            log(f"order {order}: hardening against a pool of {len(pool)} patches")
            model = harden(det_ds, pool, config, model_seed(config, order), order=order)

        _atomic_save(model_path, lambda tmp: save_checkpoint(model, tmp))
        manifest.record(root, model_path)
        manifest.save(root)
        state.models[order] = model
        log(f"order {order}: model saved")

        if stop_after_order is not None and order >= stop_after_order:
            log(f"stopping after order {order} as requested")
            return GameResult(run_id, root, state, None, complete=False)

    state.check_invariants()

    ledger_path = root / LEDGER_JSON
    if ledger_path.exists():
        state.ledger = EvalLedger.from_json(json.loads(ledger_path.read_text(encoding="utf-8")))
        log("ledger: restored")
    else:
        state.ledger = _evaluate_game(state, eval_ds, run_id, log)
        _atomic_bytes(ledger_path, (json.dumps(state.ledger.to_json(), indent=2) + "\n").encode("utf-8"))
        _atomic_bytes(root / LEDGER_CSV, state.ledger.to_csv().encode("utf-8"))
        manifest.record(root, ledger_path)
        manifest.record(root, root / LEDGER_CSV)
        manifest.save(root)

    heat = build_heatmap(state.ledger)
    heat.validate()
    log("game complete")
    return GameResult(run_id, root, state, heat, True)


def _evaluate_game(state: GameState, eval_ds: Dataset, run_id: str, log) -> EvalLedger:
    """Clean + 11 grayscale rows per model, then every
    (model order, patch order, validation index) cell."""
    cfg = state.config
    protocol = ApplicationProtocol.for_mode(
        "eval",
        resize_range=(cfg.eval_resize, cfg.eval_resize),
        p_box=cfg.p_box,
        p_hal=cfg.p_hal,
    )
    seed = eval_seed_for(cfg)
    ledger = EvalLedger()
    for m in sorted(state.models):
        model = state.models[m]
        model.set_trainable(False)
        clean = evaluate(model, eval_ds, "clean", eval_seed=seed)
        ledger.add(EvalRecord(run_id, m, "clean", clean.ap, clean.per_threshold))
        gray = grayscale_baseline(model, eval_ds, protocol, eval_seed=seed)
        for level, res in enumerate(gray.results):
            ledger.add(
                EvalRecord(
                    run_id, m, f"grayscale-{level}", res.ap, res.per_threshold,
                    resize_factor=cfg.eval_resize,
                )
            )
        log(f"eval: model {m} clean {clean.ap:.3f}, grayscale {gray.mean:.3f} +- {gray.std:.3f}")
        for p_order in sorted(state.validation_patches):
            for patch in state.validation_patches[p_order]:
                res = evaluate(model, eval_ds, patch, protocol=protocol, eval_seed=seed)
                ledger.add(
                    EvalRecord(
                        run_id, m, "patch-validation", res.ap, res.per_threshold,
                        patch_order=p_order, patch_index=patch.index,
                        resize_factor=cfg.eval_resize,
                    )
                )
            aps = [r.ap for r in ledger.records[-len(state.validation_patches[p_order]):]]
            log(f"eval: model {m} vs order-{p_order} patches: mean AP {float(np.mean(aps)):.3f}")
    return ledger


def load_game(out_dir: str | Path) -> GameResult:
    """Reconstruct a GameResult from a run directory without recomputing.

    Orders are loaded until the first incomplete one; the result is
    marked complete only when every order and the ledger are present.
    """
    root = Path(out_dir)
    snapshot = root / CONFIG_SNAPSHOT
    if not snapshot.exists():
        raise FileNotFoundError(f"{snapshot}: not a run directory (missing config snapshot)")
    config = load_config(snapshot)
    run_id = run_id_for(config)
    state = GameState(config=config)
    N, k, V = config.max_order, config.k, config.validation_count
    loaded_orders = 0
    for order in range(N + 1):
        odir = _order_dir(root, order)
        model_path = odir / MODEL_FILE
        wanted = [model_path]
        if order >= 1:
            wanted += [odir / _patch_file("train", j) for j in range(k)]
            wanted += [odir / _patch_file("validation", v) for v in range(V)]
        if not all(p.exists() for p in wanted):
            break
        state.models[order] = load_checkpoint(model_path)
        if order >= 1:
            state.train_patches[order] = [load_patch(odir / _patch_file("train", j)) for j in range(k)]
            state.validation_patches[order] = [load_patch(odir / _patch_file("validation", v)) for v in range(V)]
        loaded_orders += 1

    ledger_path = root / LEDGER_JSON
    if ledger_path.exists():
        state.ledger = EvalLedger.from_json(json.loads(ledger_path.read_text(encoding="utf-8")))
    complete = loaded_orders == N + 1 and state.ledger is not None
    heat = None
    if complete:
        heat = build_heatmap(state.ledger)
        heat.validate()
    return GameResult(run_id, root, state, heat, complete)


# ---------------------------------------------------------------------------
# transferability


@dataclass
class TransferResult:
    """Validation patches replayed against a zoo of 0th-order models.

    ``ap[p][i][j]`` is the AP of zoo member i against validation patch j
    of order p; bar values are means of the per-member means, whiskers
    their standard deviation. ``delta_mean[p]`` averages each member's
    own grayscale baseline minus its patched AP.
    """

    run_id: str
    eval_seed: int
    patch_orders: list[int]
    member_names: list[str]
    member_clean: list[float]
    member_gray_mean: list[float]
    member_gray_std: list[float]
    ap: dict[int, list[list[float]]]

    def member_means(self, order: int) -> list[float]:
        return [float(np.mean(row)) for row in self.ap[order]]

    @property
    def mean_ap(self) -> dict[int, float]:
        return {p: float(np.mean(self.member_means(p))) for p in self.patch_orders}

    @property
    def std_ap(self) -> dict[int, float]:
        return {p: float(np.std(self.member_means(p))) for p in self.patch_orders}

    @property
    def delta_mean(self) -> dict[int, float]:
        out = {}
        for p in self.patch_orders:
            deltas = [g - m for g, m in zip(self.member_gray_mean, self.member_means(p))]
            out[p] = float(np.mean(deltas))
        return out

    def to_json(self) -> dict:
        return {
            "run_id": self.run_id,
            "eval_seed": self.eval_seed,
            "patch_orders": self.patch_orders,
            "member_names": self.member_names,
            "member_clean": self.member_clean,
            "member_gray_mean": self.member_gray_mean,
            "member_gray_std": self.member_gray_std,
            "ap": {str(p): rows for p, rows in self.ap.items()},
        }

    @staticmethod
    def from_json(payload: dict) -> "TransferResult":
        return TransferResult(
            run_id=payload["run_id"],
            eval_seed=payload["eval_seed"],
            patch_orders=list(payload["patch_orders"]),
            member_names=list(payload["member_names"]),
            member_clean=list(payload["member_clean"]),
            member_gray_mean=list(payload["member_gray_mean"]),
            member_gray_std=list(payload["member_gray_std"]),
            ap={int(p): rows for p, rows in payload["ap"].items()},
        )


def save_transfer(result: TransferResult, path: str | Path) -> None:
    Path(path).write_text(json.dumps(result.to_json(), indent=2) + "\n", encoding="utf-8")


def load_transfer(path: str | Path) -> TransferResult:
    return TransferResult.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def train_zoo(
    config: GameConfig,
    count: int = 5,
    *,
    dataset: Dataset | None = None,
    progress: Callable[[str], None] | None = None,
) -> list[DetectorModel]:
    """Standard-trained detectors cycling through the architecture
    registry, each with its own derived seed."""
    from .detector import ARCH_VARIANTS

    if count < 1:
        raise ValueError(f"zoo needs at least one member, got {count}")
    if dataset is None:
        spec = DatasetSpec.for_family(
            "detector-train", derive_seed(config.seed, "data", "detector-train"), config.image_size
        )
        dataset = generate_dataset(spec, config.detector_scenes)
    variants = list(ARCH_VARIANTS)
    zoo = []
    for i in range(count):
        variant = variants[i % len(variants)]
        if progress is not None:
            progress(f"zoo member {i}: training variant {variant}")
        zoo.append(
            train_detector(
                dataset,
                epochs=config.detector_epochs,
                seed=derive_seed(config.seed, "zoo", i),
                variant=variant,
                lr=config.detector_lr,
                weight_decay=config.weight_decay,
                batch_size=config.detector_batch,
                order=0,
                regime="standard",
            )
        )
    return zoo


def run_transfer(
    validation_patches: Mapping[int, Sequence[Patch]],
    zoo: Sequence[DetectorModel],
    config: GameConfig,
    *,
    run_id: str = "transfer",
    eval_seed: int | None = None,
    dataset: Dataset | None = None,
    progress: Callable[[str], None] | None = None,
) -> TransferResult:
    """AP of every zoo member against every validation patch, plus each
    member's clean and grayscale baselines.

    Zoo members must all be 0th-order; the patches come from a game the
    zoo never participated in, so every cell is a transfer measurement.
    """
    zoo = list(zoo)
    if not zoo:
        raise ValueError("transfer needs a non-empty zoo")
    for model in zoo:
        if model.order != 0:
            raise ValueError(f"zoo members must be 0th-order, found order {model.order}")
        model.set_trainable(False)
    orders = sorted(validation_patches)
    if not orders:
        raise ValueError("no validation patches to transfer")

    if dataset is None:
        spec = DatasetSpec.for_family("eval", derive_seed(config.seed, "data", "eval"), config.image_size)
        dataset = generate_dataset(spec, config.eval_scenes)
    seed = eval_seed_for(config) if eval_seed is None else eval_seed
    protocol = ApplicationProtocol.for_mode(
        "eval",
        resize_range=(config.eval_resize, config.eval_resize),
        p_box=config.p_box,
        p_hal=config.p_hal,
    )

    names, clean, gray_mean, gray_std = [], [], [], []
    ap: dict[int, list[list[float]]] = {p: [] for p in orders}
    for i, model in enumerate(zoo):
        name = f"{model.variant}-{i}"
        names.append(name)
        clean.append(evaluate(model, dataset, "clean", eval_seed=seed).ap)
        gray = grayscale_baseline(model, dataset, protocol, eval_seed=seed)
        gray_mean.append(gray.mean)
        gray_std.append(gray.std)
        for p in orders:
            row = [
                evaluate(model, dataset, patch, protocol=protocol, eval_seed=seed).ap
                for patch in validation_patches[p]
            ]
            ap[p].append(row)
        if progress is not None:
            progress(
                f"zoo member {name}: clean {clean[-1]:.3f}, grayscale {gray.mean:.3f}, "
                + ", ".join(f"order-{p} mean {float(np.mean(ap[p][-1])):.3f}" for p in orders)
            )
    return TransferResult(
        run_id=run_id,
        eval_seed=seed,
        patch_orders=orders,
        member_names=names,
        member_clean=clean,
        member_gray_mean=gray_mean,
        member_gray_std=gray_std,
        ap=ap,
    )
