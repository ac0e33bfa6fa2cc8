"""Differentiable single-class grid detector with two decoding heads.

A small stride-8 conv backbone feeds two structurally identical heads.
The one-to-one head is trained with a single positive cell per ground
truth box and is the only head used at inference, so no NMS is needed;
the one-to-many head treats every covered cell as positive and
contributes its confidence map to the attack surface.

Per cell each head emits ``[confidence logit, dx, dy, dw, dh]``: the box
center is the cell center displaced by ``(dx, dy)`` cell widths and the
box sides are ``prior * exp(dw|dh)`` with a prior of two cell widths.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .optim import AdamWState, adamw_step, zero_grads
from .scenes import Box, Dataset
from .util import rng_for

CHECKPOINT_MAGIC = b"CMLD"
CHECKPOINT_VERSION = 1

# loss shaping: positive-cell emphasis in the confidence BCE, extra
# pressure on the hard negatives right next to each one-to-one winner
# (they otherwise hedge and emit duplicate detections), and the weight
# of the box-offset term
POSITIVE_CELL_WEIGHT = 8.0
HARD_NEGATIVE_WEIGHT = 16.0
OFFSET_LOSS_WEIGHT = 4.0
OFFSET_HUBER_BETA = 0.25

# random-erasing augmentation during training: per ground-truth box, one
# constant achromatic square at a random in-box position
OCCLUSION_PROB = 0.5
OCCLUSION_FACTOR_RANGE = (0.3, 0.7)

ARCH_VARIANTS: dict[str, dict] = {
    "base": {"stages": [16, 32, 48], "extra": [48], "head": 32},
    "wide": {"stages": [24, 48, 64], "extra": [64], "head": 48},
    "slim": {"stages": [12, 24, 32], "extra": [32], "head": 24},
    "deep": {"stages": [16, 32, 48], "extra": [48, 48], "head": 32},
    "tiny": {"stages": [10, 20, 28], "extra": [], "head": 20},
}


@dataclass
class Detection:
    box: Box
    score: float


@dataclass
class RawPrediction:
    """Pre-sigmoid confidence maps and box offsets for both heads."""

    o2o_logits: Tensor  # [B,G,G]
    o2o_offsets: Tensor  # [B,4,G,G]
    o2m_logits: Tensor  # [B,G,G]
    o2m_offsets: Tensor  # [B,4,G,G]
    grid: int
    image_size: int

    @property
    def batch(self) -> int:
        return self.o2o_logits.shape[0]

    def head_logits(self, head: str) -> Tensor:
        return self.o2o_logits if head == "o2o" else self.o2m_logits


@dataclass
class DetectorModel:
    variant: str
    image_size: int
    order: int = 0
    regime: str = "standard"
    params: dict[str, Tensor] = field(default_factory=dict)
    param_names: list[str] = field(default_factory=list)

    @property
    def grid(self) -> int:
        return self.image_size // 8

    @property
    def cell(self) -> float:
        return self.image_size / self.grid

    @property
    def prior(self) -> float:
        return 2.0 * self.cell

    def parameters(self) -> list[Tensor]:
        return [self.params[n] for n in self.param_names]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag


def _he_init(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def build_detector(variant: str, image_size: int, seed: int, order: int = 0, regime: str = "standard") -> DetectorModel:
    """Fresh detector with seeded He-normal weights."""
    if variant not in ARCH_VARIANTS:
        raise ValueError(f"unknown architecture variant {variant!r}; options: {sorted(ARCH_VARIANTS)}")
    if image_size % 8 != 0 or image_size < 16:
        raise ValueError(f"image size must be a multiple of 8 and >= 16, got {image_size}")
    arch = ARCH_VARIANTS[variant]
    model = DetectorModel(variant=variant, image_size=image_size, order=order, regime=regime)

    def add_conv(name: str, cin: int, cout: int, k: int, logit_bias: float = 0.0):
        rng = rng_for(seed, "init", variant, name)
        model.params[f"{name}.w"] = Tensor(_he_init(rng, (cout, cin, k, k)), requires_grad=True)
        model.params[f"{name}.b"] = Tensor(np.full(cout, logit_bias), requires_grad=True)
        model.param_names += [f"{name}.w", f"{name}.b"]

    cin = 3
    for i, cout in enumerate(arch["stages"]):
        add_conv(f"backbone.s{i}", cin, cout, 3)
        cin = cout
    for i, cout in enumerate(arch["extra"]):
        add_conv(f"backbone.e{i}", cin, cout, 3)
        cin = cout
    for head in ("o2o", "o2m"):
        add_conv(f"{head}.trunk", cin, arch["head"], 3)
        # confidence starts pessimistic so early training is not swamped
        # by false positives
        add_conv(f"{head}.logit", arch["head"], 1, 1, logit_bias=-2.0)
        add_conv(f"{head}.offset", arch["head"], 4, 1)
    return model


def forward(model: DetectorModel, images: Tensor) -> RawPrediction:
    """Run the detector; differentiable w.r.t. images and weights."""
    if images.data.ndim != 4 or images.data.shape[1] != 3:
        raise ValueError(f"expected images [B,3,H,W], got {images.data.shape}")
    B, _, H, W = images.data.shape
    if H != model.image_size or W != model.image_size:
        raise ValueError(f"detector expects {model.image_size}x{model.image_size} input, got {H}x{W}")
    arch = ARCH_VARIANTS[model.variant]
    p = model.params

    x = images
    for i in range(len(arch["stages"])):
        x = ad.conv2d(x, p[f"backbone.s{i}.w"], p[f"backbone.s{i}.b"], stride=2, padding=1)
        x = ad.leaky_relu(x)
    for i in range(len(arch["extra"])):
        x = ad.conv2d(x, p[f"backbone.e{i}.w"], p[f"backbone.e{i}.b"], stride=1, padding=1)
        x = ad.leaky_relu(x)

    G = model.grid
    heads = {}
    for head in ("o2o", "o2m"):
        t = ad.conv2d(x, p[f"{head}.trunk.w"], p[f"{head}.trunk.b"], stride=1, padding=1)
        t = ad.leaky_relu(t)
        logits = ad.conv2d(t, p[f"{head}.logit.w"], p[f"{head}.logit.b"])
        offsets = ad.conv2d(t, p[f"{head}.offset.w"], p[f"{head}.offset.b"])
        heads[head] = (ad.reshape(logits, (B, G, G)), offsets)

    return RawPrediction(
        o2o_logits=heads["o2o"][0],
        o2o_offsets=heads["o2o"][1],
        o2m_logits=heads["o2m"][0],
        o2m_offsets=heads["o2m"][1],
        grid=G,
        image_size=model.image_size,
    )


def _cell_centers(grid: int, cell: float) -> tuple[np.ndarray, np.ndarray]:
    coords = (np.arange(grid) + 0.5) * cell
    cy, cx = np.meshgrid(coords, coords, indexing="ij")
    return cy, cx


def decode(raw: RawPrediction, batch_index: int = 0, conf_threshold: float = 0.25, max_det: int = 30) -> list[Detection]:
    """Decode one image's one-to-one head into scored boxes.

    Cells at or above the confidence threshold are decoded, sorted by
    descending score (ties by cell index), and truncated to ``max_det``.
    No NMS is applied.
    """
    G = raw.grid
    cell = raw.image_size / G
    prior = 2.0 * cell
    logits = raw.o2o_logits.data[batch_index]
    offs = raw.o2o_offsets.data[batch_index].astype(np.float64)
    scores = 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))
    cy, cx = _cell_centers(G, cell)

    keep = scores >= conf_threshold
    if not keep.any():
        return []
    sel = np.argwhere(keep)
    flat_scores = scores[keep]
    order = np.lexsort((sel[:, 1] + sel[:, 0] * G, -flat_scores))
    dets: list[Detection] = []
    for idx in order[: max_det if max_det else None]:
        i, j = sel[idx]
        dx, dy, dw, dh = offs[:, i, j]
        bw = prior * np.exp(np.clip(dw, -4.0, 4.0))
        bh = prior * np.exp(np.clip(dh, -4.0, 4.0))
        bcx = cx[i, j] + dx * cell
        bcy = cy[i, j] + dy * cell
        x0 = np.clip(bcx - bw / 2.0, 0.0, raw.image_size)
        y0 = np.clip(bcy - bh / 2.0, 0.0, raw.image_size)
        x1 = np.clip(bcx + bw / 2.0, 0.0, raw.image_size)
        y1 = np.clip(bcy + bh / 2.0, 0.0, raw.image_size)
        if x1 - x0 < 1e-3 or y1 - y0 < 1e-3:
            continue
        dets.append(Detection(box=Box(float(x0), float(y0), float(x1), float(y1)), score=float(flat_scores[idx])))
        if max_det and len(dets) >= max_det:
            break
    return dets


def _covered_cells(box: Box, grid: int, cell: float) -> list[tuple[int, int]]:
    cy, cx = _cell_centers(grid, cell)
    inside = (cx >= box.x_min) & (cx <= box.x_max) & (cy >= box.y_min) & (cy <= box.y_max)
    return [tuple(ij) for ij in np.argwhere(inside)]


def _nearest_cell(box: Box, grid: int, cell: float) -> tuple[int, int]:
    cy, cx = _cell_centers(grid, cell)
    bx, by = box.center
    d2 = (cx - bx) ** 2 + (cy - by) ** 2
    flat = int(np.argmin(d2))
    return flat // grid, flat % grid


def assign_cells(
    gt: list[Box], grid: int, cell: float, o2o_pref: np.ndarray | None = None
) -> tuple[dict[tuple[int, int], Box], dict[tuple[int, int], Box]]:
    """Positive-cell maps for (one-to-one, one-to-many).

    One-to-many marks every cell whose center lies inside a box (nearest
    cell as fallback when none is). One-to-one gives each box a single
    cell among its covered set: the unclaimed one maximizing
    ``pref − (center distance / cell)²``. Passing the head's current
    confidence logits as ``o2o_pref`` makes the choice prediction-aware,
    so one winning cell per object is reinforced instead of letting
    equally-near neighbors hedge; without it the measure is distance
    only. Boxes are processed in input order, ties keep the
    first (row-major) cell.
    """
    o2o: dict[tuple[int, int], Box] = {}
    o2m: dict[tuple[int, int], Box] = {}
    cy, cx = _cell_centers(grid, cell)
    for box in gt:
        covered = _covered_cells(box, grid, cell)
        if not covered:
            covered = [_nearest_cell(box, grid, cell)]
        for ij in covered:
            o2m[ij] = box

        bx, by = box.center
        free = [ij for ij in covered if ij not in o2o]
        if not free:
            d2 = ((cx - bx) ** 2 + (cy - by) ** 2).reshape(-1)
            for flat in np.argsort(d2, kind="stable"):
                ij = (int(flat) // grid, int(flat) % grid)
                if ij not in o2o:
                    free = [ij]
                    break
        cost = np.array(
            [
                (0.0 if o2o_pref is None else float(o2o_pref[i, j]))
                - ((cx[i, j] - bx) ** 2 + (cy[i, j] - by) ** 2) / cell**2
                for i, j in free
            ]
        )
        o2o[free[int(np.argmax(cost))]] = box
    return o2o, o2m


def _offset_targets(box: Box, ij: tuple[int, int], cell: float, prior: float) -> np.ndarray:
    i, j = ij
    bx, by = box.center
    return np.array(
        [
            (bx - (j + 0.5) * cell) / cell,
            (by - (i + 0.5) * cell) / cell,
            np.log(max(box.width, 1e-3) / prior),
            np.log(max(box.height, 1e-3) / prior),
        ]
    )


def detector_loss(
    raw: RawPrediction,
    gt: list[Box] | list[list[Box]],
    distractors: list[Box] | list[list[Box]] | None = None,
) -> Tensor:
    """Summed two-head training loss.

    Per head: weighted binary cross-entropy over the confidence map (all
    cells; positives carry extra weight) plus smooth-L1 on the offsets of
    positive cells, both mean-reduced. Cells covered by distractor boxes
    are weighted as hard negatives in both heads, so clutter textures are
    actively suppressed rather than merely unrewarded.
    """
    if len(gt) > 0 and isinstance(gt[0], Box):
        gt_lists = [gt]  # type: ignore[list-item]
    elif len(gt) == 0:
        gt_lists = [[]] * raw.batch
    else:
        gt_lists = gt  # type: ignore[assignment]
    B, G = raw.batch, raw.grid
    if len(gt_lists) != B:
        raise ValueError(f"got {len(gt_lists)} ground-truth lists for a batch of {B}")
    if distractors is None:
        dis_lists: list[list[Box]] = [[]] * B
    elif len(distractors) > 0 and isinstance(distractors[0], Box):
        dis_lists = [distractors]  # type: ignore[list-item]
    elif len(distractors) == 0:
        dis_lists = [[]] * B
    else:
        dis_lists = distractors  # type: ignore[assignment]
    if len(dis_lists) != B:
        raise ValueError(f"got {len(dis_lists)} distractor lists for a batch of {B}")
    cell = raw.image_size / G
    prior = 2.0 * cell

    terms: list[Tensor] = []
    for head in ("o2o", "o2m"):
        conf_t = np.zeros((B, G, G))
        weights = np.ones((B, G, G))
        pos_flat: list[int] = []
        off_targets: list[np.ndarray] = []
        for b, boxes in enumerate(gt_lists):
            for dbox in dis_lists[b]:
                for (i, j) in _covered_cells(dbox, G, cell):
                    weights[b, i, j] = HARD_NEGATIVE_WEIGHT
            # static distance-based winners: the same cell is positive
            # every epoch, which keeps the one-to-one supervision from
            # oscillating under the hard-negative pressure below
            o2o_map, o2m_map = assign_cells(boxes, G, cell)
            assign = o2o_map if head == "o2o" else o2m_map
            if head == "o2o":
                # covered-but-not-winning cells, plus the winners' 8
                # neighbors, must learn a clean 0
                for (i, j) in o2m_map:
                    if (i, j) not in assign:
                        weights[b, i, j] = HARD_NEGATIVE_WEIGHT
                for (i, j) in assign:
                    for ni in range(max(0, i - 1), min(G, i + 2)):
                        for nj in range(max(0, j - 1), min(G, j + 2)):
                            if (ni, nj) not in assign:
                                weights[b, ni, nj] = HARD_NEGATIVE_WEIGHT
            for (i, j), box in sorted(assign.items()):
                conf_t[b, i, j] = 1.0
                weights[b, i, j] = POSITIVE_CELL_WEIGHT
                for c in range(4):
                    pos_flat.append(((b * 4) + c) * G * G + i * G + j)
                off_targets.append(_offset_targets(box, (i, j), cell, prior))

        logits = raw.head_logits(head)
        bce = ad.bce_with_logits(logits, conf_t)
        wsum = float(weights.sum())
        bce_term = ad.scale(ad.reduce_sum(ad.mul(bce, Tensor(weights, dtype=bce.data.dtype))), 1.0 / wsum)
        terms.append(bce_term)

        if off_targets:
            offsets = raw.o2o_offsets if head == "o2o" else raw.o2m_offsets
            pred = ad.gather(offsets, np.asarray(pos_flat))
            sl1 = ad.smooth_l1(pred, np.concatenate(off_targets), beta=OFFSET_HUBER_BETA)
            terms.append(ad.scale(ad.reduce_mean(sl1), OFFSET_LOSS_WEIGHT))

    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def target_confidence_logits(raw: RawPrediction, gt: list[Box], batch_index: int = 0) -> list[Tensor]:
    """Strongest pre-sigmoid confidence inside each ground-truth box, for
    both heads.

    For every box and head this returns the maximum confidence logit over
    the cells whose centers fall inside the box (nearest cell when none
    do). Order: boxes in input order, one-to-one head then one-to-many.
    Gradients flow only into the cell attaining each maximum.
    """
    G = raw.grid
    cell = raw.image_size / G
    out: list[Tensor] = []
    for box in gt:
        cells = _covered_cells(box, G, cell)
        if not cells:
            cells = [_nearest_cell(box, G, cell)]
        flat = np.array([batch_index * G * G + i * G + j for i, j in cells])
        for head in ("o2o", "o2m"):
            out.append(ad.gather_max(raw.head_logits(head), flat))
    return out


# ---------------------------------------------------------------------------
# training


def occlude_boxes(image: np.ndarray, boxes, rng) -> np.ndarray:
    """Random-erasing pass over ground-truth boxes, in place.

    With probability ``OCCLUSION_PROB`` a box gets one constant gray
    square whose side is a random fraction of the box short side, at a
    uniform position inside the box. Featureless blockers are thereby
    in-distribution: plain coverage costs the trained detector little,
    and whatever a crafted occluder achieves beyond that is down to its
    content.
    """
    _, H, W = image.shape
    for box in boxes:
        if rng.uniform() >= OCCLUSION_PROB:
            continue
        short = box.min_side
        if short < 2.0:
            continue
        factor = rng.uniform(*OCCLUSION_FACTOR_RANGE)
        side = max(1, int(round(factor * short)))
        level = rng.uniform()
        x0 = int(round(box.x_min + rng.uniform() * max(0.0, box.width - side)))
        y0 = int(round(box.y_min + rng.uniform() * max(0.0, box.height - side)))
        x0 = min(max(x0, 0), W - side)
        y0 = min(max(y0, 0), H - side)
        image[:, y0 : y0 + side, x0 : x0 + side] = level
    return image


def train_detector(
    dataset: Dataset,
    *,
    epochs: int,
    seed: int,
    variant: str = "base",
    lr: float = 3e-3,
    weight_decay: float = 1e-4,
    batch_size: int = 16,
    patch_pool=None,
    pi: float = 0.0,
    adv_resize: tuple[float, float] = (0.75, 0.9),
    order: int = 0,
    regime: str = "standard",
    progress=None,
) -> DetectorModel:
    """AdamW training; with a non-empty patch pool each image first passes
    the patch applier (one uniformly chosen pool patch per image, each
    ground-truth box patched with probability ``pi``) before any use.

    Deterministic for a given seed.
    """
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    if not 0.0 <= pi <= 1.0:
        raise ValueError(f"patch probability must be in [0,1], got {pi}")
    pool = list(patch_pool) if patch_pool else []
    if pi > 0.0 and not pool:
        raise ValueError("patch probability > 0 requires a non-empty patch pool")

    from .patches import ApplicationProtocol, apply_protocol  # late import; patches depends on this module

    model = build_detector(variant, dataset.spec.image_size, seed=seed, order=order, regime=regime)
    state = AdamWState(lr=lr, weight_decay=weight_decay)
    rng = rng_for(seed, "train", variant, order, regime)
    protocol = ApplicationProtocol.for_mode("adv-train", pi=pi, resize_range=adv_resize)

    n = len(dataset)
    params = model.parameters()
    decay_points = {int(epochs * 0.6), int(epochs * 0.85)}
    for epoch in range(epochs):
        if epoch in decay_points:
            state.lr *= 0.1
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            images = []
            gt_lists = []
            dis_lists = []
            for si in idx:
                scene = dataset.scenes[int(si)]
                img = np.array(scene.image, dtype=np.float32)
                if pool and pi > 0.0:
                    patch = pool[int(rng.integers(0, len(pool)))]
                    img = apply_protocol(scene, patch, protocol, rng=rng, image=img).image
                img = occlude_boxes(img, scene.target_boxes, rng)
                images.append(img)
                gt_lists.append(scene.target_boxes)
                dis_lists.append(scene.distractor_boxes)
            batch = Tensor(np.stack(images))
            with Tape() as tape:
                raw = forward(model, batch)
                loss = detector_loss(raw, gt_lists, distractors=dis_lists)
                tape.backward(loss)
            adamw_step(params, state)
            zero_grads(params)
            epoch_loss += loss.item() * len(idx)
        if progress is not None:
            progress(epoch, epoch_loss / n)
    return model


def training_losses(dataset: Dataset, *, epochs: int, seed: int, **kwargs) -> list[float]:
    """Per-epoch mean training loss; convenience wrapper around
    :func:`train_detector` for diagnostics."""
    losses: list[float] = []
    train_detector(dataset, epochs=epochs, seed=seed, progress=lambda e, l: losses.append(l), **kwargs)
    return losses


# ---------------------------------------------------------------------------
# checkpoint io


def save_checkpoint(model: DetectorModel, path: str | Path) -> None:
    """Binary checkpoint: magic, version, JSON descriptor, then float32
    little-endian weight blobs in ``param_names`` order."""
    header = {
        "variant": model.variant,
        "image_size": model.image_size,
        "order": model.order,
        "regime": model.regime,
        "param_names": model.param_names,
        "shapes": {n: list(model.params[n].shape) for n in model.param_names},
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(hb)))
        f.write(hb)
        for name in model.param_names:
            f.write(np.ascontiguousarray(model.params[name].data, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> DetectorModel:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a detector checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    model = DetectorModel(
        variant=header["variant"],
        image_size=header["image_size"],
        order=header["order"],
        regime=header["regime"],
    )
    off = 12 + hlen
    for name in header["param_names"]:
        shape = tuple(header["shapes"][name])
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape)
        off += count * 4
        model.params[name] = Tensor(arr.copy(), requires_grad=True)
        model.param_names.append(name)
    if off != len(blob):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return model
