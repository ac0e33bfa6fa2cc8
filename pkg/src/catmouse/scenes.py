"""Deterministic synthetic scene generator.

Two dataset families with a shared rendering vocabulary: a detector
training family (plus its matching eval split) with several mid-sized
actors per scene, and a separate actor-centered family with fewer, larger
actors used for patch optimization. Actors are two-tone upright "figure"
glyphs; distractors are other polygons that are rendered but never
annotated as targets.

Every scene is a pure function of (master seed, family, index), so
regeneration is byte-stable and families occupy disjoint seed subspaces.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .util import rng_for

FAMILIES = ("detector-train", "patch-train", "eval")


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in continuous pixel coordinates."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def min_side(self) -> float:
        return min(self.width, self.height)

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    @property
    def area(self) -> float:
        return self.width * self.height


@dataclass
class Scene:
    image: "np.ndarray"  # [3,H,W] float in [0,1]
    target_boxes: list[Box]
    distractor_boxes: list[Box] = field(default_factory=list)
    index: int = 0


@dataclass(frozen=True)
class DatasetSpec:
    family: str
    seed: int
    image_size: int = 64
    actors_range: tuple[int, int] = (1, 3)
    distractors_range: tuple[int, int] = (0, 3)
    actor_height_range: tuple[int, int] = (14, 30)
    min_side: int = 10
    background_tone: tuple[float, float, float] = (0.55, 0.57, 0.52)
    background_noise: float = 0.05
    # chance of one extra actor too occluded to count: its center is
    # covered by clutter texture and it carries no target annotation
    buried_prob: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}, expected one of {FAMILIES}")
        if self.actors_range[0] < 0 or self.actors_range[0] > self.actors_range[1]:
            raise ValueError(f"bad actors range {self.actors_range}")
        if self.actor_height_range[0] < self.min_side:
            raise ValueError("actor height range must be at least min_side")
        if not 0.0 <= self.buried_prob <= 1.0:
            raise ValueError(f"buried_prob must be a probability, got {self.buried_prob}")

    @staticmethod
    def for_family(family: str, seed: int, image_size: int = 64) -> "DatasetSpec":
        """Per-family defaults. The actor-centered patch-train family uses
        fewer, larger actors than the detector-train/eval families."""
        if family == "patch-train":
            return DatasetSpec(
                family=family,
                seed=seed,
                image_size=image_size,
                actors_range=(1, 2),
                distractors_range=(0, 2),
                actor_height_range=(
                    max(10, int(image_size * 0.34)),
                    max(12, int(image_size * 0.62)),
                ),
            )
        # detector-train leans on clutter: every scene carries distractors,
        # and some contain an unannotated buried actor, so non-target
        # texture is a constant presence during training
        train = family == "detector-train"
        return DatasetSpec(
            family=family,
            seed=seed,
            image_size=image_size,
            actors_range=(1, 3),
            distractors_range=(2, 5) if train else (0, 3),
            actor_height_range=(
                max(10, int(image_size * 0.22)),
                max(12, int(image_size * 0.47)),
            ),
            buried_prob=0.35 if train else 0.0,
        )


@dataclass
class Dataset:
    spec: DatasetSpec
    scenes: list[Scene]

    def __len__(self) -> int:
        return len(self.scenes)

    def __iter__(self):
        return iter(self.scenes)


def _pixel_grid(size: int):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    return ys + 0.5, xs + 0.5


def _tight_box(mask: np.ndarray) -> Box:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return Box(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def _paint(image: np.ndarray, mask: np.ndarray, color) -> None:
    for c in range(3):
        image[c][mask] = color[c]


def _actor_masks(size: int, x0: float, y0: float, w: float, h: float):
    """Head circle plus a tapered torso inside an exact (w, h) footprint.

    Returns (head mask, torso mask); the union's tight bounding box equals
    the footprint up to rasterization of the analytic shapes.
    """
    ys, xs = _pixel_grid(size)
    r = min(w / 2.0, h * 0.24)
    cx = x0 + w / 2.0
    head = (xs - cx) ** 2 + (ys - (y0 + r)) ** 2 <= r * r
    ty0 = y0 + 2.0 * r
    frac = np.clip((ys - ty0) / max(h - 2.0 * r, 1e-6), 0.0, 1.0)
    half = (w / 2.0) * (1.0 - 0.4 * frac)
    torso = (ys >= ty0) & (ys <= y0 + h) & (np.abs(xs - cx) <= half)
    return head, torso


def _render_actor(image: np.ndarray, rng: np.random.Generator, spec: DatasetSpec, existing: list[Box]) -> Box | None:
    size = spec.image_size
    lo, hi = spec.actor_height_range
    h = float(rng.integers(lo, hi + 1))
    w = max(float(spec.min_side + 1), float(np.round(h * rng.uniform(0.42, 0.58))))
    h = max(h, w)  # keep the glyph upright
    head_tone = np.array([0.86, 0.72, 0.18]) + rng.uniform(-0.06, 0.06, size=3)
    torso_tone = np.array([0.16, 0.26, 0.68]) + rng.uniform(-0.08, 0.08, size=3)

    for attempt in range(12):
        x0 = rng.uniform(3.0, size - w - 3.0)
        y0 = rng.uniform(3.0, size - h - 3.0)
        candidate = Box(x0, y0, x0 + w, y0 + h)
        if attempt < 11 and any(_pair_iou(candidate, b) >= 0.08 for b in existing):
            continue
        head, torso = _actor_masks(size, x0, y0, w, h)
        union = head | torso
        if not union.any():
            continue
        box = _tight_box(union)
        if box.min_side < spec.min_side:
            continue
        _paint(image, torso, np.clip(torso_tone, 0.0, 1.0))
        _paint(image, head, np.clip(head_tone, 0.0, 1.0))
        return box
    return None


def _render_distractor(image: np.ndarray, rng: np.random.Generator, spec: DatasetSpec) -> Box | None:
    size = spec.image_size
    ys, xs = _pixel_grid(size)
    kind = int(rng.integers(0, 3))
    side = float(rng.integers(6, max(8, size // 4)))
    cx = rng.uniform(side, size - side)
    cy = rng.uniform(side, size - side)
    tone = np.array([0.72, 0.2, 0.24]) + rng.uniform(-0.1, 0.1, size=3)
    if kind == 0:  # ring
        r = side / 2.0
        d2 = (xs - cx) ** 2 + (ys - cy) ** 2
        mask = (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    elif kind == 1:  # diamond
        mask = (np.abs(xs - cx) + np.abs(ys - cy)) <= side / 2.0
    else:  # horizontal bar
        mask = (np.abs(ys - cy) <= side / 6.0) & (np.abs(xs - cx) <= side / 2.0)
    if not mask.any():
        return None
    _paint(image, mask, np.clip(tone, 0.0, 1.0))
    return _tight_box(mask)


def _bury(image: np.ndarray, rng: np.random.Generator, box: Box) -> Box:
    """Cover the center of ``box`` with a noisy clutter-toned square and
    return the covered region as a box."""
    side = max(2, int(round(rng.uniform(0.4, 0.7) * box.min_side)))
    size = image.shape[-1]
    cx, cy = box.center
    x0 = int(round(cx - side / 2.0))
    y0 = int(round(cy - side / 2.0))
    x0 = min(max(x0, 0), size - side)
    y0 = min(max(y0, 0), size - side)
    tone = np.array([0.72, 0.2, 0.24]) + rng.uniform(-0.1, 0.1, size=3)
    block = tone[:, None, None] + rng.uniform(-0.08, 0.08, size=(3, side, side))
    image[:, y0 : y0 + side, x0 : x0 + side] = np.clip(block, 0.0, 1.0)
    return Box(float(x0), float(y0), float(x0 + side), float(y0 + side))


def _pair_iou(a: Box, b: Box) -> float:
    ix = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    if inter <= 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def _background(rng: np.random.Generator, spec: DatasetSpec) -> np.ndarray:
    size = spec.image_size
    img = np.empty((3, size, size), dtype=np.float64)
    grad = np.linspace(-0.04, 0.04, size)[None, :] + np.linspace(-0.03, 0.03, size)[:, None]
    coarse = rng.uniform(-1.0, 1.0, size=(3, 8, 8))
    reps = int(np.ceil(size / 8))
    noise = np.kron(coarse, np.ones((reps, reps)))[:, :size, :size]
    for c in range(3):
        img[c] = spec.background_tone[c] + grad + spec.background_noise * noise[c]
    return img


def generate_scene(spec: DatasetSpec, index: int) -> Scene:
    """Render scene ``index``; bit-identical for identical arguments."""
    if index < 0:
        raise ValueError(f"scene index must be >= 0, got {index}")
    rng = rng_for(spec.seed, "scene", spec.family, index)
    image = _background(rng, spec)

    distractors: list[Box] = []
    n_dis = int(rng.integers(spec.distractors_range[0], spec.distractors_range[1] + 1))
    for _ in range(n_dis):
        box = _render_distractor(image, rng, spec)
        if box is not None:
            distractors.append(box)

    targets: list[Box] = []
    n_act = int(rng.integers(spec.actors_range[0], spec.actors_range[1] + 1))
    for _ in range(n_act):
        box = _render_actor(image, rng, spec, targets)
        if box is not None:
            targets.append(box)
    if n_act > 0 and not targets:
        # overlap rejection exhausted; force one unconstrained actor
        box = _render_actor(image, rng, spec, [])
        if box is not None:
            targets.append(box)

    if rng.uniform() < spec.buried_prob:
        # an actor too occluded to count: rendered, covered, unannotated;
        # the covering block itself is clutter
        box = _render_actor(image, rng, spec, targets)
        if box is not None:
            distractors.append(_bury(image, rng, box))

    np.clip(image, 0.0, 1.0, out=image)
    return Scene(image=image.astype(np.float32), target_boxes=targets, distractor_boxes=distractors, index=index)


def generate_dataset(spec: DatasetSpec, count: int) -> Dataset:
    if count < 1:
        raise ValueError(f"dataset count must be >= 1, got {count}")
    return Dataset(spec=spec, scenes=[generate_scene(spec, i) for i in range(count)])


def export_dataset(dataset: Dataset, out_dir: str | Path) -> Path:
    """Write 8-bit PNGs plus one JSON annotation file; returns the
    annotation path."""
    from PIL import Image

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for scene in dataset:
        name = f"scene_{scene.index:05d}.png"
        arr = np.round(np.clip(scene.image, 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(arr.transpose(1, 2, 0)).save(out / "images" / name)
        records.append(
            {
                "index": scene.index,
                "file": f"images/{name}",
                "target_boxes": [[b.x_min, b.y_min, b.x_max, b.y_max] for b in scene.target_boxes],
                "distractor_boxes": [[b.x_min, b.y_min, b.x_max, b.y_max] for b in scene.distractor_boxes],
            }
        )
    ann = {
        "family": dataset.spec.family,
        "image_size": dataset.spec.image_size,
        "seed": dataset.spec.seed,
        "scenes": records,
    }
    ann_path = out / "annotations.json"
    with open(ann_path, "w") as f:
        json.dump(ann, f, indent=1)
    return ann_path
