"""Adversarial patch pipeline: init, augmentation, placement, losses.

A patch is a small trainable image pasted into scenes over target boxes.
During its optimization the pipeline stays differentiable end to end
(color jitter, projective warp, compositing all run on the tape); during
adversarial training and evaluation the same code runs tape-free and
costs plain numpy.

Placement randomness is mode dependent. Training modes consume a caller
rng stream; eval mode derives every decision from (eval seed, scene
index, box index) so that applying a different patch changes pixel
content only, never the set of placements.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .scenes import Box, Scene
from .util import rng_for

PATCH_MAGIC = b"CMPT"
PATCH_VERSION = 1

PATCH_ROLES = ("init", "train", "validation", "grayscale")

# augmentation bounds (patch-train mode only)
BRIGHTNESS_RANGE = (-0.2, 0.2)
CONTRAST_RANGE = (0.8, 1.25)
MAX_ROTATION_DEG = 30.0
PERSPECTIVE_FRACTION = 0.15  # corner displacement as a fraction of the patch side


@dataclass
class Patch:
    """Trainable patch plus provenance.

    ``pixels`` is a [3,S,S] tensor nominally in [0,1]; values may leave
    the range while the patch is being optimized and are clamped when
    the finished patch is built. ``order`` counts completed cat-and-mouse
    cycles (n-th order: optimized against an (n-1)-th-order model).
    """

    pixels: Tensor
    order: int = 0
    index: int = 0
    role: str = "init"
    regime: str = "standard"
    seed: int = 0
    source_model_order: int = -1

    def __post_init__(self):
        if not isinstance(self.pixels, Tensor):
            self.pixels = Tensor(np.asarray(self.pixels))
        shape = self.pixels.shape
        if len(shape) != 3 or shape[0] != 3 or shape[1] != shape[2]:
            raise ValueError(f"patch pixels must be [3,S,S], got {shape}")
        if shape[1] < 4:
            raise ValueError(f"patch side must be >= 4, got {shape[1]}")
        if self.role not in PATCH_ROLES:
            raise ValueError(f"unknown patch role {self.role!r}")
        if self.role in ("train", "validation") and self.order < 1:
            raise ValueError(f"{self.role} patches carry order >= 1, got {self.order}")

    @property
    def size(self) -> int:
        return self.pixels.shape[1]

    def clamped(self) -> np.ndarray:
        return np.clip(self.pixels.data, 0.0, 1.0).astype(np.float32)


@dataclass(frozen=True)
class LossWeights:
    obj: float = 1.0
    smooth: float = 0.5
    validity: float = 10.0

    def __post_init__(self):
        if self.obj <= 0.0:
            raise ValueError("objectness weight must be positive")
        if self.smooth < 0.0 or self.validity < 0.0:
            raise ValueError("loss weights must be non-negative")


_MODE_DEFAULTS = {
    # mode: (p_box, p_hal, resize, augment, placement)
    "patch-train": (1.0, 0.0, (0.3, 0.6), True, "random-in-box"),
    "adv-train": (0.25, 0.0, (0.75, 0.9), False, "random-in-box"),
    "eval": (0.5, 0.5, (0.5, 0.5), False, "box-center"),
}


@dataclass(frozen=True)
class ApplicationProtocol:
    """How and where patches enter scenes for one pipeline mode."""

    mode: str
    p_box: float
    p_hal: float
    resize: tuple[float, float]
    augment: bool
    placement: str
    pi: float | None = None

    def __post_init__(self):
        if self.mode not in _MODE_DEFAULTS:
            raise ValueError(f"unknown protocol mode {self.mode!r}")
        for name, p in (("p_box", self.p_box), ("p_hal", self.p_hal)):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be a probability, got {p}")
        lo, hi = self.resize
        if not (0.0 < lo <= hi):
            raise ValueError(f"resize range must satisfy 0 < lo <= hi, got {self.resize}")
        if self.placement not in ("random-in-box", "box-center"):
            raise ValueError(f"unknown placement {self.placement!r}")
        if self.pi is not None and not 0.0 <= self.pi <= 1.0:
            raise ValueError(f"patch probability pi must be in [0,1], got {self.pi}")

    @classmethod
    def for_mode(cls, mode: str, *, pi: float | None = None, resize_range=None, p_box=None, p_hal=None) -> "ApplicationProtocol":
        """Protocol with the documented per-mode defaults.

        adv-train mode takes its per-box probability from ``pi``
        (default 0.25); the other modes ignore ``pi``.
        """
        if mode not in _MODE_DEFAULTS:
            raise ValueError(f"unknown protocol mode {mode!r}")
        d_pbox, d_phal, d_resize, augment, placement = _MODE_DEFAULTS[mode]
        if mode == "adv-train":
            pi = 0.25 if pi is None else pi
            d_pbox = pi
        return cls(
            mode=mode,
            p_box=d_pbox if p_box is None else p_box,
            p_hal=d_phal if p_hal is None else p_hal,
            resize=tuple(resize_range) if resize_range is not None else d_resize,
            augment=augment,
            placement=placement,
            pi=pi if mode == "adv-train" else None,
        )

    @property
    def fixed_resize(self) -> bool:
        return self.resize[0] == self.resize[1]

    def draw_resize(self, rng) -> float:
        lo, hi = self.resize
        return lo if lo == hi else float(rng.uniform(lo, hi))

    def describe_resize(self) -> str:
        lo, hi = self.resize
        return repr(lo) if lo == hi else f"[{lo!r},{hi!r}]"

    def hallucination_factor(self) -> float:
        lo, hi = self.resize
        return lo if lo == hi else 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# patch sources


def init_patch(size: int, seed: int) -> Patch:
    """Fresh patch with i.i.d. uniform [0,1] pixels."""
    if size < 4:
        raise ValueError(f"patch side must be >= 4, got {size}")
    rng = rng_for(seed, "patch-init", size)
    pixels = rng.random((3, size, size)).astype(np.float32)
    return Patch(pixels=Tensor(pixels), role="init", seed=seed)


def grayscale_patch(level_index: int, size: int = 8) -> Patch:
    """Constant gray patch at one of the 11 levels 0/10 .. 10/10."""
    if not 0 <= level_index <= 10:
        raise ValueError(f"grayscale level index must be in 0..10, got {level_index}")
    value = level_index / 10.0
    pixels = np.full((3, size, size), value, dtype=np.float32)
    return Patch(pixels=Tensor(pixels), role="grayscale", index=level_index)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentParams:
    brightness: float
    contrast: float
    angle_deg: float
    corner_shift: np.ndarray  # [4,2] pixel displacements


def sample_augment_params(rng, size: int) -> AugmentParams:
    """Draws in a fixed order: brightness, contrast, angle, corners."""
    b = float(rng.uniform(*BRIGHTNESS_RANGE))
    c = float(rng.uniform(*CONTRAST_RANGE))
    ang = float(rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG))
    shift = rng.uniform(-PERSPECTIVE_FRACTION, PERSPECTIVE_FRACTION, size=(4, 2)) * size
    return AugmentParams(brightness=b, contrast=c, angle_deg=ang, corner_shift=shift)


def _homography_from_points(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Exact projective map sending 4 source points to 4 targets."""
    A = np.zeros((8, 8))
    rhs = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        A[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        A[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        rhs[2 * i] = u
        rhs[2 * i + 1] = v
    h = np.linalg.solve(A, rhs)
    return np.append(h, 1.0).reshape(3, 3)


def augment_homography(params: AugmentParams, size: int) -> np.ndarray:
    """Rotation about the patch center followed by the perspective
    distortion given by the corner displacements, as one forward map."""
    c = (size - 1) / 2.0
    corners = np.array([[0.0, 0.0], [size - 1.0, 0.0], [size - 1.0, size - 1.0], [0.0, size - 1.0]])
    th = np.deg2rad(params.angle_deg)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    rotated = (corners - c) @ rot.T + c
    return _homography_from_points(corners, rotated + params.corner_shift)


def augment_patch(pixels: Tensor, protocol, rng) -> tuple[Tensor, np.ndarray]:
    """Mode-dependent patch augmentation.

    patch-train: affine color jitter (contrast then brightness), then
    rotation and perspective realized as a single projective warp;
    differentiable to the pixels. Other modes: identity with an all-ones
    mask.

    ``protocol`` may also be a bare mode string.
    """
    if isinstance(protocol, str):
        augment = protocol == "patch-train"
    else:
        augment = protocol.augment
    size = pixels.shape[-1]
    if not augment:
        return pixels, np.ones((size, size), dtype=np.float32)
    params = sample_augment_params(rng, size)
    jittered = ad.shift(ad.scale(pixels, params.contrast), params.brightness)
    hom = augment_homography(params, size)
    warped, inside = ad.bilinear_warp(jittered, hom, size, size)
    return warped, inside


# ---------------------------------------------------------------------------
# placement


@dataclass(frozen=True)
class Decision:
    """One placement decision, for reproducibility audits."""

    kind: str  # box | hallucination
    box_index: int | None
    placed: bool
    skipped: bool = False
    resize_factor: float | None = None
    side: int | None = None
    top: int | None = None
    left: int | None = None

    def geometry(self) -> tuple:
        return (self.kind, self.box_index, self.placed, self.skipped, self.side, self.top, self.left)


def _scale_patch(pixels: Tensor, mask: np.ndarray, side: int) -> tuple[Tensor, np.ndarray]:
    """Resize patch and mask to side×side with one bilinear warp."""
    size = pixels.shape[-1]
    s = side / size
    hom = np.array([[s, 0.0, (s - 1) / 2.0], [0.0, s, (s - 1) / 2.0], [0.0, 0.0, 1.0]])
    scaled, inside = ad.bilinear_warp(pixels, hom, side, side)
    m = ad.bilinear_warp(Tensor(mask[None].astype(np.float32)), hom, side, side)[0].data[0]
    return scaled, m * inside


def place_patch(
    image: Tensor,
    patch_pixels: Tensor,
    mask: np.ndarray,
    box: Box,
    placement: str,
    resize_factor: float,
    rng,
    box_index: int | None = None,
) -> tuple[Tensor, Decision]:
    """Scale the patch to the box and composite it.

    The pasted side is resize_factor times the shorter box side; the
    paste origin is the box center (eval) or uniform inside the box,
    rounded to whole pixels. Boxes shorter than 2 px on a side, or whose
    scaled patch would be under 1 px, are skipped and reported.
    """
    skip = Decision(kind="box", box_index=box_index, placed=False, skipped=True)
    if box.min_side < 2.0:
        return image, skip
    side_f = resize_factor * box.min_side
    if side_f < 1.0:
        return image, skip
    side = max(1, int(round(side_f)))

    scaled, m = _scale_patch(patch_pixels, mask, side)
    if placement == "box-center":
        cx, cy = box.center
        top = int(round(cy - side / 2.0))
        left = int(round(cx - side / 2.0))
    elif placement == "random-in-box":
        left = int(round(rng.uniform(box.x_min, max(box.x_min, box.x_max - side))))
        top = int(round(rng.uniform(box.y_min, max(box.y_min, box.y_max - side))))
    else:
        raise ValueError(f"unknown placement {placement!r}")
    out = ad.composite_patch(image, scaled, m, top, left)
    return out, Decision(
        kind="box", box_index=box_index, placed=True, resize_factor=resize_factor, side=side, top=top, left=left
    )


@dataclass
class ApplicationResult:
    tensor: Tensor
    decisions: list[Decision] = field(default_factory=list)
    skip_count: int = 0

    @property
    def image(self) -> np.ndarray:
        return np.asarray(self.tensor.data, dtype=np.float32)


def apply_protocol(scene: Scene, patch: Patch, protocol: ApplicationProtocol, *, rng=None, eval_seed=None, image=None) -> ApplicationResult:
    """Apply a patch to one scene under the given protocol.

    Per target box a Bernoulli(p_box) draw decides placement (p_box is π
    in adv-train mode); afterwards a Bernoulli(p_hal) draw may add one
    hallucination at a uniform random position, sized by the protocol
    resize factor times the median target-box short side.

    Training modes take ``rng`` (a carried stream); eval mode instead
    requires ``eval_seed`` and derives an independent stream per (scene,
    box), making every decision a pure function of indices and seed.
    """
    if protocol.mode == "eval":
        if eval_seed is None:
            raise ValueError("eval-mode application requires eval_seed")
    elif rng is None:
        raise ValueError(f"{protocol.mode} application requires an rng stream")

    base = scene.image if image is None else image
    img_t = base if isinstance(base, Tensor) else Tensor(np.asarray(base, dtype=np.float32))
    pixels = patch.pixels
    decisions: list[Decision] = []
    skips = 0

    for bi, box in enumerate(scene.target_boxes):
        stream = rng_for(eval_seed, "eval-box", scene.index, bi) if protocol.mode == "eval" else rng
        if stream.random() >= protocol.p_box:
            decisions.append(Decision(kind="box", box_index=bi, placed=False))
            continue
        factor = protocol.draw_resize(stream)
        aug, mask = augment_patch(pixels, protocol, stream)
        img_t, decision = place_patch(img_t, aug, mask, box, protocol.placement, factor, stream, box_index=bi)
        skips += decision.skipped
        decisions.append(decision)

    if protocol.p_hal > 0.0 and scene.target_boxes:
        stream = rng_for(eval_seed, "eval-hal", scene.index) if protocol.mode == "eval" else rng
        if stream.random() < protocol.p_hal:
            med = float(np.median([b.min_side for b in scene.target_boxes]))
            side = int(round(protocol.hallucination_factor() * med))
            H, W = img_t.shape[-2:]
            side = min(side, H, W)
            if side >= 1:
                scaled, m = _scale_patch(pixels, np.ones((patch.size, patch.size), dtype=np.float32), side)
                top = int(stream.integers(0, H - side + 1))
                left = int(stream.integers(0, W - side + 1))
                img_t = ad.composite_patch(img_t, scaled, m, top, left)
                decisions.append(Decision(kind="hallucination", box_index=None, placed=True, side=side, top=top, left=left))
            else:
                skips += 1
                decisions.append(Decision(kind="hallucination", box_index=None, placed=False, skipped=True))
        else:
            decisions.append(Decision(kind="hallucination", box_index=None, placed=False))

    return ApplicationResult(tensor=img_t, decisions=decisions, skip_count=skips)


# ---------------------------------------------------------------------------
# losses


def patch_loss(model, scenes, patch: Patch, weights: LossWeights, protocol: ApplicationProtocol, *, seed: int) -> Tensor:
    """Combined patch objective: weighted objectness + smoothness +
    validity.

    Objectness is the mean sigmoid of the strongest pre-sigmoid
    confidence inside each target box, both heads, over all patched
    scenes (an empty box set contributes 0). Smoothness is the total
    variation of the raw patch; validity the mean squared excursion of
    its pixels outside [0,1]. Pure in all arguments: the same seed
    yields the same application randomness.
    """
    from .detector import forward, target_confidence_logits

    for p in model.parameters():
        if p.requires_grad:
            raise ValueError("patch_loss expects a frozen model (no trainable parameters)")

    patched = []
    for scene in scenes:
        stream = rng_for(seed, "loss-apply", scene.index)
        patched.append(apply_protocol(scene, patch, protocol, rng=stream))

    logits = []
    if patched:
        batch = ad.stack([r.tensor for r in patched])
        raw = forward(model, batch)
        for b, scene in enumerate(scenes):
            logits.extend(target_confidence_logits(raw, scene.target_boxes, batch_index=b))

    terms = []
    if logits:
        obj = ad.reduce_mean(ad.sigmoid(ad.stack(logits)))
        terms.append(ad.scale(obj, weights.obj))
    if weights.smooth > 0.0:
        terms.append(ad.scale(ad.total_variation(patch.pixels), weights.smooth))
    if weights.validity > 0.0:
        terms.append(ad.scale(ad.reduce_mean(ad.out_of_range_sq(patch.pixels)), weights.validity))
    if not terms:
        return ad.reduce_sum(ad.scale(patch.pixels, 0.0))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


# ---------------------------------------------------------------------------
# patch file io


def save_patch(patch: Patch, path: str | Path) -> None:
    """Exact binary copy: header then 3·S·S little-endian float32."""
    role = patch.role.encode("utf-8")
    regime = patch.regime.encode("utf-8")
    if len(role) > 255 or len(regime) > 255:
        raise ValueError("role/regime tags must fit in 255 bytes")
    with open(path, "wb") as f:
        f.write(PATCH_MAGIC)
        f.write(struct.pack("<IIii", PATCH_VERSION, patch.size, patch.order, patch.index))
        f.write(struct.pack("<B", len(role)) + role)
        f.write(struct.pack("<B", len(regime)) + regime)
        f.write(struct.pack("<Qi", patch.seed & (2**64 - 1), patch.source_model_order))
        f.write(np.ascontiguousarray(patch.pixels.data, dtype="<f4").tobytes())


def load_patch(path: str | Path) -> Patch:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != PATCH_MAGIC:
        raise ValueError(f"{path}: not a patch file (bad magic)")
    version, size, order, index = struct.unpack_from("<IIii", blob, 4)
    if version != PATCH_VERSION:
        raise ValueError(f"{path}: unsupported patch version {version}")
    off = 20
    rlen = blob[off]
    role = blob[off + 1 : off + 1 + rlen].decode("utf-8")
    off += 1 + rlen
    glen = blob[off]
    regime = blob[off + 1 : off + 1 + glen].decode("utf-8")
    off += 1 + glen
    seed, source = struct.unpack_from("<Qi", blob, off)
    off += 12
    count = 3 * size * size
    pixels = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(3, size, size)
    if off + count * 4 != len(blob):
        raise ValueError(f"{path}: trailing bytes in patch file")
    return Patch(
        pixels=Tensor(pixels.copy()),
        order=order,
        index=index,
        role=role,
        regime=regime,
        seed=seed,
        source_model_order=source,
    )


def patch_png(patch: Patch, path: str | Path) -> None:
    """Clamped 8-bit viewing copy."""
    from PIL import Image

    arr = np.round(patch.clamped() * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path)


def finalize_patch(patch: Patch, *, order: int, index: int, role: str, regime: str, seed: int, source_model_order: int) -> Patch:
    """Clamped, tagged copy of an optimized patch."""
    return replace(
        patch,
        pixels=Tensor(np.clip(patch.pixels.data, 0.0, 1.0).astype(np.float32)),
        order=order,
        index=index,
        role=role,
        regime=regime,
        seed=seed,
        source_model_order=source_model_order,
    )
