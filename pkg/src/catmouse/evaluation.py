"""Single-class COCO-style average precision and heatmap aggregation.

AP here always means AP@[.5:.95]: greedy per-image matching at each IoU
threshold in 0.50:0.05:0.95, a global precision-recall curve over all
images, 101-point interpolation, then the mean over the ten thresholds.
ΔAP = AP_grayscale − AP isolates the adversarial effect of a patch from
plain occlusion.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .detector import DetectorModel, decode, forward
from .scenes import Box, Dataset
from .util import parallel_map

# IoU thresholds 0.50:0.05:0.95, decimal-rounded so comparisons are exact
THRESHOLDS: tuple[float, ...] = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))
RECALL_GRID = np.linspace(0.0, 1.0, 101)

# decode settings for AP sweeps: low threshold so the PR tail is visible,
# the cap only bounds runtime
EVAL_CONF_THRESHOLD = 0.05
EVAL_MAX_DET = 30


def iou(a: Box, b: Box) -> float:
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def match_image(dets, gts: Sequence[Box], iou_threshold: float) -> list[bool]:
    """Greedy matching for one image; True marks a true positive.

    Detections are visited in descending score (ties by input index);
    each takes the unmatched ground truth of highest IoU, provided that
    IoU reaches the threshold. IoU ties keep the lowest GT index.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    taken = [False] * len(gts)
    flags = [False] * len(dets)
    for i in order:
        best_j, best_v = -1, 0.0
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            v = iou(dets[i].box, g)
            if v >= iou_threshold and v > best_v:
                best_j, best_v = j, v
        if best_j >= 0:
            taken[best_j] = True
            flags[i] = True
    return flags


def average_precision(dets_per_image, gts_per_image, iou_threshold: float) -> float:
    """101-point interpolated AP at one IoU threshold.

    TP/FP flags come from per-image greedy matching; the PR curve is
    global, sorted by descending score with ties broken by (image,
    detection) index. With no ground truth at all the AP is defined
    as 0.
    """
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError("detections and ground truths must cover the same images")
    n_gt = sum(len(g) for g in gts_per_image)
    rows = []
    for ii, dets in enumerate(dets_per_image):
        flags = match_image(dets, gts_per_image[ii], iou_threshold)
        for di, d in enumerate(dets):
            if not np.isfinite(d.score):
                raise ValueError(f"non-finite detection score in image {ii}")
            rows.append((-d.score, ii, di, flags[di]))
    if n_gt == 0 or not rows:
        return 0.0
    rows.sort()
    tp = np.cumsum([r[3] for r in rows])
    fp = np.cumsum([not r[3] for r in rows])
    recall = tp / n_gt
    precision = tp / (tp + fp)

    # running max from the right, then sample the recall grid
    pmax = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    sampled = np.where(idx < len(recall), pmax[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(sampled.mean())


def ap_sweep(dets_per_image, gts_per_image) -> tuple[float, ...]:
    """Per-threshold APs over IoU 0.50:0.05:0.95."""
    return tuple(average_precision(dets_per_image, gts_per_image, t) for t in THRESHOLDS)


@dataclass(frozen=True)
class APResult:
    ap: float
    per_threshold: tuple[float, ...]
    detection_count: int
    gt_count: int
    protocol: str
    eval_seed: int

    def __post_init__(self):
        if len(self.per_threshold) != len(THRESHOLDS):
            raise ValueError("expected one AP per IoU threshold")
        mean = float(np.mean(self.per_threshold))
        if abs(mean - self.ap) > 1e-12:
            raise ValueError(f"ap {self.ap} is not the mean of the per-threshold APs ({mean})")


def _protocol_descriptor(protocol) -> str:
    return (
        f"{protocol.mode}[p_box={protocol.p_box},p_hal={protocol.p_hal},"
        f"resize={protocol.describe_resize()}]"
    )


def evaluate(model: DetectorModel, dataset: Dataset, source="clean", protocol=None, eval_seed: int = 0) -> APResult:
    """AP of a model on a dataset under a patch source.

    ``source`` is ``"clean"`` (scenes untouched) or a patch whose
    application follows ``protocol`` (eval mode only). All placement
    randomness derives from ``eval_seed`` and scene/box indices, never
    from patch content, so evaluations under the same seed differ only
    in pasted pixel values.
    """
    if source == "clean":
        images = [scene.image for scene in dataset.scenes]
        desc = "clean"
    else:
        from .patches import apply_protocol

        if protocol is None:
            raise ValueError("patched evaluation needs an application protocol")
        if protocol.mode != "eval":
            raise ValueError(f"evaluate requires an eval-mode protocol, got {protocol.mode!r}")
        images = [
            apply_protocol(scene, source, protocol, eval_seed=eval_seed).image
            for scene in dataset.scenes
        ]
        desc = _protocol_descriptor(protocol)

    chunks = [list(range(i, min(i + 16, len(images)))) for i in range(0, len(images), 16)]

    def infer(chunk: list[int]):
        raw = forward(model, Tensor(np.stack([images[i] for i in chunk])))
        return [decode(raw, b, conf_threshold=EVAL_CONF_THRESHOLD, max_det=EVAL_MAX_DET) for b in range(len(chunk))]

    dets_per_image = [d for part in parallel_map(infer, chunks) for d in part]
    gts_per_image = [scene.target_boxes for scene in dataset.scenes]
    per_t = ap_sweep(dets_per_image, gts_per_image)
    return APResult(
        ap=float(np.mean(per_t)),
        per_threshold=per_t,
        detection_count=sum(len(d) for d in dets_per_image),
        gt_count=sum(len(g) for g in gts_per_image),
        protocol=desc,
        eval_seed=eval_seed,
    )


@dataclass(frozen=True)
class GrayscaleBaseline:
    mean: float
    std: float
    results: tuple[APResult, ...]


def grayscale_baseline(model: DetectorModel, dataset: Dataset, protocol, eval_seed: int = 0) -> GrayscaleBaseline:
    """Mean and std of AP under the 11 constant-gray patches."""
    from .patches import grayscale_patch

    results = tuple(
        evaluate(model, dataset, source=grayscale_patch(k, size=_gray_size(protocol)), protocol=protocol, eval_seed=eval_seed)
        for k in range(11)
    )
    aps = np.array([r.ap for r in results])
    return GrayscaleBaseline(mean=float(aps.mean()), std=float(aps.std()), results=results)


def _gray_size(protocol) -> int:
    # any valid side works: placement rescales to the box; keep it small
    return 8


# ---------------------------------------------------------------------------
# evaluation ledger and heatmap


CSV_HEADER = "run_id,model_order,patch_order,patch_index,source,resize_factor,ap," + ",".join(
    f"ap{int(round(t * 100))}" for t in THRESHOLDS
)


@dataclass(frozen=True)
class EvalRecord:
    """One ledger row: a single (model, patch source) AP measurement."""

    run_id: str
    model_order: int
    source: str  # clean | grayscale-<k> | patch-train | patch-validation
    ap: float
    per_threshold: tuple[float, ...]
    patch_order: int | None = None
    patch_index: int | None = None
    resize_factor: float | None = None

    def csv_row(self) -> str:
        def cell(v):
            if v is None:
                return ""
            if isinstance(v, float):
                return repr(v)
            return str(v)

        cells = [
            self.run_id,
            str(self.model_order),
            cell(self.patch_order),
            cell(self.patch_index),
            self.source,
            cell(self.resize_factor),
            repr(float(self.ap)),
        ] + [repr(float(t)) for t in self.per_threshold]
        return ",".join(cells)


@dataclass
class EvalLedger:
    records: list[EvalRecord] = field(default_factory=list)

    def add(self, rec: EvalRecord) -> None:
        self.records.append(rec)

    def to_csv(self) -> str:
        lines = [CSV_HEADER] + [r.csv_row() for r in self.records]
        return "\n".join(lines) + "\n"

    def to_json(self) -> list[dict]:
        out = []
        for r in self.records:
            out.append(
                {
                    "run_id": r.run_id,
                    "model_order": r.model_order,
                    "patch_order": r.patch_order,
                    "patch_index": r.patch_index,
                    "source": r.source,
                    "resize_factor": r.resize_factor,
                    "ap": r.ap,
                    "per_threshold": list(r.per_threshold),
                }
            )
        return out

    @staticmethod
    def from_json(rows: list[dict]) -> "EvalLedger":
        led = EvalLedger()
        for row in rows:
            led.add(
                EvalRecord(
                    run_id=row["run_id"],
                    model_order=row["model_order"],
                    patch_order=row["patch_order"],
                    patch_index=row["patch_index"],
                    source=row["source"],
                    resize_factor=row["resize_factor"],
                    ap=row["ap"],
                    per_threshold=tuple(row["per_threshold"]),
                )
            )
        return led


@dataclass
class HeatmapMatrix:
    """ΔAP grid: rows are model orders 0..N, columns patch orders 1..N.

    ``delta[m, p]`` is the mean ΔAP of the validation patches of order
    p+1 against the model of order m; ``cell_std`` the matching std.
    μ vectors are plain arithmetic means of rows/columns.
    """

    delta: np.ndarray
    cell_std: np.ndarray
    row_mu: np.ndarray
    col_mu: np.ndarray
    model_orders: list[int]
    patch_orders: list[int]
    grayscale_mean: dict[int, float]

    def validate(self) -> None:
        if self.delta.shape != (len(self.model_orders), len(self.patch_orders)):
            raise ValueError("heatmap shape does not match its axis labels")
        if not np.allclose(self.row_mu, self.delta.mean(axis=1), atol=1e-12, rtol=0.0):
            raise ValueError("row μ is not the arithmetic row mean")
        if not np.allclose(self.col_mu, self.delta.mean(axis=0), atol=1e-12, rtol=0.0):
            raise ValueError("column μ is not the arithmetic column mean")


def build_heatmap(ledger: EvalLedger | Sequence[EvalRecord]) -> HeatmapMatrix:
    """Aggregate a complete game ledger into the ΔAP matrix.

    Requires 11 grayscale rows per model order and a full set of
    validation-patch rows for every (model order, patch order) cell;
    anything missing is reported by name.
    """
    records = ledger.records if isinstance(ledger, EvalLedger) else list(ledger)
    gray: dict[int, list[float]] = {}
    cells: dict[tuple[int, int], dict[int, float]] = {}
    for r in records:
        if r.source.startswith("grayscale-"):
            gray.setdefault(r.model_order, []).append(r.ap)
        elif r.source == "patch-validation":
            cells.setdefault((r.model_order, r.patch_order), {})[r.patch_index] = r.ap

    if not gray:
        raise ValueError("ledger has no grayscale baseline rows")
    if not cells:
        raise ValueError("ledger has no validation-patch rows")
    model_orders = sorted(gray)
    patch_orders = sorted({p for _, p in cells})

    problems = []
    for m in model_orders:
        if len(gray[m]) != 11:
            problems.append(f"model {m}: {len(gray[m])} grayscale rows (want 11)")
    indices = sorted({i for c in cells.values() for i in c})
    for m in model_orders:
        for p in patch_orders:
            got = cells.get((m, p), {})
            missing = [i for i in indices if i not in got]
            if missing:
                problems.append(f"cell (model {m}, patch order {p}): missing validation indices {missing}")
    if problems:
        raise ValueError("incomplete ledger: " + "; ".join(problems))

    gray_mean = {m: float(np.mean(gray[m])) for m in model_orders}
    delta = np.zeros((len(model_orders), len(patch_orders)))
    cstd = np.zeros_like(delta)
    for a, m in enumerate(model_orders):
        for b, p in enumerate(patch_orders):
            daps = np.array([gray_mean[m] - cells[(m, p)][i] for i in indices])
            delta[a, b] = daps.mean()
            cstd[a, b] = daps.std()
    mat = HeatmapMatrix(
        delta=delta,
        cell_std=cstd,
        row_mu=delta.mean(axis=1),
        col_mu=delta.mean(axis=0),
        model_orders=model_orders,
        patch_orders=patch_orders,
        grayscale_mean=gray_mean,
    )
    mat.validate()
    return mat
