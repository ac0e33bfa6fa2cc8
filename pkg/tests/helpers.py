"""Shared test oracles.

The gradient checker runs everything in float64 and compares reverse-mode
gradients against central finite differences, elementwise. The AP
reference enumerates prefixes of the ranked detection list directly, so
it is slow and obviously correct.
"""

from __future__ import annotations

import numpy as np

from catmouse import autodiff as ad
from catmouse.autodiff import Tape, Tensor
from catmouse.evaluation import RECALL_GRID


def rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def gradcheck(build, params, *, eps: float = 1e-6, tol: float = 1e-4, max_entries: int = 64, rng=None):
    """Compare tape gradients of a scalar loss against central differences.

    ``build()`` must construct the loss from ``params`` from scratch on
    every call (it runs once under a tape and 2 per probed entry without
    one). Parameters larger than ``max_entries`` are spot-checked at
    random entries. Asserts ``|a - n| <= tol * max(|a|, |n|, 1)``.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        assert p.data.dtype == np.float64, "gradcheck needs float64 parameters"
        p.requires_grad = True
        p.zero_grad()

    with Tape() as tape:
        loss = build()
        assert loss.shape == (), f"gradcheck loss must be scalar, got {loss.shape}"
        tape.backward(loss)
    analytic = [np.array(p.grad, dtype=np.float64) for p in params]

    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        n_entries = flat.size
        if n_entries <= max_entries:
            entries = range(n_entries)
        else:
            entries = sorted(rng.choice(n_entries, size=max_entries, replace=False).tolist())
        for i in entries:
            orig = flat[i]
            flat[i] = orig + eps
            up = build().item()
            flat[i] = orig - eps
            down = build().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            got = a.reshape(-1)[i]
            err = abs(got - numeric) / max(abs(got), abs(numeric), 1.0)
            assert err <= tol, (
                f"gradient mismatch at param shape {p.data.shape} entry {i}: "
                f"analytic {got!r} vs numeric {numeric!r} (rel err {err:.3e}, tol {tol:.1e})"
            )
        p.zero_grad()


def away_from(values: np.ndarray, kinks, margin: float = 1e-3) -> np.ndarray:
    """Push entries at least ``margin`` away from the given kink points so
    finite differences never straddle a non-smooth point."""
    out = np.array(values, dtype=np.float64)
    for k in np.atleast_1d(kinks):
        near = np.abs(out - k) < margin
        out[near] = k + np.where(out[near] >= k, margin, -margin) * 2.0
    return out


def brute_force_iou(a, b) -> float:
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    area_a = (a.x_max - a.x_min) * (a.y_max - a.y_min)
    area_b = (b.x_max - b.x_min) * (b.y_max - b.y_min)
    return ix * iy / (area_a + area_b - ix * iy)


def brute_force_match(dets, gts, iou_threshold: float) -> list[bool]:
    """Independent greedy matcher: detections by descending score (ties
    by rank), each claims its best still-free ground truth at or above
    the threshold, IoU ties going to the earliest ground truth."""
    flags = [False] * len(dets)
    free = list(range(len(gts)))
    for i in sorted(range(len(dets)), key=lambda i: (-dets[i].score, i)):
        best, best_v = None, 0.0
        for j in free:
            v = brute_force_iou(dets[i].box, gts[j])
            if v >= iou_threshold and v > best_v:
                best, best_v = j, v
        if best is not None:
            free.remove(best)
            flags[i] = True
    return flags


def brute_force_ap(dets_per_image, gts_per_image, iou_threshold: float) -> float:
    """Reference 101-point AP by explicit prefix enumeration.

    Matches greedily per image with its own matcher, then walks every
    prefix of the globally ranked detection list to build the PR points,
    takes the best precision at or beyond each recall level, and
    averages that over the fixed recall grid.
    """
    flags = []
    for di, (dets, gts) in enumerate(zip(dets_per_image, gts_per_image)):
        matched = brute_force_match(dets, gts, iou_threshold)
        for rank, (det, ok) in enumerate(zip(dets, matched)):
            flags.append((-det.score, di, rank, ok))
    total_gt = sum(len(g) for g in gts_per_image)
    if total_gt == 0:
        return 0.0
    flags.sort()
    precisions, recalls = [], []
    tp = 0
    for i, (_, _, _, ok) in enumerate(flags, start=1):
        if ok:
            tp += 1
        precisions.append(tp / i)
        recalls.append(tp / total_gt)
    out = 0.0
    for r in RECALL_GRID:
        best = 0.0
        for p, rec in zip(precisions, recalls):
            if rec >= r and p > best:
                best = p
        out += best
    return out / len(RECALL_GRID)
