"""AP computation against a brute-force reference, plus ledger and
heatmap aggregation.

The large randomized sweep draws scores from a coarse lattice and boxes
on integer coordinates so that score ties, IoU ties, and exact-threshold
hits all occur often enough to matter.
"""

from collections import namedtuple

import numpy as np
import pytest

from catmouse.detector import build_detector
from catmouse.evaluation import (
    CSV_HEADER,
    THRESHOLDS,
    APResult,
    EvalLedger,
    EvalRecord,
    HeatmapMatrix,
    ap_sweep,
    average_precision,
    build_heatmap,
    evaluate,
    grayscale_baseline,
    iou,
    match_image,
)
from catmouse.patches import ApplicationProtocol, grayscale_patch
from catmouse.scenes import Box, DatasetSpec, generate_dataset
from helpers import brute_force_ap

Det = namedtuple("Det", ["box", "score"])


# ---------------------------------------------------------------------------
# iou


def test_iou_identical_boxes():
    b = Box(2.0, 3.0, 10.0, 12.0)
    assert iou(b, b) == 1.0


def test_iou_disjoint_and_touching():
    a = Box(0.0, 0.0, 4.0, 4.0)
    assert iou(a, Box(10.0, 10.0, 14.0, 14.0)) == 0.0
    # shared edge has zero intersection area
    assert iou(a, Box(4.0, 0.0, 8.0, 4.0)) == 0.0


def test_iou_hand_value():
    # 2x2 squares offset by 1: intersection 2, union 6
    v = iou(Box(0.0, 0.0, 2.0, 2.0), Box(1.0, 0.0, 3.0, 2.0))
    assert abs(v - 2.0 / 6.0) < 1e-15


def test_iou_symmetry_and_containment():
    a = Box(0.0, 0.0, 8.0, 6.0)
    b = Box(2.0, 1.0, 5.0, 4.0)
    assert iou(a, b) == iou(b, a)
    # contained box: intersection = inner area, union = outer area
    assert abs(iou(a, b) - (3.0 * 3.0) / (8.0 * 6.0)) < 1e-15


# ---------------------------------------------------------------------------
# greedy matching


def test_match_visits_by_score_then_index():
    gt = [Box(0.0, 0.0, 10.0, 10.0)]
    dets = [
        Det(Box(0.0, 0.0, 10.0, 10.0), 0.3),
        Det(Box(0.0, 0.0, 10.0, 10.0), 0.9),
    ]
    # the higher-scoring detection claims the box even though it comes second
    assert match_image(dets, gt, 0.5) == [False, True]


def test_match_score_tie_prefers_lower_index():
    gt = [Box(0.0, 0.0, 10.0, 10.0)]
    dets = [
        Det(Box(0.0, 0.0, 10.0, 10.0), 0.7),
        Det(Box(0.0, 0.0, 10.0, 10.0), 0.7),
    ]
    assert match_image(dets, gt, 0.5) == [True, False]


def test_match_each_gt_claimed_once():
    gt = [Box(0.0, 0.0, 10.0, 10.0), Box(20.0, 20.0, 30.0, 30.0)]
    dets = [
        Det(Box(0.0, 0.0, 10.0, 10.0), 0.9),
        Det(Box(1.0, 0.0, 11.0, 10.0), 0.8),  # overlaps the taken box only
        Det(Box(20.0, 20.0, 30.0, 30.0), 0.7),
    ]
    assert match_image(dets, gt, 0.5) == [True, False, True]


def test_match_iou_tie_takes_earliest_gt():
    # detection overlaps both ground truths with identical IoU
    gt = [Box(0.0, 0.0, 10.0, 5.0), Box(0.0, 5.0, 10.0, 10.0)]
    det = Det(Box(0.0, 0.0, 10.0, 10.0), 0.9)
    flags = match_image([det, Det(Box(0.0, 0.0, 10.0, 5.0), 0.5)], gt, 0.4)
    # first det takes gt 0 (tie broken to the earliest), second then
    # cannot take it again but fails the threshold against gt 1
    assert flags[0] is True


def test_match_threshold_boundary_inclusive():
    # IoU exactly 0.5: boxes (0,0,2,1) and (0,0,1,1) share area 1 of union 2
    gt = [Box(0.0, 0.0, 1.0, 1.0)]
    det = Det(Box(0.0, 0.0, 2.0, 1.0), 0.8)
    assert match_image([det], gt, 0.5) == [True]
    assert match_image([det], gt, 0.55) == [False]


def test_match_greedy_is_not_optimal():
    """The high scorer takes the best-IoU box even when a later detection
    could have used it better; documented behavior, same as pycocotools."""
    gt_a = Box(0.0, 0.0, 10.0, 10.0)
    gt_b = Box(8.0, 0.0, 18.0, 10.0)
    d1 = Det(Box(1.0, 0.0, 11.0, 10.0), 0.9)  # prefers A slightly over B
    d2 = Det(Box(0.0, 0.0, 10.0, 10.0), 0.8)  # only matches A
    flags = match_image([d1, d2], [gt_a, gt_b], 0.5)
    assert flags == [True, False]


# ---------------------------------------------------------------------------
# average precision, hand-built cases


def _one(dets, gts, t=0.5):
    return average_precision([dets], [gts], t)


def test_ap_single_perfect_detection():
    gt = Box(0.0, 0.0, 10.0, 10.0)
    assert _one([Det(gt, 0.9)], [gt]) == 1.0


def test_ap_fp_below_tp_does_not_hurt():
    # precision regains 1.0 at every sampled recall level
    gt = Box(0.0, 0.0, 10.0, 10.0)
    dets = [Det(gt, 0.9), Det(Box(30.0, 30.0, 40.0, 40.0), 0.5)]
    assert _one(dets, [gt]) == 1.0


def test_ap_fp_above_tp_halves_precision():
    gt = Box(0.0, 0.0, 10.0, 10.0)
    dets = [Det(Box(30.0, 30.0, 40.0, 40.0), 0.95), Det(gt, 0.5)]
    assert abs(_one(dets, [gt]) - 0.5) < 1e-12


def test_ap_half_recall():
    # one of two boxes found: precision 1 up to recall 0.5, nothing beyond
    gts = [Box(0.0, 0.0, 10.0, 10.0), Box(20.0, 20.0, 30.0, 30.0)]
    dets = [Det(gts[0], 0.9)]
    assert abs(_one(dets, gts) - 51.0 / 101.0) < 1e-12


def test_ap_tp_fp_tp_sequence():
    # ranked TP, FP, TP over two ground truths: PR points (0.5, 1),
    # (0.5, 1/2), (1.0, 2/3); envelope 1 then 2/3
    gts = [Box(0.0, 0.0, 10.0, 10.0), Box(20.0, 20.0, 30.0, 30.0)]
    dets = [
        Det(gts[0], 0.9),
        Det(Box(40.0, 40.0, 50.0, 50.0), 0.8),
        Det(gts[1], 0.7),
    ]
    want = (51.0 + 50.0 * (2.0 / 3.0)) / 101.0
    got = _one(dets, gts)
    assert abs(got - want) < 1e-12
    assert abs(got - brute_force_ap([dets], [gts], 0.5)) < 1e-12


def test_ap_no_gt_is_zero():
    dets = [Det(Box(0.0, 0.0, 10.0, 10.0), 0.9)]
    assert average_precision([dets], [[]], 0.5) == 0.0


def test_ap_no_detections_is_zero():
    assert average_precision([[]], [[Box(0.0, 0.0, 10.0, 10.0)]], 0.5) == 0.0


def test_ap_rejects_nonfinite_scores():
    gt = Box(0.0, 0.0, 10.0, 10.0)
    with pytest.raises(ValueError, match="non-finite"):
        average_precision([[Det(gt, float("nan"))]], [[gt]], 0.5)


def test_ap_rejects_mismatched_image_counts():
    with pytest.raises(ValueError, match="same images"):
        average_precision([[]], [[], []], 0.5)


def test_ap_cross_image_ranking():
    # a confident FP in one image outranks a shy TP in another; the
    # global PR curve must interleave them
    gt0 = Box(0.0, 0.0, 10.0, 10.0)
    dets0 = [Det(gt0, 0.4)]
    dets1 = [Det(Box(5.0, 5.0, 15.0, 15.0), 0.9)]
    got = average_precision([dets0, dets1], [[gt0], []], 0.5)
    # PR points: (0, 0) then (1, 1/2); envelope 0.5 everywhere
    assert abs(got - 0.5) < 1e-12


# ---------------------------------------------------------------------------
# randomized oracle sweep


def _random_instance(rng):
    n_img = int(rng.integers(1, 6))
    dets_per, gts_per = [], []
    for _ in range(n_img):
        gts = []
        for _ in range(int(rng.integers(0, 5))):
            x0 = float(rng.integers(0, 8))
            y0 = float(rng.integers(0, 8))
            gts.append(Box(x0, y0, x0 + float(rng.integers(1, 9)), y0 + float(rng.integers(1, 9))))
        dets = []
        for _ in range(int(rng.integers(0, 6))):
            x0 = float(rng.integers(0, 8))
            y0 = float(rng.integers(0, 8))
            box = Box(x0, y0, x0 + float(rng.integers(1, 9)), y0 + float(rng.integers(1, 9)))
            dets.append(Det(box, float(rng.integers(0, 6)) / 5.0))
        dets_per.append(dets)
        gts_per.append(gts)
    return dets_per, gts_per


def test_ap_matches_brute_force_on_500_instances():
    rng = np.random.default_rng(20260822)
    for _ in range(500):
        dets_per, gts_per = _random_instance(rng)
        t = float(THRESHOLDS[int(rng.integers(0, len(THRESHOLDS)))])
        for threshold in (0.5, t):
            got = average_precision(dets_per, gts_per, threshold)
            want = brute_force_ap(dets_per, gts_per, threshold)
            assert abs(got - want) <= 1e-9, (
                f"AP mismatch at threshold {threshold}: {got!r} vs {want!r}"
            )


def test_ap_sweep_composition():
    rng = np.random.default_rng(7)
    dets_per, gts_per = _random_instance(rng)
    sweep = ap_sweep(dets_per, gts_per)
    assert len(sweep) == 10
    for t, v in zip(THRESHOLDS, sweep):
        assert v == average_precision(dets_per, gts_per, t)
    # monotone thresholds can only make matching harder
    assert all(a >= b - 1e-12 for a, b in zip(sweep, sweep[1:]))


# ---------------------------------------------------------------------------
# APResult


def test_apresult_validates_mean():
    per = tuple([0.5] * 10)
    APResult(ap=0.5, per_threshold=per, detection_count=1, gt_count=1, protocol="clean", eval_seed=0)
    with pytest.raises(ValueError, match="mean"):
        APResult(ap=0.6, per_threshold=per, detection_count=1, gt_count=1, protocol="clean", eval_seed=0)
    with pytest.raises(ValueError, match="per IoU threshold"):
        APResult(ap=0.5, per_threshold=(0.5,), detection_count=1, gt_count=1, protocol="clean", eval_seed=0)


# ---------------------------------------------------------------------------
# evaluate on a model


@pytest.fixture(scope="module")
def tiny_setup():
    model = build_detector("tiny", 32, seed=11)
    model.set_trainable(False)
    spec = DatasetSpec.for_family("eval", seed=21, image_size=32)
    dataset = generate_dataset(spec, 6)
    return model, dataset


def test_evaluate_clean_structure(tiny_setup):
    model, dataset = tiny_setup
    res = evaluate(model, dataset, source="clean", eval_seed=3)
    assert res.protocol == "clean"
    assert res.gt_count == sum(len(s.target_boxes) for s in dataset.scenes)
    assert res.detection_count >= 0
    assert 0.0 <= res.ap <= 1.0
    again = evaluate(model, dataset, source="clean", eval_seed=3)
    assert again == res


def test_evaluate_untrained_model_near_zero(tiny_setup):
    model, dataset = tiny_setup
    res = evaluate(model, dataset, source="clean")
    assert res.ap < 0.05


def test_evaluate_patched_needs_eval_protocol(tiny_setup):
    model, dataset = tiny_setup
    patch = grayscale_patch(5)
    with pytest.raises(ValueError, match="protocol"):
        evaluate(model, dataset, source=patch)
    train_proto = ApplicationProtocol.for_mode("patch-train")
    with pytest.raises(ValueError, match="eval-mode"):
        evaluate(model, dataset, source=patch, protocol=train_proto)


def test_evaluate_patched_deterministic(tiny_setup):
    model, dataset = tiny_setup
    proto = ApplicationProtocol.for_mode("eval")
    a = evaluate(model, dataset, source=grayscale_patch(2), protocol=proto, eval_seed=9)
    b = evaluate(model, dataset, source=grayscale_patch(2), protocol=proto, eval_seed=9)
    assert a == b
    assert "eval[" in a.protocol


def test_grayscale_baseline_shape(tiny_setup):
    model, dataset = tiny_setup
    proto = ApplicationProtocol.for_mode("eval")
    base = grayscale_baseline(model, dataset, proto, eval_seed=4)
    assert len(base.results) == 11
    aps = np.array([r.ap for r in base.results])
    assert abs(base.mean - aps.mean()) < 1e-12
    assert abs(base.std - aps.std()) < 1e-12
    assert aps.min() - 1e-12 <= base.mean <= aps.max() + 1e-12


# ---------------------------------------------------------------------------
# ledger


def _rec(run="r0", model=0, source="clean", ap=0.5, order=None, index=None, factor=None):
    return EvalRecord(
        run_id=run,
        model_order=model,
        source=source,
        ap=ap,
        per_threshold=tuple([ap] * 10),
        patch_order=order,
        patch_index=index,
        resize_factor=factor,
    )


def test_csv_row_formats_missing_fields_empty():
    row = _rec().csv_row()
    cells = row.split(",")
    assert len(cells) == len(CSV_HEADER.split(","))
    assert cells[0] == "r0"
    assert cells[2] == "" and cells[3] == "" and cells[5] == ""
    assert cells[6] == "0.5"


def test_csv_row_full_fields():
    row = _rec(source="patch-validation", order=2, index=1, factor=0.5).csv_row()
    cells = row.split(",")
    assert cells[1:6] == ["0", "2", "1", "patch-validation", "0.5"]


def test_ledger_csv_layout():
    led = EvalLedger()
    led.add(_rec())
    led.add(_rec(source="grayscale-3", ap=0.25))
    text = led.to_csv()
    lines = text.split("\n")
    assert lines[0] == CSV_HEADER
    assert len(lines) == 4 and lines[-1] == ""
    assert text.endswith("\n")


def test_ledger_json_roundtrip():
    led = EvalLedger()
    led.add(_rec(source="patch-validation", order=1, index=0, factor=0.5, ap=0.375))
    led.add(_rec(source="grayscale-0", ap=0.625))
    back = EvalLedger.from_json(led.to_json())
    assert back == led


# ---------------------------------------------------------------------------
# heatmap aggregation


def _game_ledger(gray_ap, cell_aps):
    """gray_ap: {model_order: ap}; cell_aps: {(m, p): [per-index aps]}."""
    led = EvalLedger()
    for m, ap in gray_ap.items():
        for k in range(11):
            led.add(_rec(model=m, source=f"grayscale-{k}", ap=ap))
    for (m, p), aps in cell_aps.items():
        for i, ap in enumerate(aps):
            led.add(_rec(model=m, source="patch-validation", order=p, index=i, ap=ap))
    return led


def test_heatmap_hand_values():
    led = _game_ledger(
        {0: 0.8, 1: 0.7},
        {
            (0, 1): [0.5, 0.6],
            (0, 2): [0.7, 0.7],
            (1, 1): [0.65, 0.55],
            (1, 2): [0.6, 0.7],
        },
    )
    mat = build_heatmap(led)
    assert mat.model_orders == [0, 1] and mat.patch_orders == [1, 2]
    want = np.array([[0.25, 0.10], [0.10, 0.05]])
    assert np.allclose(mat.delta, want, atol=1e-12)
    assert np.allclose(mat.row_mu, [0.175, 0.075], atol=1e-12)
    assert np.allclose(mat.col_mu, [0.175, 0.075], atol=1e-12)
    assert np.allclose(mat.cell_std, [[0.05, 0.0], [0.05, 0.05]], atol=1e-12)
    assert mat.grayscale_mean.keys() == {0, 1}
    assert mat.grayscale_mean[0] == pytest.approx(0.8, abs=1e-12)
    assert mat.grayscale_mean[1] == pytest.approx(0.7, abs=1e-12)


def test_heatmap_gray_levels_averaged():
    # unequal gray levels: baseline is their arithmetic mean
    led = EvalLedger()
    for k in range(11):
        led.add(_rec(model=0, source=f"grayscale-{k}", ap=k / 10.0))
    led.add(_rec(model=0, source="patch-validation", order=1, index=0, ap=0.2))
    mat = build_heatmap(led)
    assert abs(mat.grayscale_mean[0] - 0.5) < 1e-12
    assert abs(mat.delta[0, 0] - 0.3) < 1e-12


def test_heatmap_ignores_unrelated_rows():
    led = _game_ledger({0: 0.8}, {(0, 1): [0.6]})
    led.add(_rec(model=0, source="clean", ap=0.9))
    led.add(_rec(model=0, source="patch-train", order=1, index=0, ap=0.1))
    mat = build_heatmap(led)
    assert mat.delta.shape == (1, 1)
    assert abs(mat.delta[0, 0] - 0.2) < 1e-12


def test_heatmap_missing_gray_level_reported():
    led = _game_ledger({0: 0.8}, {(0, 1): [0.6]})
    led.records = [r for r in led.records if r.source != "grayscale-7"]
    with pytest.raises(ValueError, match="grayscale rows"):
        build_heatmap(led)


def test_heatmap_missing_validation_index_reported():
    led = _game_ledger(
        {0: 0.8, 1: 0.7},
        {(0, 1): [0.6, 0.5], (1, 1): [0.6]},
    )
    with pytest.raises(ValueError, match=r"model 1, patch order 1.*missing validation indices \[1\]"):
        build_heatmap(led)


def test_heatmap_empty_ledger_errors():
    with pytest.raises(ValueError, match="no grayscale"):
        build_heatmap(EvalLedger())
    led = EvalLedger()
    led.add(_rec(model=0, source="grayscale-0", ap=0.5))
    with pytest.raises(ValueError, match="no validation-patch"):
        build_heatmap(led)


def test_heatmap_validate_catches_tampering():
    led = _game_ledger({0: 0.8}, {(0, 1): [0.6]})
    mat = build_heatmap(led)
    bad = HeatmapMatrix(
        delta=mat.delta,
        cell_std=mat.cell_std,
        row_mu=mat.row_mu + 0.01,
        col_mu=mat.col_mu,
        model_orders=mat.model_orders,
        patch_orders=mat.patch_orders,
        grayscale_mean=mat.grayscale_mean,
    )
    with pytest.raises(ValueError, match="row"):
        bad.validate()
    short = HeatmapMatrix(
        delta=mat.delta[:, :0],
        cell_std=mat.cell_std,
        row_mu=mat.row_mu,
        col_mu=mat.col_mu,
        model_orders=mat.model_orders,
        patch_orders=mat.patch_orders,
        grayscale_mean=mat.grayscale_mean,
    )
    with pytest.raises(ValueError, match="shape"):
        short.validate()
