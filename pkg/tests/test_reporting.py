"""Report emission: deterministic SVG figures plus the CSV ledger.

The SVG assertions lean on the stable ``gid`` markers each cell and bar
is tagged with, not on matplotlib layout internals.
"""

import json
import xml.etree.ElementTree as ET

import pytest

from catmouse.evaluation import EvalLedger, EvalRecord, build_heatmap
from catmouse.game import LEDGER_CSV, LEDGER_JSON, TRANSFER_JSON, TransferResult, save_transfer
from catmouse.reporting import _shade, emit_heatmap_svg, emit_transfer_svg, write_report


def _rec(model=0, source="clean", ap=0.5, order=None, index=None):
    return EvalRecord(
        run_id="run-x",
        model_order=model,
        source=source,
        ap=ap,
        per_threshold=tuple([ap] * 10),
        patch_order=order,
        patch_index=index,
        resize_factor=0.5 if order is not None else None,
    )


def _ledger():
    led = EvalLedger()
    for m, gray in ((0, 0.8), (1, 0.75)):
        for k in range(11):
            led.add(_rec(model=m, source=f"grayscale-{k}", ap=gray))
    cells = {(0, 1): [0.5, 0.6], (0, 2): [0.7, 0.72], (1, 1): [0.7, 0.66], (1, 2): [0.71, 0.69]}
    for (m, p), aps in cells.items():
        for i, ap in enumerate(aps):
            led.add(_rec(model=m, source="patch-validation", ap=ap, order=p, index=i))
    return led


def _transfer():
    return TransferResult(
        run_id="run-x",
        eval_seed=17,
        patch_orders=[1, 2],
        member_names=["base-0", "wide-1"],
        member_clean=[0.85, 0.8],
        member_gray_mean=[0.8, 0.7],
        member_gray_std=[0.01, 0.02],
        ap={1: [[0.5, 0.6], [0.7, 0.8]], 2: [[0.75, 0.75], [0.7, 0.7]]},
    )


# ---------------------------------------------------------------------------
# shading


def test_shade_monotone_and_bounded():
    lo, hi = 0.0, 0.4
    top = _shade(lo, lo, hi)
    bottom = _shade(hi, lo, hi)
    mid = _shade(0.2, lo, hi)
    assert top == pytest.approx(0.93)
    assert bottom == pytest.approx(0.25)
    assert bottom < mid < top
    # out-of-range values clamp instead of wrapping
    assert _shade(-1.0, lo, hi) == top
    assert _shade(9.0, lo, hi) == bottom
    # degenerate range falls back to the midpoint shade
    assert _shade(0.3, 0.3, 0.3) == pytest.approx(0.93 - 0.68 * 0.5)


# ---------------------------------------------------------------------------
# transfer aggregation (rendered values)


def test_transfer_result_statistics():
    t = _transfer()
    assert t.member_means(1) == [0.55, 0.75]
    assert t.mean_ap[1] == pytest.approx(0.65)
    assert t.std_ap[1] == pytest.approx(0.1)
    assert t.std_ap[2] == pytest.approx(0.025)
    # per-member gray baseline minus per-member mean, then averaged
    assert t.delta_mean[1] == pytest.approx(((0.8 - 0.55) + (0.7 - 0.75)) / 2)


def test_transfer_json_roundtrip(tmp_path):
    t = _transfer()
    save_transfer(t, tmp_path / "t.json")
    from catmouse.game import load_transfer

    back = load_transfer(tmp_path / "t.json")
    assert back == t
    assert all(isinstance(p, int) for p in back.ap)  # keys restored as ints


# ---------------------------------------------------------------------------
# figures


def test_heatmap_svg_structure(tmp_path):
    mat = build_heatmap(_ledger())
    out = emit_heatmap_svg(mat, tmp_path / "heatmap.svg")
    text = out.read_text(encoding="utf-8")
    ET.fromstring(text)  # well-formed XML
    for gid in ("cell-m0-p1", "cell-m1-p2", "mu-rowmean-m0", "mu-rowmean-m1", "mu-colmean-p1", "mu-colmean-p2"):
        assert f'id="{gid}"' in text
    # numeric cell labels with three decimals: delta (0,1) and (0,2)
    assert "0.250" in text
    assert "0.090" in text
    # mu labels: row means 0.17/0.06, column means 0.16/0.07
    assert "0.170" in text and "0.160" in text


def test_heatmap_svg_bytes_deterministic(tmp_path):
    mat = build_heatmap(_ledger())
    a = emit_heatmap_svg(mat, tmp_path / "a.svg").read_bytes()
    b = emit_heatmap_svg(mat, tmp_path / "b.svg").read_bytes()
    assert a == b


def test_heatmap_svg_shade_tracks_delta(tmp_path):
    mat = build_heatmap(_ledger())
    text = emit_heatmap_svg(mat, tmp_path / "h.svg").read_text(encoding="utf-8")
    root = ET.fromstring(text)
    ns = {"svg": "http://www.w3.org/2000/svg"}

    def fill_of(gid):
        el = root.find(f".//*[@id='{gid}']", ns)
        assert el is not None, gid
        path = el.find(".//svg:path", ns)
        style = path.get("style", "") + ";" + (el.get("style") or "")
        for part in style.split(";"):
            if part.strip().startswith("fill:"):
                return part.split(":")[1].strip()
        raise AssertionError(f"no fill on {gid}")

    # model 0 / patch 1 has the largest delta -> darkest cell
    strongest = fill_of("cell-m0-p1")
    weakest = fill_of("cell-m1-p2")
    assert strongest != weakest


def test_transfer_svg_structure(tmp_path):
    out = emit_transfer_svg(_transfer(), tmp_path / "t.svg")
    text = out.read_text(encoding="utf-8")
    ET.fromstring(text)
    for gid in ("bar-p1", "bar-p2", "ref-clean", "ref-grayscale"):
        assert f'id="{gid}"' in text
    assert "0.650" in text  # order-1 bar label
    a = emit_transfer_svg(_transfer(), tmp_path / "t2.svg").read_bytes()
    assert a == out.read_bytes()


# ---------------------------------------------------------------------------
# report path


def test_write_report_outputs(tmp_path):
    led = _ledger()
    run = tmp_path / "run"
    run.mkdir()
    (run / LEDGER_JSON).write_text(json.dumps(led.to_json()), encoding="utf-8")

    written = write_report(run)
    names = {p.name for p in written}
    assert names == {LEDGER_CSV, "heatmap.svg"}
    assert (run / LEDGER_CSV).read_text(encoding="utf-8") == led.to_csv()

    # with transfer results the bar chart joins the output
    save_transfer(_transfer(), run / TRANSFER_JSON)
    written = write_report(run)
    assert {p.name for p in written} == {LEDGER_CSV, "heatmap.svg", "transfer.svg"}


def test_write_report_to_out_dir(tmp_path):
    run = tmp_path / "run"
    run.mkdir()
    (run / LEDGER_JSON).write_text(json.dumps(_ledger().to_json()), encoding="utf-8")
    out = tmp_path / "figures"
    written = write_report(run, out)
    assert all(p.parent == out for p in written)
    assert (out / "heatmap.svg").exists()


def test_write_report_missing_ledger(tmp_path):
    run = tmp_path / "empty"
    run.mkdir()
    with pytest.raises(FileNotFoundError, match="ledger"):
        write_report(run)
