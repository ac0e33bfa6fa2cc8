"""Figure and report emission.

Renders the ΔAP heatmap and the transfer bar chart as static SVG and
writes the ledger CSV next to them. Rendering is deterministic: a fixed
hash salt, no embedded creation date, and text kept as text elements,
so re-running a report never changes a byte.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from matplotlib import rc_context
from matplotlib.figure import Figure
from matplotlib.patches import Rectangle

from .evaluation import EvalLedger, HeatmapMatrix, build_heatmap
from .game import LEDGER_CSV, LEDGER_JSON, TRANSFER_JSON, TransferResult, load_transfer

_SVG_RC = {
    "svg.fonttype": "none",
    "svg.hashsalt": "catmouse",
    "font.family": "DejaVu Sans",
    "font.size": 10.0,
}

_CELL = 1.0
_GAP = 0.35  # separation between the data block and the mu row/column


def _shade(value: float, lo: float, hi: float) -> float:
    """Gray level for a ΔAP cell, monotone decreasing (darker = larger)."""
    if hi <= lo:
        t = 0.5
    else:
        t = (value - lo) / (hi - lo)
    t = min(1.0, max(0.0, t))
    return 0.93 - 0.68 * t


def _cell(ax, x: float, y: float, value: float, lo: float, hi: float, gid: str) -> None:
    g = _shade(value, lo, hi)
    ax.add_patch(
        Rectangle((x, y), _CELL, _CELL, facecolor=(g, g, g), edgecolor="black", linewidth=0.8, gid=gid)
    )
    ax.text(
        x + _CELL / 2,
        y + _CELL / 2,
        f"{value:.3f}",
        ha="center",
        va="center",
        color="white" if g < 0.5 else "black",
    )


def emit_heatmap_svg(matrix: HeatmapMatrix, path: str | Path) -> Path:
    """ΔAP grid with numeric labels and a separated μ row and column.

    Rows are model orders, columns patch orders; the extra column holds
    row means, the extra row column means. Cell shade is a monotone
    function of ΔAP over the range the matrix spans.
    """
    matrix.validate()
    n_rows = len(matrix.model_orders)
    n_cols = len(matrix.patch_orders)
    values = np.concatenate([matrix.delta.ravel(), matrix.row_mu, matrix.col_mu])
    lo, hi = float(values.min()), float(values.max())

    width = n_cols + _GAP + 1
    height = n_rows + _GAP + 1
    with rc_context(_SVG_RC):
        fig = Figure(figsize=(1.6 + width * 0.75, 1.3 + height * 0.75), dpi=100)
        ax = fig.add_axes((0.14, 0.12, 0.82, 0.78))
        ax.set_xlim(0, width)
        ax.set_ylim(height, 0)
        ax.set_aspect("equal")
        ax.set_xticks([c + 0.5 for c in range(n_cols)] + [n_cols + _GAP + 0.5])
        ax.set_xticklabels([str(p) for p in matrix.patch_orders] + ["μ"])
        ax.set_yticks([r + 0.5 for r in range(n_rows)] + [n_rows + _GAP + 0.5])
        ax.set_yticklabels([str(m) for m in matrix.model_orders] + ["μ"])
        ax.tick_params(length=0)
        for spine in ax.spines.values():
            spine.set_visible(False)
        ax.set_xlabel("patch order")
        ax.set_ylabel("model order")
        ax.set_title("ΔAP = grayscale AP - patched AP")

        for r, m in enumerate(matrix.model_orders):
            for c, p in enumerate(matrix.patch_orders):
                _cell(ax, c, r, float(matrix.delta[r, c]), lo, hi, f"cell-m{m}-p{p}")
            _cell(ax, n_cols + _GAP, r, float(matrix.row_mu[r]), lo, hi, f"mu-rowmean-m{m}")
        for c, p in enumerate(matrix.patch_orders):
            _cell(ax, c, n_rows + _GAP, float(matrix.col_mu[c]), lo, hi, f"mu-colmean-p{p}")

        out = Path(path)
        fig.savefig(out, format="svg", metadata={"Date": None})
    return out


def emit_transfer_svg(result: TransferResult, path: str | Path) -> Path:
    """Mean AP per patch order over the zoo, std whiskers, and dashed
    reference lines for the zoo's clean and grayscale baselines."""
    orders = result.patch_orders
    means = [result.mean_ap[p] for p in orders]
    stds = [result.std_ap[p] for p in orders]
    clean_ref = float(np.mean(result.member_clean))
    gray_ref = float(np.mean(result.member_gray_mean))

    with rc_context(_SVG_RC):
        fig = Figure(figsize=(1.8 + 1.1 * len(orders), 3.6), dpi=100)
        ax = fig.add_axes((0.14, 0.14, 0.82, 0.74))
        xs = np.arange(len(orders), dtype=float)
        for x, p, mean, std in zip(xs, orders, means, stds):
            ax.add_patch(
                Rectangle((x - 0.3, 0.0), 0.6, mean, facecolor=(0.62, 0.62, 0.62), edgecolor="black", linewidth=0.8, gid=f"bar-p{p}")
            )
            ax.errorbar([x], [mean], yerr=[std], fmt="none", ecolor="black", capsize=4, elinewidth=1.0)
            ax.text(x, mean + std + 0.035, f"{mean:.3f}", ha="center", va="bottom", fontsize=9)
        ax.axhline(clean_ref, color="black", linestyle="--", linewidth=1.0, gid="ref-clean")
        ax.axhline(gray_ref, color="black", linestyle=":", linewidth=1.2, gid="ref-grayscale")
        top = max([clean_ref, gray_ref] + [m + s for m, s in zip(means, stds)])
        ax.text(len(orders) - 0.52, clean_ref + 0.012, f"clean {clean_ref:.3f}", ha="right", fontsize=8)
        ax.text(len(orders) - 0.52, gray_ref - 0.03, f"grayscale {gray_ref:.3f}", ha="right", fontsize=8)
        ax.set_xlim(-0.6, len(orders) - 0.4)
        ax.set_ylim(0.0, max(1.0, top + 0.1))
        ax.set_xticks(list(xs))
        ax.set_xticklabels([str(p) for p in orders])
        ax.set_xlabel("patch order")
        ax.set_ylabel("AP over zoo")
        ax.set_title(f"transfer: {len(result.member_names)} standard-trained models")
        out = Path(path)
        fig.savefig(out, format="svg", metadata={"Date": None})
    return out


def write_report(run_dir: str | Path, out_dir: str | Path | None = None) -> list[Path]:
    """Render a run directory's ledger into CSV + figures.

    A pure function of the persisted ledger (and transfer results when
    present): the emitted bytes depend on nothing else. The transfer
    figure is skipped, with a notice from the caller, when the run has
    no transfer results yet.
    """
    root = Path(run_dir)
    out = root if out_dir is None else Path(out_dir)
    ledger_path = root / LEDGER_JSON
    if not ledger_path.exists():
        raise FileNotFoundError(f"{ledger_path}: run has no evaluation ledger (game not finished?)")
    out.mkdir(parents=True, exist_ok=True)
    ledger = EvalLedger.from_json(json.loads(ledger_path.read_text(encoding="utf-8")))

    written = []
    csv_path = out / LEDGER_CSV
    csv_path.write_bytes(ledger.to_csv().encode("utf-8"))
    written.append(csv_path)
    written.append(emit_heatmap_svg(build_heatmap(ledger), out / "heatmap.svg"))
    transfer_path = root / TRANSFER_JSON
    if transfer_path.exists():
        written.append(emit_transfer_svg(load_transfer(transfer_path), out / "transfer.svg"))
    return written
