"""Utility-vs-epsilon figures and the aggregated summary table."""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from pathlib import Path

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

log = logging.getLogger(__name__)

METRIC = "pck_at_01"
METRIC_LABEL = "PCK@0.1·diag"

LABELS = {
    "SGD": "SGD (non-private)",
    "SGD_PSI": "SGD on blurred inputs",
    "DPSGD": "DP-SGD",
    "PROJ_DPSGD": "Projected DP-SGD",
    "FDP": "Feature-DP",
    "FEATURE_PROJECTIVE": "Feature-Projective DP",
}

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "svg.hashsalt": "featproj-dp",
    "svg.fonttype": "none",
}


def aggregate(rows, metric: str = METRIC):
    """Median and interquartile range of ``metric`` per (strategy, C, variant, ε).

    Only rows with status ``ok`` or ``halted`` contribute.
    """
    groups = defaultdict(list)
    for r in rows:
        if r.status not in ("ok", "halted"):
            continue
        groups[(r.strategy, r.C, r.variant, r.epsilon_target)].append(getattr(r, metric))
    out = {}
    for key, vals in groups.items():
        v = np.asarray(vals, dtype=np.float64)
        out[key] = (float(np.median(v)), float(np.percentile(v, 25)),
                    float(np.percentile(v, 75)), len(v))
    return out


def write_summary(agg, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["strategy", "C", "variant", "epsilon", "median", "q25", "q75", "n"])
        for (strategy, C, variant, eps), (med, lo, hi, n) in sorted(agg.items()):
            w.writerow([strategy, format(C, ".17g"), variant, format(eps, ".17g"),
                        format(med, ".17g"), format(lo, ".17g"), format(hi, ".17g"), n])
    return path


def _slug(x: float) -> str:
    return format(x, "g").replace(".", "p")


def emit_plots(rows, out_dir, metric: str = METRIC) -> list[Path]:
    """One SVG per (strategy, clip norm) with a median line and IQR band per variant.

    Also writes ``summary.csv`` with the plotted numbers. Returns every file
    written.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("no result rows to plot")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    agg = aggregate(rows, metric)
    files = [write_summary(agg, out_dir / "summary.csv")]

    panels = defaultdict(lambda: defaultdict(list))
    for (strategy, C, variant, eps), stats in agg.items():
        panels[(strategy, C)][variant].append((eps, *stats))
    clips = sorted({r.C for r in rows})
    strategies = sorted({r.strategy for r in rows})
    for strategy in strategies:
        for C in clips:
            lines = panels.get((strategy, C))
            if not lines:
                log.info("no completed rows for strategy=%s C=%g; figure skipped", strategy, C)
                continue
            path = out_dir / f"utility_{strategy}_C{_slug(C)}.svg"
            with plt.rc_context(STYLE):
                fig, ax = plt.subplots(figsize=(4.2, 3.0))
                for variant in LABELS:
                    pts = sorted(lines.get(variant, []))
                    if not pts:
                        continue
                    eps, med, lo, hi = (np.array(c) for c in list(zip(*pts))[:4])
                    (ln,) = ax.plot(eps, med, marker="o", ms=3, lw=1.4, label=LABELS[variant])
                    ax.fill_between(eps, lo, hi, color=ln.get_color(), alpha=0.18, lw=0)
                ax.set_xlabel(r"privacy budget $\varepsilon$")
                ax.set_ylabel(METRIC_LABEL if metric == METRIC else metric)
                ax.set_title(f"{strategy}, C = {C:g}")
                ax.set_ylim(-0.02, 1.02)
                ax.legend(fontsize=7, loc="lower right")
                fig.tight_layout()
                fig.savefig(path, format="svg", metadata={"Date": None})
                plt.close(fig)
            files.append(path)
    return files
