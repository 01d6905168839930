"""Figure rendering for evaluation reports, training logs and attention maps.

Every entry point writes PNG files next to the delimited text the other
modules emit and returns the list of paths it wrote. Rendering is headless
(Agg) so the CLI works without a display.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def evaluation_figures(report, out_dir, prefix="eval"):
    """Improvement histogram plus input/output scatter for an EvalReport."""
    out = Path(out_dir)
    if not report.rows:
        raise ValueError("report has no rows to plot")
    imp = [r["improvement_db"] for r in report.rows]
    inp = [r["input_si_sdr_db"] for r in report.rows]
    outp = [r["si_sdr_db"] for r in report.rows]

    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.hist(imp, bins=max(5, int(math.sqrt(len(imp)) * 2)), color="#4878a8",
            edgecolor="black", linewidth=0.4)
    mean = float(np.mean(imp))
    ax.axvline(mean, color="crimson", linestyle="--", linewidth=1,
               label=f"mean {mean:+.2f} dB")
    ax.axvline(0.0, color="gray", linewidth=0.8)
    ax.set_xlabel("SI-SDR improvement (dB)")
    ax.set_ylabel("utterances")
    ax.legend(frameon=False)
    hist_path = _save(fig, out / f"{prefix}_improvement_hist.png")

    fig, ax = plt.subplots(figsize=(4.2, 4.2))
    lo = min(min(inp), min(outp)) - 1.0
    hi = max(max(inp), max(outp)) + 1.0
    ax.plot([lo, hi], [lo, hi], color="gray", linewidth=0.8)
    ax.scatter(inp, outp, s=14, color="#4878a8", alpha=0.8)
    ax.set_xlim(lo, hi)
    ax.set_ylim(lo, hi)
    ax.set_xlabel("input SI-SDR (dB)")
    ax.set_ylabel("output SI-SDR (dB)")
    scatter_path = _save(fig, out / f"{prefix}_scatter.png")
    return [hist_path, scatter_path]


def read_metrics_csv(path):
    """Parse a training metrics.csv into a dict of float columns."""
    cols = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{path} is empty")
        for name in reader.fieldnames:
            cols[name] = []
        for row in reader:
            for name, raw in row.items():
                val = math.nan if raw in ("", "None", None) else float(raw)
                cols[name].append(val)
    return cols


def training_figures(metrics_csv, out_dir, prefix="train"):
    """Loss-curve and validation-score figures from a metrics.csv log."""
    cols = read_metrics_csv(metrics_csv)
    needed = {"step", "loss", "time_term", "mag_term"}
    missing = needed - set(cols)
    if missing:
        raise ValueError(f"{metrics_csv} lacks columns {sorted(missing)}")
    steps = cols["step"]
    if not steps:
        raise ValueError(f"{metrics_csv} has no data rows")

    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    ax.plot(steps, cols["loss"], label="total", color="#303030")
    ax.plot(steps, cols["time_term"], label="time L1", color="#4878a8",
            linewidth=0.9)
    ax.plot(steps, cols["mag_term"], label="magnitude L1", color="#c06048",
            linewidth=0.9)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    paths = [_save(fig, Path(out_dir) / f"{prefix}_loss.png")]

    val = [(s, v) for s, v in zip(steps, cols.get("val_si_sdr", []))
           if not math.isnan(v)]
    if val:
        fig, ax = plt.subplots(figsize=(5.5, 3.0))
        ax.plot(*zip(*val), marker="o", markersize=3, color="#4878a8")
        ax.set_xlabel("step")
        ax.set_ylabel("validation SI-SDR (dB)")
        paths.append(_save(fig, Path(out_dir) / f"{prefix}_val_si_sdr.png"))
    return paths


def attention_figure(amap, out_path, title=""):
    """Frequency-averaged attention magnitude as a C x C heat map."""
    mean = amap.magnitude.mean(axis=0)      # C x C, columns sum to 1
    c = mean.shape[0]
    fig, ax = plt.subplots(figsize=(3.6, 3.2))
    im = ax.imshow(mean, cmap="viridis", vmin=0.0)
    ax.set_xlabel("target channel")
    ax.set_ylabel("source channel")
    ax.set_xticks(range(c))
    ax.set_yticks(range(c))
    if c <= 8:
        for i in range(c):
            for j in range(c):
                ax.text(j, i, f"{mean[i, j]:.2f}", ha="center", va="center",
                        color="white" if mean[i, j] < mean.max() * 0.6 else "black",
                        fontsize=7)
    ax.set_title(title or amap.block)
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, out_path)


def attention_band_figure(band_rows, out_path, title=""):
    """Per-band mean attention magnitude, one line per source channel."""
    if not band_rows:
        raise ValueError("no band rows to plot")
    channels = sorted({r["channel"] for r in band_rows})
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    for c in channels:
        rows = sorted((r for r in band_rows if r["channel"] == c),
                      key=lambda r: r["band"])
        centers = [0.5 * (r["f_lo"] + r["f_hi"]) for r in rows]
        ax.plot(centers, [r["mean_magnitude"] for r in rows], marker="o",
                markersize=3, label=f"channel {c}")
    ax.set_xlabel("frequency bin")
    ax.set_ylabel("mean attention magnitude")
    ax.legend(frameon=False)
    ax.set_title(title)
    return _save(fig, out_path)
