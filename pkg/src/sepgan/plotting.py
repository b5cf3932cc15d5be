"""Figures written next to run outputs: image grids (PIL, byte-stable) and
training/evaluation plots (matplotlib, Agg backend).
"""
import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}

GAP = 2


def _u8(img):
    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return img


def pair_grid(sources, generated, gap=GAP):
    """Stack ``(source | generated)`` rows into one uint8 image.

    Tiles are resized to the first source's shape; ``len(sources)`` rows, two
    tiles per row.
    """
    if len(sources) != len(generated):
        raise ValueError("need as many generated images as sources")
    h, w = np.asarray(sources[0]).shape
    tiles = []
    for s, g in zip(sources, generated):
        pair = [np.asarray(Image.fromarray(_u8(t)).resize((w, h), Image.BILINEAR)) for t in (s, g)]
        tiles.append(pair)
    rows = len(tiles)
    grid = np.full((rows * h + (rows + 1) * gap, 2 * w + 3 * gap), 128, dtype=np.uint8)
    for r, (s, g) in enumerate(tiles):
        y = gap + r * (h + gap)
        grid[y:y + h, gap:gap + w] = s
        grid[y:y + h, 2 * gap + w:2 * gap + 2 * w] = g
    return grid


def grid_tiles(grid, tile_shape, gap=GAP):
    """Inverse of :func:`pair_grid`: list of tiles in row-major order."""
    h, w = tile_shape
    rows = (grid.shape[0] - gap) // (h + gap)
    out = []
    for r in range(rows):
        y = gap + r * (h + gap)
        out.append(grid[y:y + h, gap:gap + w])
        out.append(grid[y:y + h, 2 * gap + w:2 * gap + 2 * w])
    return out


def save_png(img, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_u8(img)).save(path, format="PNG")
    return path


def _read_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    cols = {k: np.array([float(r[k]) for r in rows]) for k in (rows[0] if rows else {})}
    return cols


def new_figure(ncols=1, width=3.4, height=2.4):
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, ncols, figsize=(width * ncols, height), squeeze=False)
    return fig, axes[0]


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(STYLE):
        fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_metrics(csv_path, out_path):
    """Loss curves, balance factor and batch accuracies of a joint run."""
    cols = _read_csv(csv_path)
    fig, (ax_loss, ax_beta, ax_acc) = new_figure(3)
    if cols:
        it = cols["iter"]
        for key, label in (("l_reg", "L_reg"), ("l_s", "L_s (D)"), ("l_cd", "L_c,D"), ("l_cg", "L_c,G")):
            ax_loss.plot(it, cols[key], label=label, lw=1)
        ax_beta.plot(it, cols["beta"], color="k", lw=1)
        ax_acc.plot(it, cols["acc_src"], label="source", lw=1)
        ax_acc.plot(it, cols["acc_gen"], label="generated", lw=1)
        ax_loss.legend(frameon=False)
        ax_acc.legend(frameon=False)
    ax_loss.set(xlabel="iteration", ylabel="loss", yscale="log")
    ax_beta.set(xlabel="iteration", ylabel="beta", ylim=(0, 1.05))
    ax_acc.set(xlabel="iteration", ylabel="batch word accuracy", ylim=(0, 1))
    return _save(fig, out_path)


def plot_report(report, out_path):
    """Accuracy per branch, plus the confidence scatter for ensemble runs."""
    ensemble = report.mode == "ensemble"
    fig, axes = new_figure(2 if ensemble else 1)
    names = list(report.accuracy)
    vals = [report.accuracy[n] for n in names]
    ax = axes[0]
    bars = ax.bar(names, vals, color="0.6", edgecolor="k", lw=0.5)
    for bar, v in zip(bars, vals):
        ax.annotate(f"{100 * v:.1f}", (bar.get_x() + bar.get_width() / 2, v), ha="center", va="bottom", fontsize=7)
    ax.set(ylabel="word accuracy", ylim=(0, 1.1), title=f"n = {report.count}")
    if ensemble:
        ax = axes[1]
        cs = np.array([r["conf_src"] for r in report.records])
        cg = np.array([r["conf_gen"] for r in report.records])
        gen = np.array([r["chosen"] == "gen" for r in report.records])
        ax.scatter(cs[~gen], cg[~gen], s=6, label="src chosen")
        ax.scatter(cs[gen], cg[gen], s=6, label="gen chosen")
        ax.plot([0, 1], [0, 1], color="k", lw=0.5)
        ax.set(xlabel="source confidence", ylabel="generated confidence", xlim=(0, 1), ylim=(0, 1))
        ax.legend(frameon=False)
    return _save(fig, out_path)
