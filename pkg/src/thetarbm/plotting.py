"""Filter tiles (binary PGM) and report figures rendered with matplotlib."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .rbm import ThetaRBM  # noqa: E402

MID_GRAY = 128


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def to_gray(filt: np.ndarray) -> np.ndarray:
    """Min-max scale one filter to 0..255; a constant filter becomes mid gray."""
    lo, hi = float(filt.min()), float(filt.max())
    if hi - lo <= 0.0:
        return np.full(filt.shape, MID_GRAY, dtype=np.uint8)
    return np.rint((filt - lo) / (hi - lo) * 255.0).astype(np.uint8)


def tile_filters(filters: np.ndarray, side: int, rows: int, cols: int,
                 separator: int = 0) -> np.ndarray:
    """Tile ``rows * cols`` flattened filters (row-major order) with 1-pixel separators."""
    filters = np.asarray(filters)
    if len(filters) > rows * cols:
        raise ValueError(f"{len(filters)} filters do not fit a {rows}x{cols} grid")
    h = rows * side + rows - 1
    w = cols * side + cols - 1
    canvas = np.full((h, w), separator, dtype=np.uint8)
    for n, f in enumerate(filters):
        r, c = divmod(n, cols)
        y, x = r * (side + 1), c * (side + 1)
        canvas[y:y + side, x:x + side] = to_gray(f.reshape(side, side))
    return canvas


def select_filters(m: ThetaRBM, units, slices) -> np.ndarray:
    """Filters ordered unit-major: for each unit, one filter per selected slice."""
    units = list(units)
    slices = list(slices)
    if any(u < 0 or u >= m.n_hidden for u in units):
        raise IndexError(f"hidden unit out of range 0..{m.n_hidden - 1}")
    if any(s < 0 or s >= m.n_slices for s in slices):
        raise IndexError(f"slice out of range 0..{m.n_slices - 1}")
    return np.array([m.W[s, u] for u in units for s in slices])


def pgm_bytes(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode() + img.tobytes()


def write_pgm(path, img: np.ndarray) -> None:
    atomic_write_bytes(path, pgm_bytes(img))


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = []
    pos = 0
    while len(parts) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        parts.append(data[pos:end])
        pos = end
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = (int(p) for p in parts[1:])
    if maxval != 255:
        raise ValueError("only 8-bit PGM is supported")
    pos += 1
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w).copy()


def export_filters(m: ThetaRBM, path, rows: int, cols: int, units=None, slices=None,
                   png: bool = False) -> np.ndarray:
    """Write a filter grid as PGM: one row per unit, one column per slice by default."""
    slices = range(m.n_slices) if slices is None else slices
    slices = list(slices)
    if units is None:
        per_row = max(1, cols // max(1, len(slices)))
        units = range(min(m.n_hidden, rows * per_row))
    canvas = tile_filters(select_filters(m, units, slices), m.side, rows, cols)
    write_pgm(path, canvas)
    if png:
        save_image_png(canvas, Path(path).with_suffix(".png"))
    return canvas


def save_image_png(img: np.ndarray, path, title: str | None = None) -> None:
    h, w = img.shape
    fig, ax = plt.subplots(figsize=(max(2.0, w / 40), max(2.0, h / 40)))
    ax.imshow(img, cmap="gray", vmin=0, vmax=255, interpolation="nearest")
    ax.set_axis_off()
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_training_curves(metrics_by_model: dict, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for name, rows in metrics_by_model.items():
        ax.plot([r["epoch"] for r in rows], [r["recon_error"] for r in rows], label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("reconstruction error")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_gamma_histograms(gammas: dict, path) -> None:
    """Per-unit score distributions, one histogram per model."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    bins = np.linspace(0.0, 1.2, 49)
    for name, g in gammas.items():
        g = np.asarray(g, dtype=float)
        ax.hist(g[np.isfinite(g)], bins=bins, histtype="step", label=name)
    ax.set_xlabel(r"$\gamma_j$")
    ax.set_ylabel("hidden units")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_error_grid(errors: np.ndarray, row_labels, col_labels, path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    im = ax.imshow(errors, cmap="viridis")
    ax.set_xticks(range(len(col_labels)), col_labels)
    ax.set_yticks(range(len(row_labels)), row_labels)
    for (i, j), v in np.ndenumerate(errors):
        ax.text(j, i, f"{v:.1f}", ha="center", va="center", color="w", fontsize=8)
    fig.colorbar(im, ax=ax, label="test error (%)")
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
