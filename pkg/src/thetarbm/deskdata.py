"""Build small mnist / mnist-rot style files from the 5,000-digit MNIST sample
bundled with mlxtend.

mnist-rot digits are rotated by an angle drawn uniformly from [0, 360) with
bilinear interpolation, the same recipe as the published benchmark. Output:

    mnist/train-images-idx3-ubyte   mnist/train-labels-idx1-ubyte
    mnist/t10k-images-idx3-ubyte    mnist/t10k-labels-idx1-ubyte
    mnist-rot/train.amat            mnist-rot/test.amat
    mnist-rot/{train,test}_angles.txt
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import ImageDataset, write_amat, write_idx

log = logging.getLogger(__name__)

SIDE = 28


def bundled_digits() -> tuple[np.ndarray, np.ndarray]:
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:  # pragma: no cover - depends on the environment
        raise RuntimeError("building desk data needs the 'mlxtend' package") from exc
    x, y = mnist_data()
    return x / 255.0, y.astype(np.int64)


def rotate_digits(images: np.ndarray, angles: np.ndarray) -> np.ndarray:
    out = np.empty_like(images)
    for i, (img, a) in enumerate(zip(images, angles)):
        rot = ndimage.rotate(img.reshape(SIDE, SIDE), a, reshape=False, order=1, mode="constant")
        out[i] = np.clip(rot, 0.0, 1.0).reshape(-1)
    return out


def build(out_dir, n_train: int = 2000, n_test: int = 2000, seed: int = 1234) -> Path:
    """Write the desk-scale files under ``out_dir``; existing files are reused."""
    out = Path(out_dir)
    marker = out / f".built-{n_train}-{n_test}-{seed}"
    if marker.exists():
        return out
    x, y = bundled_digits()
    if n_train + n_test > len(x):
        raise ValueError(f"only {len(x)} bundled digits")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(x))
    tr, te = order[:n_train], order[n_train:n_train + n_test]
    rest = order[n_train + n_test:]
    (out / "mnist").mkdir(parents=True, exist_ok=True)
    (out / "mnist-rot").mkdir(parents=True, exist_ok=True)
    write_idx(out / "mnist/train-images-idx3-ubyte", out / "mnist/train-labels-idx1-ubyte",
              x[tr], y[tr], SIDE)
    test_rows = rest if len(rest) else te
    write_idx(out / "mnist/t10k-images-idx3-ubyte", out / "mnist/t10k-labels-idx1-ubyte",
              x[test_rows], y[test_rows], SIDE)
    for name, rows in (("train", tr), ("test", te)):
        angles = rng.uniform(0.0, 360.0, size=len(rows))
        rotated = rotate_digits(x[rows], angles)
        write_amat(out / f"mnist-rot/{name}.amat", ImageDataset(rotated, y[rows], SIDE))
        np.savetxt(out / f"mnist-rot/{name}_angles.txt", angles, fmt="%.6f")
    marker.touch()
    log.info("desk data written to %s", out)
    return out


if __name__ == "__main__":
    import argparse

    ap = argparse.ArgumentParser(description="build desk-scale mnist / mnist-rot files")
    ap.add_argument("out_dir")
    ap.add_argument("--train", type=int, default=2000)
    ap.add_argument("--test", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=1234)
    a = ap.parse_args()
    print(build(a.out_dir, a.train, a.test, a.seed))
