"""Deterministic 28x28 handwritten-style digit images.

Each digit has two stroke-style variants; samples are rendered from jittered,
warped polylines into antialiased grayscale, quantized to uint8 so a dataset
written through the IDX pair loads back bit-identically.  This is the
desk-scale stand-in used when no real digit corpus is on disk.
"""

from __future__ import annotations

import os

import numpy as np

from .data import Dataset, load_idx, write_idx
from .rng import rng_from

SIDE = 28

# Shared stroke anchor points (x, y) in [0, 1], y pointing down.
_TL, _TR = (0.28, 0.17), (0.72, 0.17)
_ML, _MR = (0.28, 0.50), (0.72, 0.50)
_BL, _BR = (0.28, 0.83), (0.72, 0.83)

# digit -> two variants -> list of polylines -> list of (x, y) points
_GLYPHS: dict[int, list[list[list[tuple[float, float]]]]] = {
    0: [
        [[_TL, _TR, _BR, _BL, _TL]],
        [[(0.5, 0.15), (0.74, 0.32), (0.74, 0.68), (0.5, 0.85), (0.26, 0.68), (0.26, 0.32), (0.5, 0.15)]],
    ],
    1: [
        [[(0.52, 0.15), (0.52, 0.85)]],
        [[(0.34, 0.30), (0.52, 0.15), (0.52, 0.85)], [(0.34, 0.85), (0.70, 0.85)]],
    ],
    2: [
        [[(0.28, 0.24), (0.50, 0.15), (0.72, 0.24), (0.72, 0.42), (0.28, 0.83)], [(0.28, 0.83), (0.72, 0.83)]],
        [[_TL, _TR], [_TR, _MR], [_MR, _ML], [_ML, _BL], [_BL, _BR]],
    ],
    3: [
        [[_TL, _TR], [_TR, _MR], [(0.42, 0.50), _MR], [_MR, _BR], [_BR, _BL]],
        [[(0.30, 0.22), (0.58, 0.15), (0.72, 0.30), (0.54, 0.48), (0.72, 0.66), (0.58, 0.85), (0.30, 0.78)]],
    ],
    4: [
        [[(0.32, 0.15), (0.32, 0.52)], [(0.32, 0.52), (0.74, 0.52)], [(0.62, 0.15), (0.62, 0.85)]],
        [[(0.64, 0.15), (0.26, 0.58), (0.76, 0.58)], [(0.64, 0.34), (0.64, 0.85)]],
    ],
    5: [
        [[_TR, _TL], [_TL, _ML], [_ML, _MR], [_MR, _BR], [_BR, _BL]],
        [[(0.70, 0.15), (0.30, 0.15), (0.30, 0.45), (0.58, 0.42), (0.73, 0.60), (0.58, 0.84), (0.28, 0.79)]],
    ],
    6: [
        [[_TR, _TL], [_TL, _BL], [_BL, _BR], [_BR, _MR], [_MR, _ML]],
        [[(0.66, 0.16), (0.40, 0.30), (0.29, 0.56), (0.38, 0.82), (0.62, 0.83), (0.71, 0.64), (0.52, 0.50), (0.31, 0.60)]],
    ],
    7: [
        [[_TL, _TR], [_TR, (0.44, 0.85)]],
        [[_TL, _TR], [_TR, (0.44, 0.85)], [(0.36, 0.52), (0.64, 0.52)]],
    ],
    8: [
        [[_TL, _TR], [_ML, _MR], [_BL, _BR], [_TL, _ML], [_TR, _MR], [_ML, _BL], [_MR, _BR]],
        [[(0.5, 0.15), (0.69, 0.32), (0.5, 0.49), (0.31, 0.32), (0.5, 0.15)],
         [(0.5, 0.51), (0.72, 0.68), (0.5, 0.85), (0.28, 0.68), (0.5, 0.51)]],
    ],
    9: [
        [[_MR, _ML], [_ML, _TL], [_TL, _TR], [_TR, _BR]],
        [[_MR, _ML], [_ML, _TL], [_TL, _TR], [_TR, (0.68, 0.76)], [(0.68, 0.76), (0.38, 0.85)]],
    ],
}

_GRID = np.stack(
    [np.tile((np.arange(SIDE) + 0.5) / SIDE, SIDE),
     np.repeat((np.arange(SIDE) + 0.5) / SIDE, SIDE)],
    axis=1,
)  # (784, 2) pixel centers as (x, y)


def _segments(polylines, rng, deform):
    theta = rng.uniform(-0.24, 0.24) * deform
    scale = rng.uniform(0.80, 1.12)
    shear = rng.uniform(-0.20, 0.20) * deform
    shift = rng.uniform(-0.085, 0.085, size=2) * deform
    amp = rng.uniform(0.0, 0.04) * deform
    freq = rng.uniform(1.2, 3.0)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    ca, sa = np.cos(theta), np.sin(theta)
    aff = np.array([[ca + shear * sa, sa], [shear * ca - sa, ca]]) * scale

    pts_a, pts_b = [], []
    for line in polylines:
        pts = np.asarray(line, dtype=np.float64)
        # Subdivide before warping so the sinusoid bends the strokes.
        dense = [pts[0]]
        for a, b in zip(pts, pts[1:]):
            for step in range(1, 7):
                dense.append(a + (b - a) * step / 6)
        dense = np.asarray(dense)
        dense = (dense - 0.5) @ aff.T + 0.5 + shift
        dense[:, 0] += amp * np.sin(2.0 * np.pi * freq * dense[:, 1] + phase)
        pts_a.append(dense[:-1])
        pts_b.append(dense[1:])
    return np.concatenate(pts_a), np.concatenate(pts_b)


def _render(polylines, rng, deform):
    a, b = _segments(polylines, rng, deform)
    ab = b - a
    ab2 = np.maximum((ab * ab).sum(axis=1), 1e-12)
    ap = _GRID[:, None, :] - a[None, :, :]
    t = np.clip((ap * ab[None, :, :]).sum(axis=2) / ab2[None, :], 0.0, 1.0)
    closest = a[None, :, :] + t[:, :, None] * ab[None, :, :]
    dist = np.sqrt(((_GRID[:, None, :] - closest) ** 2).sum(axis=2)).min(axis=1)
    thickness = rng.uniform(0.030, 0.055)
    ink = 1.0 / (1.0 + np.exp((dist - thickness) / 0.012))
    return ink * rng.uniform(0.72, 1.0)


def synth_digit_images(n: int, seed: int, noise_sigma: float = 0.10, deform: float = 1.0):
    """n jittered digit images as (uint8 images (n, 28, 28), labels (n,))."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = rng_from(seed)
    labels = np.repeat(np.arange(10), n // 10)
    labels = np.concatenate([labels, np.arange(n - len(labels))])
    labels = labels[rng.permutation(n)]
    images = np.empty((n, SIDE, SIDE), dtype=np.uint8)
    for i, digit in enumerate(labels):
        variant = int(rng.integers(2))
        img = _render(_GLYPHS[int(digit)][variant], rng, deform)
        if noise_sigma > 0:
            img = img + rng.normal(0.0, noise_sigma, size=img.shape)
        images[i] = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8).reshape(SIDE, SIDE)
    return images, labels.astype(np.int64)


def synth_digits(n: int, seed: int, noise_sigma: float = 0.10, deform: float = 1.0) -> Dataset:
    """Digit dataset with features in [0, 1], identical to an IDX round-trip."""
    images, labels = synth_digit_images(n, seed, noise_sigma, deform)
    features = images.reshape(n, SIDE * SIDE).astype(np.float64) / 255.0
    return Dataset(features, labels, 10)


def write_digit_idx(out_dir, n: int, seed: int, noise_sigma: float = 0.10, deform: float = 1.0):
    """Render digits and write them as an IDX image/label pair; returns paths."""
    os.makedirs(out_dir, exist_ok=True)
    images, labels = synth_digit_images(n, seed, noise_sigma, deform)
    images_path = os.path.join(out_dir, "digits-images-idx3-ubyte")
    labels_path = os.path.join(out_dir, "digits-labels-idx1-ubyte")
    write_idx(images, labels, images_path, labels_path)
    return images_path, labels_path


def find_mnist(root: str | None = None):
    """Locate real MNIST IDX files under MNIST_DIR or ./data/mnist, if any."""
    candidates = []
    if root:
        candidates.append(root)
    if os.environ.get("MNIST_DIR"):
        candidates.append(os.environ["MNIST_DIR"])
    candidates.append(os.path.join("data", "mnist"))
    for base in candidates:
        images = os.path.join(base, "train-images-idx3-ubyte")
        labels = os.path.join(base, "train-labels-idx1-ubyte")
        if os.path.exists(images) and os.path.exists(labels):
            return images, labels
    return None


def load_digit_corpus(n: int, seed: int) -> Dataset:
    """Real MNIST when available, otherwise the synthetic stand-in."""
    found = find_mnist()
    if found:
        from .data import subsample

        ds = load_idx(found[0], found[1], num_classes=10)
        return subsample(ds, min(n, ds.rows), seed)
    return synth_digits(n, seed)
