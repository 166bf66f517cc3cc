"""Dataset construction, IDX ingestion, and the two non-IID partitioners.

Label skew splits each class across clients with Dirichlet proportions;
feature skew gives every client the same label mix but pushes its features
through a per-client domain transform.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .rng import rng_from

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CONTAINER_MAGIC = 0x50464453  # "PFDS"

TRAIN_FRACTION = 0.8
MAX_PARTITION_ATTEMPTS = 100


@dataclass
class Dataset:
    features: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,) int64 class ids in [0, num_classes)
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be 2-D")
        if len(self.labels) != len(self.features):
            raise ValueError("labels length must equal feature row count")
        if len(self.labels) and self.labels.max() >= self.num_classes:
            raise ValueError("label id outside [0, num_classes)")

    @property
    def rows(self) -> int:
        return len(self.features)


@dataclass
class ClientShard:
    client_id: int
    train: Dataset
    test: Dataset
    label_histogram: np.ndarray  # train label counts, length num_classes


@dataclass
class DomainTransform:
    rotation_angle: float = 0.0  # radians, applied in the image plane when d == 784
    scale: float = 1.0
    noise_sigma: float = 0.0
    channel_shift: float = 0.0

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be > 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def _read_exact(f, count, what):
    data = f.read(count)
    if len(data) != count:
        raise ValueError(f"truncated IDX file: expected {count} bytes of {what}")
    return data


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Load an IDX image/label pair; pixels are scaled into [0, 1]."""
    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, "image header"))
        if magic != IDX_IMAGES_MAGIC:
            raise ValueError(f"bad IDX image magic 0x{magic:08x}")
        pixels = np.frombuffer(_read_exact(f, count * rows * cols, "pixels"), dtype=np.uint8)
    with open(labels_path, "rb") as f:
        magic, label_count = struct.unpack(">II", _read_exact(f, 8, "label header"))
        if magic != IDX_LABELS_MAGIC:
            raise ValueError(f"bad IDX label magic 0x{magic:08x}")
        labels = np.frombuffer(_read_exact(f, label_count, "labels"), dtype=np.uint8)
    if count != label_count:
        raise ValueError(f"image/label count mismatch: {count} images vs {label_count} labels")
    features = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if count else 0
    return Dataset(features, labels, num_classes)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write a (n, rows, cols) uint8 image stack and labels as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


def save_dataset(ds: Dataset, path) -> None:
    """Binary container: u32 magic/rows/cols/C header, f64 features, u16 labels."""
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", CONTAINER_MAGIC, ds.rows, ds.features.shape[1], ds.num_classes))
        f.write(ds.features.astype(">f8").tobytes())
        f.write(ds.labels.astype(">u2").tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        magic, rows, cols, c = struct.unpack(">IIII", _read_exact(f, 16, "container header"))
        if magic != CONTAINER_MAGIC:
            raise ValueError(f"bad container magic 0x{magic:08x}")
        features = np.frombuffer(_read_exact(f, rows * cols * 8, "features"), dtype=">f8")
        labels = np.frombuffer(_read_exact(f, rows * 2, "labels"), dtype=">u2")
    return Dataset(features.reshape(rows, cols).astype(np.float64), labels.astype(np.int64), c)


def synth_gaussian(C: int, d: int, n_per_class: int, separation: float, seed: int) -> Dataset:
    """Isotropic unit Gaussians centered on orthogonal axis anchors."""
    if C < 2 or d < 2 or n_per_class < 1:
        raise ValueError("need C >= 2, d >= 2, n_per_class >= 1")
    rng = rng_from(seed)
    labels = np.repeat(np.arange(C), n_per_class)
    features = rng.standard_normal((C * n_per_class, d))
    anchors = np.zeros((C, d))
    anchors[np.arange(C), np.arange(C) % d] = separation
    features += anchors[labels]
    order = rng.permutation(len(labels))
    return Dataset(features[order], labels[order], C)


def _split_train_test(order_by_class: list[np.ndarray], ds: Dataset, client_id: int) -> ClientShard:
    train_idx, test_idx = [], []
    for idx in order_by_class:
        n_test = int(len(idx) - int(np.ceil(TRAIN_FRACTION * len(idx))))
        if n_test:
            train_idx.append(idx[:-n_test])
            test_idx.append(idx[-n_test:])
        else:
            train_idx.append(idx)
    train_idx = np.concatenate(train_idx) if train_idx else np.empty(0, dtype=np.int64)
    test_idx = np.concatenate(test_idx) if test_idx else np.empty(0, dtype=np.int64)
    if len(test_idx) == 0 and len(train_idx) >= 2:
        # Move one sample of the best-represented class so the client is evaluable.
        counts = np.bincount(ds.labels[train_idx], minlength=ds.num_classes)
        biggest = counts.argmax()
        pos = np.flatnonzero(ds.labels[train_idx] == biggest)[-1]
        test_idx = train_idx[pos : pos + 1]
        train_idx = np.delete(train_idx, pos)
    train = Dataset(ds.features[train_idx], ds.labels[train_idx], ds.num_classes)
    test = Dataset(ds.features[test_idx], ds.labels[test_idx], ds.num_classes)
    hist = np.bincount(train.labels, minlength=ds.num_classes)
    return ClientShard(client_id, train, test, hist)


def partition_dirichlet(ds: Dataset, N: int, alpha: float, seed: int) -> list[ClientShard]:
    """Label-skew split: each class's indices divided by Dir(alpha) proportions.

    Every sample lands on exactly one client; each client is then split
    80/20 into train/test, stratified by label where possible.  Partitions
    leaving any client without train or test samples are retried with a
    fresh sub-seed up to 100 times.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    for attempt in range(MAX_PARTITION_ATTEMPTS):
        rng = rng_from(seed, attempt)
        per_client: list[list[np.ndarray]] = [[] for _ in range(N)]
        for j in range(ds.num_classes):
            idx = rng.permutation(np.flatnonzero(ds.labels == j))
            if len(idx) == 0:
                continue
            shares = rng.dirichlet(np.full(N, alpha))
            cuts = np.floor(np.cumsum(shares)[:-1] * len(idx) + 0.5).astype(int)
            for i, part in enumerate(np.split(idx, cuts)):
                if len(part):
                    per_client[i].append(part)
        shards = [_split_train_test(per_client[i], ds, i) for i in range(N)]
        if all(s.train.rows > 0 and s.test.rows > 0 for s in shards):
            return shards
    raise ValueError("degenerate partition: some client kept an empty train or test split")


def _rotate_images(flat: np.ndarray, angle: float) -> np.ndarray:
    side = int(round(np.sqrt(flat.shape[1])))
    imgs = flat.reshape(-1, side, side)
    quarter = angle / (np.pi / 2)
    if abs(quarter - round(quarter)) < 1e-12:
        out = np.rot90(imgs, k=int(round(quarter)) % 4, axes=(1, 2))
        return out.reshape(flat.shape).copy()
    c = (side - 1) / 2.0
    ys, xs = np.mgrid[0:side, 0:side].astype(np.float64)
    ca, sa = np.cos(angle), np.sin(angle)
    x0 = ca * (xs - c) + sa * (ys - c) + c
    y0 = -sa * (xs - c) + ca * (ys - c) + c
    x_lo, y_lo = np.floor(x0).astype(int), np.floor(y0).astype(int)
    fx, fy = x0 - x_lo, y0 - y_lo
    out = np.zeros_like(imgs)
    for dy, dx, w in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                      (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yy, xx = y_lo + dy, x_lo + dx
        valid = (yy >= 0) & (yy < side) & (xx >= 0) & (xx < side)
        ys_c, xs_c = np.where(valid, yy, 0), np.where(valid, xx, 0)
        out += np.where(valid, imgs[:, ys_c, xs_c], 0.0) * w
    return out.reshape(flat.shape)


def apply_transform(features: np.ndarray, transform: DomainTransform, rng: np.random.Generator) -> np.ndarray:
    """Rotate (images only), then affine-shift, then add Gaussian noise."""
    out = np.asarray(features, dtype=np.float64)
    if transform.rotation_angle != 0.0 and out.shape[1] == 784:
        out = _rotate_images(out, transform.rotation_angle)
    out = out * transform.scale + transform.channel_shift
    if transform.noise_sigma > 0:
        out = out + rng.normal(0.0, transform.noise_sigma, size=out.shape)
    return out


def partition_feature_skew(ds: Dataset, transforms: list[DomainTransform], seed: int) -> list[ClientShard]:
    """Feature-skew split: identical label mix per client, per-client transform."""
    N = len(transforms)
    if N < 2:
        raise ValueError("need at least 2 transforms (one per client)")
    rng = rng_from(seed, 0)
    per_client: list[list[np.ndarray]] = [[] for _ in range(N)]
    for j in range(ds.num_classes):
        idx = rng.permutation(np.flatnonzero(ds.labels == j))
        base, extra = divmod(len(idx), N)
        start = 0
        for i in range(N):
            take = base + (1 if i < extra else 0)
            if take:
                per_client[i].append(idx[start : start + take])
            start += take
    shards = []
    for i in range(N):
        shard = _split_train_test(per_client[i], ds, i)
        noise_rng = rng_from(seed, 1, i)
        train = Dataset(apply_transform(shard.train.features, transforms[i], noise_rng),
                        shard.train.labels, ds.num_classes)
        test = Dataset(apply_transform(shard.test.features, transforms[i], noise_rng),
                       shard.test.labels, ds.num_classes)
        shards.append(ClientShard(i, train, test, shard.label_histogram))
    return shards


def subsample(ds: Dataset, n: int, seed: int) -> Dataset:
    """Label-balanced subsample of exactly n rows, deterministic per seed."""
    if n > ds.rows:
        raise ValueError(f"cannot subsample {n} rows from {ds.rows}")
    if n == 0:
        return Dataset(ds.features[:0], ds.labels[:0], ds.num_classes)
    rng = rng_from(seed)
    class_idx = [rng.permutation(np.flatnonzero(ds.labels == j)) for j in range(ds.num_classes)]
    sizes = np.array([len(ix) for ix in class_idx])
    want = np.full(ds.num_classes, n // ds.num_classes, dtype=int)
    want[: n % ds.num_classes] += 1
    take = np.minimum(want, sizes)
    # Redistribute shortfall to classes that still have spare samples.
    while take.sum() < n:
        spare = sizes - take
        grow = int(np.argmax(spare))
        take[grow] += 1
    chosen = np.concatenate([ix[:k] for ix, k in zip(class_idx, take)])
    chosen = chosen[rng.permutation(len(chosen))]
    return Dataset(ds.features[chosen], ds.labels[chosen], ds.num_classes)
