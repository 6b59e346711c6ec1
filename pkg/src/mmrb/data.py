"""Dataset ingestion and handling: MNIST IDX files, CIFAR-10 binary batches,
augmentation, stratified subsetting, and a deterministic synthetic digit
corpus for running the full pipeline without external files.

All pixels are float64 in [0, 1]; perturbation budgets downstream are always
expressed on this scale.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError
from .util import STREAM_AUGMENT, STREAM_SPLIT, STREAM_SYNTH, derive_rng, sha256_file

Array = np.ndarray

# IDX format (big endian):
#   images: i32 magic 0x00000803, i32 count, i32 rows, i32 cols, u8 pixels
#   labels: i32 magic 0x00000801, i32 count, u8 labels
IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

# CIFAR-10 binary: records of 1 label byte + 3*1024 channel-planar pixel bytes
CIFAR_RECORD = 3073


@dataclass
class Dataset:
    images: Array                  # [n, h, w, c] in [0, 1]
    labels: Array                  # [n] ints in [0, k)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be [n,h,w,c], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError("image/label count mismatch")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("labels must be non-negative")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def take(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], dict(self.provenance))


def load_mnist(images_path, labels_path) -> Dataset:
    """Parse an IDX image/label file pair; counts are cross-checked."""
    with open(images_path, "rb") as f:
        header = f.read(16)
        if len(header) < 16:
            raise DataFormatError("image file header truncated")
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGE_MAGIC:
            raise DataFormatError(f"bad image magic 0x{magic:08x}")
        payload = f.read()
    if len(payload) != count * rows * cols:
        raise DataFormatError(f"image payload has {len(payload)} bytes, "
                              f"expected {count * rows * cols}")
    images = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols, 1) / 255.0

    with open(labels_path, "rb") as f:
        header = f.read(8)
        if len(header) < 8:
            raise DataFormatError("label file header truncated")
        magic, label_count = struct.unpack(">II", header)
        if magic != IDX_LABEL_MAGIC:
            raise DataFormatError(f"bad label magic 0x{magic:08x}")
        label_payload = f.read()
    if len(label_payload) != label_count:
        raise DataFormatError("label payload truncated")
    if label_count != count:
        raise DataFormatError(f"{count} images but {label_count} labels")
    labels = np.frombuffer(label_payload, dtype=np.uint8).astype(np.int64)
    return Dataset(images, labels, provenance={
        "images": sha256_file(images_path), "labels": sha256_file(labels_path)})


def save_mnist(dataset: Dataset, images_path, labels_path) -> None:
    """Re-encode a dataset as an IDX pair (inverse of load_mnist for byte
    -exact round trips of /255 data)."""
    n, h, w, c = dataset.images.shape
    if c != 1:
        raise ValueError("IDX image files are single-channel")
    pixels = np.round(dataset.images * 255.0).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def load_cifar10(paths) -> Dataset:
    """Parse CIFAR-10 binary batch files (3073-byte records)."""
    images, labels, provenance = [], [], {}
    for path in paths:
        with open(path, "rb") as f:
            blob = f.read()
        if len(blob) == 0 or len(blob) % CIFAR_RECORD != 0:
            raise DataFormatError(f"{path}: size {len(blob)} is not a multiple of {CIFAR_RECORD}")
        records = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        batch_labels = records[:, 0].astype(np.int64)
        if batch_labels.max() > 9:
            raise DataFormatError(f"{path}: label {batch_labels.max()} out of range")
        # channel-planar: 1024 red, 1024 green, 1024 blue
        planes = records[:, 1:].reshape(-1, 3, 32, 32)
        images.append(planes.transpose(0, 2, 3, 1) / 255.0)
        labels.append(batch_labels)
        provenance[str(path)] = sha256_file(path)
    return Dataset(np.concatenate(images), np.concatenate(labels), provenance)


def augment_cifar(images: Array, seed: int) -> Array:
    """Pad-4 random crop and horizontal flip with probability 1/2.

    Standardization is not applied here; it is the model's first fixed
    transform, so budgets stay in raw [0, 1] pixel space.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1:] != (32, 32, 3):
        raise ValueError(f"expected [n,32,32,3] images, got {images.shape}")
    rng = derive_rng(seed, STREAM_AUGMENT)
    n = len(images)
    padded = np.pad(images, ((0, 0), (4, 4), (4, 4), (0, 0)))
    out = np.empty_like(images)
    offsets = rng.integers(0, 9, size=(n, 2))
    flips = rng.random(n) < 0.5
    for i in range(n):
        oy, ox = offsets[i]
        crop = padded[i, oy:oy + 32, ox:ox + 32, :]
        out[i] = crop[:, ::-1, :] if flips[i] else crop
    return out


def subset_split(dataset: Dataset, n_train: int, n_eval: int, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded, class-stratified disjoint split."""
    n = len(dataset)
    if n_train + n_eval > n:
        raise ValueError(f"requested {n_train}+{n_eval} examples from {n}")
    rng = derive_rng(seed, STREAM_SPLIT)
    classes = np.unique(dataset.labels)
    per_class = [rng.permutation(np.flatnonzero(dataset.labels == c)) for c in classes]
    rank_order = [int(c) for c in rng.permutation(len(classes))]

    def draw(count: int, cursors: list[int]) -> list[int]:
        # equal shares per class, capped at availability (water filling), so
        # balanced pools split evenly (within one) and a full draw takes all
        avail = [len(per_class[ci]) - cursors[ci] for ci in range(len(classes))]
        quota = [0] * len(classes)
        remaining = count
        active = [ci for ci in rank_order if avail[ci] > 0]
        while remaining > 0:
            if not active:
                raise ValueError(f"only {count - remaining} examples available, need {count}")
            base, extra = divmod(remaining, len(active))
            still = []
            for rank, ci in enumerate(active):
                take = min(base + (1 if rank < extra else 0), avail[ci] - quota[ci])
                quota[ci] += take
                remaining -= take
                if quota[ci] < avail[ci]:
                    still.append(ci)
            active = still
        picked = []
        for ci in range(len(classes)):
            picked.extend(per_class[ci][cursors[ci]:cursors[ci] + quota[ci]])
            cursors[ci] += quota[ci]
        return picked

    cursors = [0] * len(classes)
    train_idx = np.array(sorted(draw(n_train, cursors)), dtype=np.int64)
    eval_idx = np.array(sorted(draw(n_eval, cursors)), dtype=np.int64)
    return dataset.take(train_idx), dataset.take(eval_idx)


# ---------------------------------------------------------------------------
# synthetic digit corpus
# ---------------------------------------------------------------------------
# Ten stroke glyphs on a 7x5 grid, upsampled to 28x28 with small shifts and
# intensity jitter. Strokes are near-saturated on a dark background and every
# template pair differs in at least 6 grid cells (54 pixels), so the classes
# stay separable under sizable pixel perturbations.

_GLYPHS = [
    ["#####", "#...#", "#...#", "#...#", "#...#", "#...#", "#####"],  # 0 ring
    ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],  # 1 bar
    ["#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"],  # 2 zig
    ["####.", "....#", "....#", ".###.", "....#", "....#", "####."],  # 3 bumps
    ["#..#.", "#..#.", "#..#.", "#####", "...#.", "...#.", "...#."],  # 4 cross
    ["#####", "#....", "#....", "####.", "....#", "#...#", ".###."],  # 5
    [".##..", "#....", "#....", "#.##.", "##..#", "#...#", ".###."],  # 6
    ["#####", "....#", "...#.", "..#..", "..#..", ".#...", ".#..."],  # 7 slash
    [".###.", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", ".###."],  # 8 knot
    [".####", "#...#", "#...#", ".####", "....#", "...#.", "##..."],  # 9 tail
]


def _glyph_array(g: list[str]) -> Array:
    return np.array([[1.0 if ch == "#" else 0.0 for ch in row] for row in g])


def make_digits(n: int, seed: int = 0) -> Dataset:
    """Deterministic 28x28 digit-glyph corpus with class-balanced labels,
    random placement, and intensity jitter. A desk-scale stand-in usable
    wherever a real IDX pair would be loaded."""
    rng = derive_rng(seed, STREAM_SYNTH)
    glyphs = [np.kron(_glyph_array(g), np.ones((3, 3))) for g in _GLYPHS]   # 21x15
    gh, gw = glyphs[0].shape
    cy, cx = (28 - gh) // 2, (28 - gw) // 2
    images = np.zeros((n, 28, 28, 1))
    labels = rng.integers(0, 10, size=n)
    for i in range(n):
        canvas = np.zeros((28, 28))
        glyph = glyphs[labels[i]]
        # centered placement with small jitter, like scanned digits
        oy = cy + rng.integers(-2, 3)
        ox = cx + rng.integers(-2, 3)
        # near-saturated strokes over a quiet background keep the classes
        # separable under sizable pixel perturbations
        intensity = rng.uniform(0.94, 1.0)
        stamp = glyph * intensity * rng.uniform(0.97, 1.0, size=glyph.shape)
        canvas[oy:oy + gh, ox:ox + gw] = stamp
        noise = rng.uniform(0.0, 0.04, size=(28, 28))
        canvas = np.clip(canvas + noise, 0.0, 1.0)
        images[i, :, :, 0] = np.round(canvas * 255.0) / 255.0   # quantize like file data
    return Dataset(images, labels, provenance={"synthetic": f"digits(seed={seed}, n={n})"})
