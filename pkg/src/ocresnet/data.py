"""Datasets: MNIST IDX files, seeded Gaussian blobs, and batching.

Dataset sources are addressed by URI-like strings:

``blobs://CLASSES/SAMPLES_PER_CLASS/DIM/SPREAD/SEED``
    Gaussian clusters.  ``SEED`` fixes the cluster centers; the train and
    test splits draw independent samples around the same centers.
``idx://DIRECTORY``
    A directory holding the four standard MNIST files
    (``train-images-idx3-ubyte`` etc., optionally ``.gz``).
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
MNIST_MEAN = 0.1307
MNIST_STD = 0.3081

SPLITS = ("train", "test")
_IDX_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int = 10
    normalization: dict = field(default_factory=lambda: {"scheme": "none"})
    image_shape: tuple[int, ...] | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"features must be a nonempty [n, d] array, got {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError(
                f"{self.labels.shape[0] if self.labels.ndim else 0} labels for {self.features.shape[0]} samples")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> Dataset:
        indices = np.asarray(indices)
        return Dataset(self.features[indices], self.labels[indices], self.split,
                       self.num_classes, dict(self.normalization), self.image_shape)


def _open(path: Path):
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def _read_idx(path, expected_magic: int, what: str) -> tuple[tuple[int, ...], bytes]:
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} for {what} file, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    payload = raw[header_len:]
    expected = int(np.prod(dims))
    if len(payload) < expected:
        raise FormatError(f"{path}: truncated payload, {len(payload)} of {expected} bytes")
    if len(payload) > expected:
        raise FormatError(f"{path}: {len(payload) - expected} trailing bytes after payload")
    return dims, payload


def normalize_pixels(pixels: np.ndarray) -> np.ndarray:
    return (pixels.astype(np.float64) / 255.0 - MNIST_MEAN) / MNIST_STD


def denormalize_pixels(features: np.ndarray) -> np.ndarray:
    px = np.rint((features * MNIST_STD + MNIST_MEAN) * 255.0)
    if px.min() < 0 or px.max() > 255:
        raise ValueError("features do not map back into the 0..255 pixel range")
    return px.astype(np.uint8)


def load_idx(images_path, labels_path, split: str = "train", num_classes: int = 10) -> Dataset:
    """Read an IDX image/label pair, flatten images and standardize pixels."""
    dims, pix = _read_idx(images_path, IMAGES_MAGIC, "images")
    if len(dims) != 3:
        raise FormatError(f"{images_path}: expected 3 image dimensions, got {len(dims)}")
    (n_labels,), lab = _read_idx(labels_path, LABELS_MAGIC, "labels")
    if n_labels != dims[0]:
        raise FormatError(f"count mismatch: {dims[0]} images but {n_labels} labels")
    pixels = np.frombuffer(pix, dtype=np.uint8).reshape(dims[0], dims[1] * dims[2])
    labels = np.frombuffer(lab, dtype=np.uint8).astype(np.int64)
    norm = {"scheme": "mnist_standard", "mean": MNIST_MEAN, "std": MNIST_STD}
    return Dataset(normalize_pixels(pixels), labels, split, num_classes, norm, (dims[1], dims[2]))


def write_idx_arrays(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images ``[n, rows, cols]`` and labels ``[n]`` as an IDX pair."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.dtype != np.uint8 or images.ndim != 3:
        raise ValueError("images must be a uint8 [n, rows, cols] array")
    if labels.shape != (images.shape[0],) or labels.min() < 0 or labels.max() > 255:
        raise ValueError("labels must be n values in 0..255")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">4I", IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">2I", LABELS_MAGIC, labels.shape[0]))
        f.write(labels.astype(np.uint8).tobytes())


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Inverse of :func:`load_idx` for datasets holding standardized pixels."""
    if dataset.normalization.get("scheme") != "mnist_standard":
        raise ValueError("only datasets with standardized pixels can be written as IDX")
    shape = dataset.image_shape or (1, dataset.dim)
    pixels = denormalize_pixels(dataset.features).reshape(len(dataset), *shape)
    write_idx_arrays(pixels, dataset.labels, images_path, labels_path)


def write_idx_dir(train: Dataset, test: Dataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for split, ds in (("train", train), ("test", test)):
        img, lab = _IDX_NAMES[split]
        write_idx(ds, directory / img, directory / lab)
    return directory


def synth_blobs(num_classes: int, samples_per_class: int, dim: int, spread: float,
                seed: int, split: str = "train") -> Dataset:
    """Isotropic Gaussian clusters with standard-normal centers.

    Centers depend only on ``seed``; the samples of each split come from an
    independent stream so train and test share the same clusters.
    """
    if num_classes < 1 or samples_per_class < 1 or dim < 1 or spread < 0:
        raise ValueError("blobs need positive counts/dim and a nonnegative spread")
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    centers = np.random.default_rng(seed).normal(size=(num_classes, dim))
    rng = np.random.default_rng([seed, SPLITS.index(split) + 1])
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    noise = rng.normal(size=(labels.shape[0], dim))
    features = centers[labels] + spread * noise
    meta = {"scheme": "none", "source": f"blobs://{num_classes}/{samples_per_class}/{dim}/{spread!r}/{seed}"}
    return Dataset(features, labels, split, num_classes, meta)


def batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Seeded per-epoch permutation of ``range(n)`` cut into slices; last slice may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def parse_source(uri: str) -> dict:
    """Validate a dataset URI and return its parsed fields (no data is loaded)."""
    if not isinstance(uri, str):
        raise ConfigError(f"dataset source must be a string, got {type(uri).__name__}")
    if uri.startswith("blobs://"):
        parts = uri[len("blobs://"):].split("/")
        if len(parts) != 5:
            raise ConfigError(f"blobs URI needs CLASSES/SAMPLES/DIM/SPREAD/SEED, got {uri!r}")
        try:
            c, s, d = (int(p) for p in parts[:3])
            spread = float(parts[3])
            seed = int(parts[4])
        except ValueError:
            raise ConfigError(f"malformed blobs URI {uri!r}") from None
        if c < 1 or s < 1 or d < 1 or spread < 0:
            raise ConfigError(f"blobs URI {uri!r}: counts must be positive and spread nonnegative")
        return {"kind": "blobs", "num_classes": c, "samples_per_class": s, "dim": d,
                "spread": spread, "seed": seed}
    if uri.startswith("idx://"):
        directory = Path(uri[len("idx://"):])
        files = {}
        for split, names in _IDX_NAMES.items():
            found = []
            for name in names:
                candidates = [directory / name, directory / (name + ".gz")]
                hit = next((p for p in candidates if p.exists()), None)
                if hit is None:
                    raise ConfigError(f"dataset file not found: {directory / name}[.gz]")
                found.append(hit)
            files[split] = tuple(found)
        return {"kind": "idx", "files": files, "num_classes": 10, "dim": None}
    raise ConfigError(f"unknown dataset scheme in {uri!r}; expected blobs:// or idx://")


def load_source(uri: str, split: str) -> Dataset:
    if split not in SPLITS:
        raise ConfigError(f"split must be one of {SPLITS}, got {split!r}")
    src = parse_source(uri)
    if src["kind"] == "blobs":
        return synth_blobs(src["num_classes"], src["samples_per_class"], src["dim"],
                           src["spread"], src["seed"], split)
    img, lab = src["files"][split]
    return load_idx(img, lab, split)
