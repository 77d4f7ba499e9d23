"""Dataset loaders: IDX (MNIST family), CIFAR-10 binary batches, synthetic blobs."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
MNIST_MEAN, MNIST_STD = (0.1307,), (0.3081,)
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)
CIFAR_RECORD = 3073

DATA_DIR = Path(__file__).resolve().parents[2] / "data"


class FormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int = 10
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise FormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise FormatError("label outside class range")

    def __len__(self):
        return len(self.labels)

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.num_classes, self.split, dict(self.meta))


def _read(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def normalize(pixels: np.ndarray, mean, std) -> np.ndarray:
    """``uint8`` NCHW pixels to ``(p / 255 - mean) / std`` per channel."""
    x = pixels.astype(np.float64) / 255.0
    m = np.asarray(mean, dtype=np.float64).reshape(1, -1, 1, 1)
    s = np.asarray(std, dtype=np.float64).reshape(1, -1, 1, 1)
    return (x - m) / s


def denormalize(images: np.ndarray, mean, std) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float64).reshape(1, -1, 1, 1)
    s = np.asarray(std, dtype=np.float64).reshape(1, -1, 1, 1)
    return np.rint((images * s + m) * 255.0).clip(0, 255).astype(np.uint8)


def read_idx(path) -> np.ndarray:
    """Raw array stored in an IDX file (optionally gzip-compressed)."""
    raw = _read(path)
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise FormatError(f"{path}: bad magic 0x{magic:08x}")
    ndim = magic & 0xFF
    if len(raw) < 4 + 4 * ndim:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    count = int(np.prod(dims))
    body = raw[4 + 4 * ndim :]
    if len(body) < count:
        raise FormatError(f"{path}: truncated payload ({len(body)} of {count} bytes)")
    return np.frombuffer(body[:count], np.uint8).reshape(dims)


def write_idx(path, array: np.ndarray, compress: bool = False) -> None:
    a = np.ascontiguousarray(array, dtype=np.uint8)
    magic = IDX_IMAGES if a.ndim == 3 else IDX_LABELS
    if a.ndim not in (1, 3):
        raise ValueError("IDX writer handles label vectors and image stacks only")
    data = struct.pack(">I", magic) + struct.pack(f">{a.ndim}I", *a.shape) + a.tobytes()
    if compress:
        data = gzip.compress(data, mtime=0)
    Path(path).write_bytes(data)


def load_idx(images_path, labels_path=None, mean=MNIST_MEAN, std=MNIST_STD, split="train",
             num_classes=10) -> Dataset:
    """Load an IDX image file (and matching label file) into a dataset."""
    imgs = read_idx(images_path)
    if imgs.ndim != 3:
        raise FormatError(f"{images_path}: expected a 3-D image file")
    if labels_path is None:
        labels = np.zeros(len(imgs), np.int64)
    else:
        labels = read_idx(labels_path)
        if labels.ndim != 1:
            raise FormatError(f"{labels_path}: expected a label file")
        if len(labels) != len(imgs):
            raise FormatError(f"{len(imgs)} images but {len(labels)} labels")
    x = normalize(imgs[:, None], mean, std)
    meta = {"mean": list(mean), "std": list(std), "source": str(images_path)}
    return Dataset(x, labels.astype(np.int64), num_classes, split, meta)


def load_cifar_bin(path, mean=CIFAR_MEAN, std=CIFAR_STD, split="train") -> Dataset:
    """Load a CIFAR-10 binary batch (records of 1 label byte + 3072 pixels)."""
    raw = _read(path)
    if len(raw) % CIFAR_RECORD:
        raise FormatError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise FormatError(f"{path}: label byte {labels.max()} outside 0..9")
    pixels = rec[:, 1:].reshape(-1, 3, 32, 32)
    meta = {"mean": list(mean), "std": list(std), "source": str(path)}
    return Dataset(normalize(pixels, mean, std), labels, 10, split, meta)


def cifar_records(ds: Dataset) -> bytes:
    """Re-serialize a CIFAR dataset in the binary batch layout."""
    pixels = denormalize(ds.images, ds.meta["mean"], ds.meta["std"]).reshape(len(ds), -1)
    return np.concatenate([ds.labels.astype(np.uint8)[:, None], pixels], axis=1).tobytes()


def synth_blobs(n: int, classes: int = 2, dim: int = 2, seed: int = 0, separation: float = 10.0,
                sigma: float = 1.0, split: str = "train") -> Dataset:
    """Gaussian clusters whose centres sit at least ``separation * sigma`` apart."""
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    gap = separation * sigma
    # rejection sampling in a box that grows until every pair of centres clears the gap
    radius = gap
    centres = np.empty((0, dim))
    while len(centres) < classes:
        for _ in range(1000):
            c = rng.uniform(-radius, radius, dim)
            if not len(centres) or np.min(np.linalg.norm(centres - c, axis=1)) >= gap:
                centres = np.vstack([centres, c])
                break
        else:
            radius *= 1.5
    labels = rng.integers(0, classes, n)
    x = centres[labels] + sigma * rng.standard_normal((n, dim))
    meta = {"separation": separation, "sigma": sigma, "seed": seed}
    return Dataset(x, labels.astype(np.int64), classes, split, meta)


def mnist_subset(root=None, train_size=None, test_size=None) -> tuple[Dataset, Dataset]:
    """The bundled 4k/1k MNIST subset (``data/mnist5k``)."""
    root = Path(root) if root else DATA_DIR / "mnist5k"
    tr = load_idx(root / "train-images-idx3-ubyte.gz", root / "train-labels-idx1-ubyte.gz", split="train")
    te = load_idx(root / "t10k-images-idx3-ubyte.gz", root / "t10k-labels-idx1-ubyte.gz", split="test")
    if train_size:
        tr = tr.subset(train_size)
    if test_size:
        te = te.subset(test_size)
    return tr, te
