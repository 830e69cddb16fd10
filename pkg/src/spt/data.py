"""Dataset ingestion: IDX (FashionMNIST) and CIFAR-10 binary batches."""

from __future__ import annotations

import gzip
import hashlib
import logging
import os
import struct
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32
DATA_ROOT_ENV = "SPT_DATA_ROOT"


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    channels: int
    height: int
    width: int
    n_train: int
    n_valid: int
    n_test: int
    S: int
    n_classes: int = 10
    grad_clip: bool = True

    @property
    def n_dev(self) -> int:
        return self.n_train + self.n_valid

    @property
    def total(self) -> int:
        return self.n_dev + self.n_test


DATASETS = {
    "fashionmnist": DatasetSpec("fashionmnist", 1, 28, 28, 54_000, 6_000, 10_000, S=4),
    "cifar10": DatasetSpec("cifar10", 3, 32, 32, 47_500, 2_500, 10_000, S=4, grad_clip=False),
}

FASHION_MNIST_FILES = {
    "train_images": ("train-images-idx3-ubyte.gz", "8d4fb7e6c68d591d4c3dfef9ec88bf0d"),
    "train_labels": ("train-labels-idx1-ubyte.gz", "25c81989df183df01b3e8a0aad5dffbe"),
    "test_images": ("t10k-images-idx3-ubyte.gz", "bef4ecab320f06d8554ea6380940ec79"),
    "test_labels": ("t10k-labels-idx1-ubyte.gz", "bb300cfdad3c16e7a12a480ee83cd310"),
}
FASHION_MNIST_MIRROR = "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/"
CIFAR10_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"
CIFAR10_MD5 = "c32a1d4ab5d03f1284b67883e8d87530"


def data_root(root=None) -> Path:
    if root is not None:
        return Path(root)
    return Path(os.environ.get(DATA_ROOT_ENV, Path.home() / "data"))


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Raw uint8 contents of an IDX file (optionally gzipped)."""
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 8:
        raise DataError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IDX_IMAGES_MAGIC:
        ndim = 3
    elif magic == IDX_LABELS_MAGIC:
        ndim = 1
    else:
        raise DataError(f"{path}: bad magic number {magic:#010x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise DataError(f"{path}: truncated payload, expected {count} bytes")
    return np.frombuffer(raw, np.uint8, count, header).reshape(dims)


def load_idx(path, expect: str | None = None) -> np.ndarray:
    """Images come back as float32 in [0, 1], labels as int64."""
    data = read_idx(path)
    kind = "images" if data.ndim == 3 else "labels"
    if expect is not None and kind != expect:
        raise DataError(f"{path}: bad magic number, expected {expect} but found {kind}")
    if kind == "images":
        return data.astype(np.float32) / 255.0
    return data.astype(np.int64)


def write_idx(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = IDX_IMAGES_MAGIC if array.ndim == 3 else IDX_LABELS_MAGIC
    payload = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(payload)


def load_idx_pair(images_path, labels_path, n_classes: int = 10):
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise DataError(f"{images_path}: bad magic number, not an image file")
    if labels.ndim != 1:
        raise DataError(f"{labels_path}: bad magic number, not a label file")
    if len(images) != len(labels):
        raise DataError(f"{len(images)} images but {len(labels)} labels")
    if labels.max(initial=0) >= n_classes:
        raise DataError("label out of range")
    return images, labels.astype(np.int64)


def parse_cifar_batch(raw: bytes, name: str = "batch"):
    """Split 3073-byte records into uint8 ``(N, 3, 32, 32)`` images and labels."""
    if len(raw) % CIFAR_RECORD:
        raise DataError(f"{name}: truncated record ({len(raw)} bytes)")
    records = np.frombuffer(raw, np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max(initial=0) >= 10:
        raise DataError(f"{name}: label >= 10")
    return records[:, 1:].reshape(-1, 3, 32, 32).copy(), labels


def serialize_cifar_batch(images: np.ndarray, labels: np.ndarray) -> bytes:
    images = np.asarray(images, dtype=np.uint8).reshape(len(images), -1)
    return np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1).tobytes()


def load_cifar10_raw(path_dir):
    """uint8 train and test arrays from a ``cifar-10-batches-bin`` directory."""
    path_dir = Path(path_dir)
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]
    missing = [n for n in names if not (path_dir / n).exists()]
    if missing:
        raise DataError(f"{path_dir}: missing {', '.join(missing)}")
    parts = [parse_cifar_batch((path_dir / n).read_bytes(), n) for n in names]
    train_x = np.concatenate([p[0] for p in parts[:5]])
    train_y = np.concatenate([p[1] for p in parts[:5]])
    return (train_x, train_y), parts[5]


def load_cifar10(path_dir):
    """Float32 images in [0, 1]: ``((train_x, train_y), (test_x, test_y))``."""
    (tx, ty), (sx, sy) = load_cifar10_raw(path_dir)
    return (tx.astype(np.float32) / 255.0, ty), (sx.astype(np.float32) / 255.0, sy)


def split(n_dev: int, n_valid: int, seed: int):
    """Random disjoint train/validation index sets over ``range(n_dev)``."""
    if not 0 < n_valid < n_dev:
        raise DataError(f"cannot take {n_valid} validation items from {n_dev}")
    perm = np.random.default_rng(seed).permutation(n_dev)
    return np.sort(perm[n_valid:]), np.sort(perm[:n_valid])


def to_rgb(images) -> np.ndarray:
    """``(N, C, H, W)`` or ``(N, H, W)`` uint8/float -> float32 ``(N, 3, H, W)`` in [0, 1]."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[:, None]
    if images.dtype == np.uint8:
        images = images.astype(np.float32) / 255.0
    else:
        images = images.astype(np.float32, copy=False)
    if images.shape[1] == 1:
        images = np.repeat(images, 3, axis=1)
    return images


@dataclass
class ImageSet:
    images: np.ndarray  # uint8 (N, C, H, W)
    labels: np.ndarray  # int64 (N,)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "ImageSet":
        return ImageSet(self.images[idx], self.labels[idx])


@dataclass
class DatasetSplits:
    spec: DatasetSpec
    train: ImageSet
    valid: ImageSet
    test: ImageSet


def _fashion_paths(root: Path):
    out = {}
    for key, (name, _) in FASHION_MNIST_FILES.items():
        gz, plain = root / name, root / name[:-3]
        out[key] = gz if gz.exists() else plain
    return out


def load_dataset(name: str, root=None, seed: int = 0) -> DatasetSplits:
    """Load a dataset from ``<root>/<name>`` and split its development set."""
    spec = DATASETS[name]
    base = data_root(root) / name
    if name == "fashionmnist":
        paths = _fashion_paths(base)
        if not paths["train_images"].exists():
            raise DataError(f"FashionMNIST not found under {base}; run `spt fetch` or set {DATA_ROOT_ENV}")
        dev_x, dev_y = load_idx_pair(paths["train_images"], paths["train_labels"])
        test_x, test_y = load_idx_pair(paths["test_images"], paths["test_labels"])
        dev_x, test_x = dev_x[:, None], test_x[:, None]
    else:
        batches = base / "cifar-10-batches-bin"
        (dev_x, dev_y), (test_x, test_y) = load_cifar10_raw(batches if batches.exists() else base)
    if len(dev_y) != spec.n_dev or len(test_y) != spec.n_test:
        raise DataError(f"{name}: expected {spec.n_dev}/{spec.n_test} dev/test items, "
                        f"found {len(dev_y)}/{len(test_y)}")
    train_idx, valid_idx = split(spec.n_dev, spec.n_valid, seed)
    dev = ImageSet(dev_x, dev_y)
    return DatasetSplits(spec, dev.subset(train_idx), dev.subset(valid_idx), ImageSet(test_x, test_y))


def _md5(path: Path) -> str:
    h = hashlib.md5()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _download(url: str, dest: Path, md5: str) -> None:
    if dest.exists() and _md5(dest) == md5:
        return
    log.info("downloading %s", url)
    tmp = dest.with_name(dest.name + ".part")
    urllib.request.urlretrieve(url, tmp)
    if _md5(tmp) != md5:
        tmp.unlink()
        raise DataError(f"checksum mismatch for {url}")
    tmp.replace(dest)


def fetch(name: str, root=None) -> Path:
    """Download a dataset from its canonical mirror, verifying checksums."""
    base = data_root(root) / name
    base.mkdir(parents=True, exist_ok=True)
    if name == "fashionmnist":
        for fname, md5 in FASHION_MNIST_FILES.values():
            _download(FASHION_MNIST_MIRROR + fname, base / fname, md5)
    elif name == "cifar10":
        import tarfile

        archive = base / "cifar-10-binary.tar.gz"
        _download(CIFAR10_URL, archive, CIFAR10_MD5)
        with tarfile.open(archive) as tar:
            tar.extractall(base)
    else:
        raise DataError(f"unknown dataset {name!r}")
    return base
