"""IDX (MNIST, FashionMNIST) and CIFAR-10 binary loaders.

Images come back as float arrays shaped (N, H, W, C) scaled by 1/255.
"""

from __future__ import annotations

import gzip
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import TRAIN_DTYPE

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049
CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_PER_FILE = 10_000

DATA_DIR_VARS = ("TEMPERED_DP_DATA_DIR", "DATA_DIR")


class DataFormatError(ValueError):
    def __init__(self, path, offset, message):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: byte offset {offset}: {message}")


@dataclass
class DatasetSplit:
    images: np.ndarray
    labels: np.ndarray
    name: str = ""
    role: str = ""

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, n):
        if n is None or n >= len(self):
            return self
        return DatasetSplit(self.images[:n], self.labels[:n], self.name, self.role)

    def as_tuple(self):
        return self.images, self.labels


def _read(path) -> bytes:
    path = Path(path)
    if not path.exists() and Path(str(path) + ".gz").exists():
        path = Path(str(path) + ".gz")
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, path, magic: int, ndim: int) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(path, len(raw), f"truncated header ({header} bytes needed)")
    got = int.from_bytes(raw[:4], "big")
    if got != magic:
        raise DataFormatError(path, 0, f"bad magic {got}, expected {magic}")
    dims = [int.from_bytes(raw[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim)]
    need = header + int(np.prod(dims))
    if len(raw) < need:
        raise DataFormatError(path, len(raw), f"truncated data: {need} bytes expected for dims {dims}")
    if len(raw) > need:
        raise DataFormatError(path, need, f"{len(raw) - need} trailing bytes")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(path_images, path_labels, name="", role="", dtype=TRAIN_DTYPE) -> DatasetSplit:
    imgs = _parse_idx(_read(path_images), path_images, IDX_IMAGE_MAGIC, 3)
    labels = _parse_idx(_read(path_labels), path_labels, IDX_LABEL_MAGIC, 1)
    if imgs.shape[0] != labels.shape[0]:
        raise DataFormatError(
            path_labels, 4, f"{labels.shape[0]} labels for {imgs.shape[0]} images"
        )
    images = (imgs.astype(dtype) / dtype(255))[..., None]
    return DatasetSplit(images, labels.astype(np.int64), name, role)


def load_cifar_file(path, dtype=TRAIN_DTYPE):
    raw = _read(path)
    if len(raw) % CIFAR_RECORD:
        raise DataFormatError(
            path, len(raw) - len(raw) % CIFAR_RECORD,
            f"length {len(raw)} is not a multiple of {CIFAR_RECORD}",
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DataFormatError(path, int(bad[0]) * CIFAR_RECORD, f"label {labels[bad[0]]} > 9")
    planes = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return (planes.astype(dtype) / dtype(255)), labels


def _cifar_root(directory):
    d = Path(directory)
    for cand in (d, d / "cifar-10-batches-bin"):
        if (cand / "test_batch.bin").exists() or (cand / "test_batch.bin.gz").exists():
            return cand
    return d


def load_cifar10(directory, dtype=TRAIN_DTYPE):
    """(train, test) splits from the five data batches and the test batch."""
    root = _cifar_root(directory)
    parts = [load_cifar_file(root / f"data_batch_{i}.bin", dtype) for i in range(1, 6)]
    train = DatasetSplit(
        np.concatenate([p[0] for p in parts]),
        np.concatenate([p[1] for p in parts]),
        "cifar10", "train",
    )
    xt, yt = load_cifar_file(root / "test_batch.bin", dtype)
    return train, DatasetSplit(xt, yt, "cifar10", "test")


IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
DATASET_DIRS = {"mnist": "mnist", "fashion-mnist": "fashion-mnist", "cifar10": "cifar10"}


def resolve_data_dir(flag=None) -> Path | None:
    if flag:
        return Path(flag)
    for var in DATA_DIR_VARS:
        if os.environ.get(var):
            return Path(os.environ[var])
    return None


def load_dataset(name: str, data_dir, dtype=TRAIN_DTYPE):
    """(train, test) for ``mnist``, ``fashion-mnist`` or ``cifar10`` under ``data_dir``."""
    if name not in DATASET_DIRS:
        raise ValueError(f"unknown dataset {name!r}; expected one of {sorted(DATASET_DIRS)}")
    if data_dir is None:
        raise FileNotFoundError(
            f"no data directory: pass --data-dir or set {DATA_DIR_VARS[0]}"
        )
    root = Path(data_dir) / DATASET_DIRS[name]
    if name == "cifar10":
        return load_cifar10(root, dtype)
    out = []
    for role in ("train", "test"):
        img, lab = IDX_FILES[role]
        out.append(load_idx(root / img, root / lab, name, role, dtype))
    return tuple(out)


def dataset_available(name: str, data_dir) -> bool:
    try:
        root = Path(data_dir) / DATASET_DIRS[name]
    except TypeError:
        return False
    if name == "cifar10":
        r = _cifar_root(root)
        return all(
            (r / f).exists() or (r / (f + ".gz")).exists()
            for f in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]
        )
    return all(
        (root / f).exists() or (root / (f + ".gz")).exists()
        for pair in IDX_FILES.values() for f in pair
    )
