"""Convert the per-class JSON dump of FashionMNIST into IDX files.

The JSON packaging (``{0..9}.json``, each ``{"data": [[784 ints], ...]}``)
does not carry the official train/test split. We take the first 6,000 images
of each class for training and the next 1,000 for testing, then interleave
classes with a fixed permutation so that prefixes are class-balanced.

    python scripts/prepare_fashion_json.py SRC_DIR OUT_DIR
"""

import argparse
import json
import struct
from pathlib import Path

import numpy as np

TRAIN_PER_CLASS = 6000
TEST_PER_CLASS = 1000


def _write(path, magic, arr):
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        for d in arr.shape:
            f.write(struct.pack(">I", d))
        f.write(arr.astype(np.uint8).tobytes())


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("src", type=Path, help="directory holding 0.json .. 9.json")
    ap.add_argument("out", type=Path)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    splits = {"train": ([], []), "test": ([], [])}
    for label in range(10):
        raw = json.loads((args.src / f"{label}.json").read_text())["data"]
        rows = np.asarray([r for r in raw if len(r) == 784], np.uint8)  # class 0 has 2 empty rows
        if rows.shape[0] < TRAIN_PER_CLASS + TEST_PER_CLASS or rows.shape[1] != 784:
            raise SystemExit(f"{label}.json: unexpected shape {rows.shape}")
        for role, sl in (("train", slice(0, TRAIN_PER_CLASS)),
                         ("test", slice(TRAIN_PER_CLASS, TRAIN_PER_CLASS + TEST_PER_CLASS))):
            splits[role][0].append(rows[sl])
            splits[role][1].append(np.full(sl.stop - sl.start, label, np.uint8))

    args.out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    names = {"train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
             "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")}
    for role, (imgs, labs) in splits.items():
        x = np.concatenate(imgs).reshape(-1, 28, 28)
        y = np.concatenate(labs)
        perm = rng.permutation(len(y))
        _write(args.out / names[role][0], 2051, x[perm])
        _write(args.out / names[role][1], 2049, y[perm])
        print(f"{role}: {len(y)} images -> {args.out}")


if __name__ == "__main__":
    main()
