#!/usr/bin/env python3
"""Write a class-balanced MNIST subset in IDX format.

The 5,000-image MNIST sample bundled with the mlxtend wheel (BSD-3) is used as
the source so no external download is required. The split is seeded and
stratified: `--train-per-class` images of each digit go to the training file,
the rest of that digit (up to `--test-per-class`) to the test file.
"""
import argparse
import gzip
import io
import pathlib
import struct
import subprocess
import sys
import tempfile
import zipfile

import numpy as np


def load_source(wheel: pathlib.Path | None) -> np.ndarray:
    if wheel is None:
        tmp = pathlib.Path(tempfile.mkdtemp())
        subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps",
                        "-d", str(tmp), "mlxtend==0.24.0"], check=True)
        wheel = next(tmp.glob("mlxtend-*.whl"))
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    return np.loadtxt(io.BytesIO(raw), delimiter=",").astype(np.uint8)


def write_images(path: pathlib.Path, images: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        f.write(images.astype(np.uint8).tobytes())


def write_labels(path: pathlib.Path, labels: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data/mnist")
    ap.add_argument("--wheel", type=pathlib.Path, default=None)
    ap.add_argument("--train-per-class", type=int, default=400)
    ap.add_argument("--test-per-class", type=int, default=100)
    ap.add_argument("--seed", type=int, default=2023)
    args = ap.parse_args()

    data = load_source(args.wheel)
    pixels, labels = data[:, :-1], data[:, -1]
    rng = np.random.default_rng(args.seed)
    train_idx, test_idx = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(labels == c))
        train_idx.extend(idx[:args.train_per_class])
        test_idx.extend(idx[args.train_per_class:args.train_per_class + args.test_per_class])
    train_idx = rng.permutation(train_idx)
    test_idx = rng.permutation(test_idx)

    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_images(out / "train-images-idx3-ubyte", pixels[train_idx])
    write_labels(out / "train-labels-idx1-ubyte", labels[train_idx])
    write_images(out / "t10k-images-idx3-ubyte", pixels[test_idx])
    write_labels(out / "t10k-labels-idx1-ubyte", labels[test_idx])
    print(f"wrote {len(train_idx)} train / {len(test_idx)} test images to {out}")


if __name__ == "__main__":
    main()
