#!/usr/bin/env python3
"""Write the 5000-sample MNIST subset shipped with mlxtend as IDX files.

usage: make_mnist_subset_idx.py <mnist_5k.csv.gz> <out_dir>

The csv holds one image per row (784 pixels 0..255, then the label), sorted
by class with 500 rows per class. The first 400 rows of each class become
the training split and the last 100 the test split; both splits interleave
classes round-robin so any prefix is class balanced.
"""
import gzip
import os
import struct
import sys

import numpy as np


def write_idx(path, magic, array):
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        for d in array.shape:
            f.write(struct.pack(">I", d))
        f.write(array.astype(np.uint8).tobytes())


def main():
    src, out = sys.argv[1], sys.argv[2]
    rows = np.genfromtxt(gzip.open(src), delimiter=",").astype(np.int64)
    pixels, labels = rows[:, :-1], rows[:, -1]
    assert pixels.shape == (5000, 784) and pixels.min() >= 0 and pixels.max() <= 255
    by_class = [np.flatnonzero(labels == c) for c in range(10)]
    train = np.stack([idx[:400] for idx in by_class], axis=1).reshape(-1)
    test = np.stack([idx[400:] for idx in by_class], axis=1).reshape(-1)
    os.makedirs(out, exist_ok=True)
    for name, idx in (("train", train), ("test", test)):
        write_idx(os.path.join(out, f"{name}-images-idx3-ubyte"), 0x803, pixels[idx].reshape(-1, 28, 28))
        write_idx(os.path.join(out, f"{name}-labels-idx1-ubyte"), 0x801, labels[idx])


if __name__ == "__main__":
    main()
