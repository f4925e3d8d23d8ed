#!/usr/bin/env python3
"""Convert the digit samples shipped in the `mnist` npm package into IDX files.

The package (https://www.npmjs.com/package/mnist) bundles 10,000 MNIST
digits as JSON arrays of 784 grey levels in [0, 1]. This script rounds them
back to bytes and writes a deterministic 8000/2000 train/test split using the
standard MNIST filenames, so the loader sees ordinary IDX files.

usage: mnist_from_npm.py <package/src/digits dir> <output dir>
"""
import json
import os
import random
import struct
import sys


def write_idx_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    src, dst = sys.argv[1], sys.argv[2]
    samples = []
    for digit in range(10):
        with open(os.path.join(src, f"{digit}.json")) as f:
            flat = json.load(f)["data"]
        assert len(flat) % 784 == 0
        for i in range(0, len(flat), 784):
            px = [min(255, max(0, round(v * 255))) for v in flat[i : i + 784]]
            samples.append((px, digit))
    random.Random(0).shuffle(samples)
    train, test = samples[:8000], samples[8000:]
    os.makedirs(dst, exist_ok=True)
    write_idx_images(os.path.join(dst, "train-images-idx3-ubyte"), [s[0] for s in train])
    write_idx_labels(os.path.join(dst, "train-labels-idx1-ubyte"), [s[1] for s in train])
    write_idx_images(os.path.join(dst, "t10k-images-idx3-ubyte"), [s[0] for s in test])
    write_idx_labels(os.path.join(dst, "t10k-labels-idx1-ubyte"), [s[1] for s in test])
    print(f"wrote {len(train)} train / {len(test)} test samples to {dst}")


if __name__ == "__main__":
    main()
