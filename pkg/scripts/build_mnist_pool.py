#!/usr/bin/env python3
"""Build the bundled 10k MNIST pool as gzipped IDX files.

Source: the per-digit JSON files shipped in the npm ``mnist`` package
(``npm pack mnist``; 10,000 real MNIST digits stored as pixel/255 rounded to
3 decimals). ``round(v * 255)`` recovers the original unsigned bytes exactly.

The digits are written in one fixed shuffled order (seed 0) so that
contiguous index ranges are class-balanced; the loaders rely on that.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python scripts/build_mnist_pool.py package/src/digits src/ieslab/data
"""
import argparse
import gzip
import json
import struct
from pathlib import Path

import numpy as np


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    args = ap.parse_args()

    images, labels = [], []
    for digit in range(10):
        with open(args.digits_dir / f"{digit}.json") as f:
            flat = np.asarray(json.load(f)["data"], dtype=np.float64)
        rows = flat.reshape(-1, 784)
        images.append(np.rint(rows * 255.0).astype(np.uint8))
        labels.append(np.full(len(rows), digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)

    order = np.random.default_rng(0).permutation(len(labels))
    images, labels = images[order], labels[order]
    n = len(labels)

    args.out_dir.mkdir(parents=True, exist_ok=True)
    # mtime=0 keeps the archives byte-reproducible
    with gzip.GzipFile(args.out_dir / "mnist10k-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, n, 28, 28))
        f.write(images.tobytes())
    with gzip.GzipFile(args.out_dir / "mnist10k-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, n))
        f.write(labels.tobytes())
    print(f"wrote {n} digits, class counts {np.bincount(labels).tolist()}")


if __name__ == "__main__":
    main()
