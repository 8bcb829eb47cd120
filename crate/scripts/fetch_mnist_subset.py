#!/usr/bin/env python3
"""Build a 10,000-sample MNIST subset in IDX format.

The npm package `mnist` ships 10k MNIST digits as JSON pixel arrays
(values already divided by 255 and rounded to 3 decimals). This script
downloads it through `npm pack`, re-quantizes pixels to bytes and writes
gzipped IDX files:

    data/mnist-10k/train-images-idx3-ubyte.gz
    data/mnist-10k/train-labels-idx1-ubyte.gz

Usage: python3 scripts/fetch_mnist_subset.py [--out data/mnist-10k] [--package-dir DIR]
"""
import argparse
import gzip
import json
import os
import struct
import subprocess
import tarfile
import tempfile


def load_digits(package_dir):
    images, labels = [], []
    for digit in range(10):
        with open(os.path.join(package_dir, "src", "digits", f"{digit}.json")) as fh:
            raw = json.load(fh)["data"]
        count = len(raw) // 784
        for i in range(count):
            px = raw[i * 784:(i + 1) * 784]
            images.append(bytes(min(255, max(0, int(round(v * 255.0)))) for v in px))
            labels.append(digit)
    return images, labels


def write_idx(out_dir, images, labels):
    os.makedirs(out_dir, exist_ok=True)
    with gzip.GzipFile(os.path.join(out_dir, "train-images-idx3-ubyte.gz"), "wb", mtime=0) as fh:
        fh.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            fh.write(img)
    with gzip.GzipFile(os.path.join(out_dir, "train-labels-idx1-ubyte.gz"), "wb", mtime=0) as fh:
        fh.write(struct.pack(">II", 0x00000801, len(labels)))
        fh.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..", "data", "mnist-10k"))
    ap.add_argument("--package-dir", default=None, help="already-extracted npm package directory")
    args = ap.parse_args()

    if args.package_dir:
        images, labels = load_digits(args.package_dir)
    else:
        with tempfile.TemporaryDirectory() as tmp:
            subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=tmp, check=True, stdout=subprocess.DEVNULL)
            with tarfile.open(os.path.join(tmp, "mnist-1.1.0.tgz")) as tf:
                tf.extractall(tmp)
            images, labels = load_digits(os.path.join(tmp, "package"))
    write_idx(args.out, images, labels)
    print(f"wrote {len(images)} samples to {os.path.abspath(args.out)}")


if __name__ == "__main__":
    main()
