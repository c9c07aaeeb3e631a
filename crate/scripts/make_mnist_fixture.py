"""Build the desk-scale MNIST IDX fixture under data/.

Source: the 5,000-sample MNIST subset shipped with mlxtend
(mlxtend/data/data/mnist_5k.csv.gz, 500 images per digit, raw 0-255 bytes).
Usage: python3 scripts/make_mnist_fixture.py path/to/mlxtend-*.whl
"""
import gzip
import hashlib
import io
import os
import struct
import sys
import zipfile

import numpy as np

TRAIN, TEST = 2000, 1000


def write_images(path, images):
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, rows, cols))
        f.write(images.astype(np.uint8).tobytes())


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main():
    wheel = zipfile.ZipFile(sys.argv[1])
    raw = gzip.decompress(wheel.read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",").astype(np.int64)
    pixels, labels = table[:, :784], table[:, 784]
    order = np.random.RandomState(20240601).permutation(len(labels))
    pixels, labels = pixels[order], labels[order]
    out = os.path.join(os.path.dirname(__file__), "..", "data")
    splits = {
        "train": (0, TRAIN),
        "test": (TRAIN, TRAIN + TEST),
    }
    for name, (lo, hi) in splits.items():
        write_images(os.path.join(out, f"{name}-images-idx3-ubyte"), pixels[lo:hi].reshape(-1, 28, 28))
        write_labels(os.path.join(out, f"{name}-labels-idx1-ubyte"), labels[lo:hi])
    with open(os.path.join(out, "SHA256SUMS"), "w") as manifest:
        for name in sorted(os.listdir(out)):
            if name.endswith("ubyte"):
                digest = hashlib.sha256(open(os.path.join(out, name), "rb").read()).hexdigest()
                manifest.write(f"{digest}  {name}\n")


if __name__ == "__main__":
    main()
