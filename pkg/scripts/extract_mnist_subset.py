"""Rebuild data/mnist5k/ from the 5000-digit MNIST sample shipped in the mlxtend wheel.

Usage: python scripts/extract_mnist_subset.py path/to/mlxtend-*.whl [outdir]
"""

import gzip
import io
import sys
import zipfile
from pathlib import Path

import numpy as np

from vardfs.dataio import write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def main(wheel, outdir="data/mnist5k", n_train=4000, seed=20240601):
    raw = gzip.decompress(zipfile.ZipFile(wheel).read(MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",")
    images = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    labels = table[:, -1].astype(np.uint8)
    perm = np.random.default_rng(seed).permutation(len(labels))
    images, labels = images[perm], labels[perm]
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "train-images-idx3-ubyte.gz", images[:n_train])
    write_idx(out / "train-labels-idx1-ubyte.gz", labels[:n_train])
    write_idx(out / "t10k-images-idx3-ubyte.gz", images[n_train:])
    write_idx(out / "t10k-labels-idx1-ubyte.gz", labels[n_train:])


if __name__ == "__main__":
    main(*sys.argv[1:])
