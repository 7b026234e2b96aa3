"""Regenerate the bundled MNIST sample under src/onenet/sample_data/.

Source: the 5,000-image MNIST excerpt shipped inside the mlxtend wheel
(``mlxtend/data/data/mnist_5k.csv.gz``; 784 pixel columns then the label).
Split: class-stratified 4,000 train / 1,000 test, seed 0.

    pip download --no-deps mlxtend==0.24.0 -d /tmp/wheels
    python tools/make_mnist_sample.py /tmp/wheels/mlxtend-0.24.0-py3-none-any.whl
"""

import gzip
import io
import sys
import zipfile
from pathlib import Path

import numpy as np

from onenet.data import Dataset, subset, write_idx

OUT = Path(__file__).resolve().parents[1] / "src" / "onenet" / "sample_data"


def main(wheel):
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    images = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    labels = table[:, -1].astype(np.uint8)
    # carry row indices through subset() in place of pixels
    rows = np.arange(len(labels), dtype=np.float32).reshape(-1, 1, 1, 1)
    picked = subset(Dataset(rows, labels.astype(np.int64), 10), 1000, seed=0)
    test_idx = picked.images.reshape(-1).astype(np.int64)
    train_idx = np.setdiff1d(np.arange(len(labels)), test_idx)
    OUT.mkdir(parents=True, exist_ok=True)
    for split, idx in (("train", train_idx), ("test", test_idx)):
        write_idx(OUT / f"mnist-sample-{split}-images-idx3-ubyte.gz", images[idx])
        write_idx(OUT / f"mnist-sample-{split}-labels-idx1-ubyte.gz", labels[idx])
        print(split, len(idx), np.bincount(labels[idx], minlength=10))



if __name__ == "__main__":
    main(sys.argv[1])
