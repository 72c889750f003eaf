"""Write the 5,000-image MNIST subset bundled with mlxtend as gzipped IDX files.

Usage: python scripts/export_mnist_subset.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np
from mlxtend.data import mnist_data

from unn.harness.data import write_idx_images, write_idx_labels


def main(out_dir="data/mnist5k"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    X, y = mnist_data()
    images = np.asarray(X, dtype=np.uint8).reshape(-1, 28, 28)
    write_idx_images(images, out / "images-idx3-ubyte.gz")
    write_idx_labels(np.asarray(y, dtype=np.uint8), out / "labels-idx1-ubyte.gz")
    print(f"wrote {len(images)} images to {out}")


if __name__ == "__main__":
    main(*sys.argv[1:])
