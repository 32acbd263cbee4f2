"""Rebuild the bundled MNIST IDX files from the npm ``mnist`` package.

Usage: npm pack mnist && tar xzf mnist-*.tgz
       python tools/build_bundled_mnist.py package/src/digits

The npm package stores 10,000 MNIST digits as JSON floats rounded to three
decimals; rounding ``v * 255`` recovers the original bytes exactly.
"""
import json
import sys
from pathlib import Path

import numpy as np

from capsrem.data import Dataset, write_idx

OUT = Path(__file__).resolve().parents[1] / "src" / "capsrem" / "datasets"


def main(digits_dir):
    images, labels = [], []
    for d in range(10):
        values = np.array(json.loads(Path(digits_dir, f"{d}.json").read_text())["data"], dtype=np.float64)
        block = values.reshape(-1, 28, 28)
        images.append(np.rint(block * 255))
        labels.append(np.full(len(block), d))
    pixels = np.concatenate(images)
    ds = Dataset((pixels / 255.0).astype(np.float32)[:, None], np.concatenate(labels).astype(np.int64), 10, "mnist10k")
    write_idx(ds, OUT / "mnist10k-images-idx3-ubyte.gz", OUT / "mnist10k-labels-idx1-ubyte.gz")
    print(f"wrote {len(ds)} samples to {OUT}")


if __name__ == "__main__":
    main(sys.argv[1])
