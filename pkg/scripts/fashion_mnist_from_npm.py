"""Rebuild FashionMNIST IDX files from the ``fashion-mnist`` npm package.

Fallback for machines where the canonical S3 mirror is unreachable but the npm
registry is not. The package stores 7,000 images per class as JSON lists of
784 bytes; the first 1,000 of each class are the published test images and
the remaining 6,000 the training images (class 0 carries two empty separator
entries, which are dropped).

    python scripts/fashion_mnist_from_npm.py fashion-mnist-1.1.0.tgz $SPT_DATA_ROOT/fashionmnist
"""

import argparse
import json
import tarfile
from pathlib import Path

import numpy as np

from spt.data import write_idx


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("tarball", type=Path)
    parser.add_argument("out_dir", type=Path)
    args = parser.parse_args()

    train_x, train_y, test_x, test_y = [], [], [], []
    with tarfile.open(args.tarball) as tar:
        for cls in range(10):
            member = tar.extractfile(f"package/src/clothes/{cls}.json")
            rows = [r for r in json.load(member)["data"] if len(r) == 784]
            if len(rows) != 7000:
                raise SystemExit(f"class {cls}: expected 7000 images, found {len(rows)}")
            images = np.asarray(rows, dtype=np.uint8).reshape(-1, 28, 28)
            test_x.append(images[:1000])
            train_x.append(images[1000:])
            test_y.append(np.full(1000, cls, dtype=np.uint8))
            train_y.append(np.full(6000, cls, dtype=np.uint8))

    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_idx(args.out_dir / "train-images-idx3-ubyte.gz", np.concatenate(train_x))
    write_idx(args.out_dir / "train-labels-idx1-ubyte.gz", np.concatenate(train_y))
    write_idx(args.out_dir / "t10k-images-idx3-ubyte.gz", np.concatenate(test_x))
    write_idx(args.out_dir / "t10k-labels-idx1-ubyte.gz", np.concatenate(test_y))
    print(f"wrote FashionMNIST IDX files to {args.out_dir}")


if __name__ == "__main__":
    main()
