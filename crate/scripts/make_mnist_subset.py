"""Build a small MNIST subset in IDX format from the 5,000-sample CSV that
ships inside the mlxtend wheel (500 images per digit).

Output (gzip-compressed IDX, 400 train / 100 test images per digit):
    data/mnist-5k/train-images-idx3-ubyte.gz   (4,000 images)
    data/mnist-5k/train-labels-idx1-ubyte.gz
    data/mnist-5k/t10k-images-idx3-ubyte.gz    (1,000 images)
    data/mnist-5k/t10k-labels-idx1-ubyte.gz

Usage:
    pip download mlxtend --no-deps -d /tmp/mlx
    python3 scripts/make_mnist_subset.py /tmp/mlx/mlxtend-*.whl data/mnist-5k
"""

import gzip
import random
import struct
import sys
import zipfile
from pathlib import Path

TRAIN_PER_CLASS = 400
SHUFFLE_SEED = 20240601


def read_rows(wheel):
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    rows = []
    for line in raw.decode().splitlines():
        vals = [int(v) for v in line.split(",")]
        rows.append((bytes(vals[:-1]), vals[-1]))
    return rows


def write_idx(out_dir, prefix, rows):
    images = struct.pack(">IIII", 2051, len(rows), 28, 28) + b"".join(r[0] for r in rows)
    labels = struct.pack(">II", 2049, len(rows)) + bytes(r[1] for r in rows)
    # mtime=0 keeps the archives byte-reproducible
    with open(out_dir / f"{prefix}-images-idx3-ubyte.gz", "wb") as f:
        f.write(gzip.compress(images, mtime=0))
    with open(out_dir / f"{prefix}-labels-idx1-ubyte.gz", "wb") as f:
        f.write(gzip.compress(labels, mtime=0))


def main():
    wheel, out_dir = sys.argv[1], Path(sys.argv[2])
    out_dir.mkdir(parents=True, exist_ok=True)
    by_class = {}
    for img, label in read_rows(wheel):
        by_class.setdefault(label, []).append((img, label))
    train, test = [], []
    for label in sorted(by_class):
        rows = by_class[label]
        train.extend(rows[:TRAIN_PER_CLASS])
        test.extend(rows[TRAIN_PER_CLASS:])
    rng = random.Random(SHUFFLE_SEED)
    rng.shuffle(train)
    rng.shuffle(test)
    write_idx(out_dir, "train", train)
    write_idx(out_dir, "t10k", test)
    print(f"wrote {len(train)} train / {len(test)} test images to {out_dir}")


if __name__ == "__main__":
    main()
