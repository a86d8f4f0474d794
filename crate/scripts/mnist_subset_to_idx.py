#!/usr/bin/env python3
"""Convert the 5000-digit MNIST sample bundled with the `mlxtend` wheel into
IDX files (train-images-idx3-ubyte / train-labels-idx1-ubyte layout).

    pip download mlxtend --no-deps -d /tmp/mlx
    python3 scripts/mnist_subset_to_idx.py /tmp/mlx/mlxtend-*.whl data/mnist5k
"""
import gzip
import os
import struct
import sys
import zipfile


def main():
    wheel, out_dir = sys.argv[1], sys.argv[2]
    raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    rows = gzip.decompress(raw).decode().strip().split("\n")
    pixels, labels = bytearray(), bytearray()
    for row in rows:
        values = [int(float(v)) for v in row.split(",")]
        assert len(values) == 785
        pixels.extend(values[:784])
        labels.append(values[784])
    n = len(rows)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "images-idx3-ubyte"), "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        f.write(pixels)
    with open(os.path.join(out_dir, "labels-idx1-ubyte"), "wb") as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(labels)
    print(f"wrote {n} digits to {out_dir}")


if __name__ == "__main__":
    main()
