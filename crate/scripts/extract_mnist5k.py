#!/usr/bin/env python3
"""Write the 5,000-digit MNIST sample bundled in the mlxtend wheel as IDX files.

Usage: pip download --no-deps mlxtend -d /tmp/w
       python3 scripts/extract_mnist5k.py /tmp/w/mlxtend-*.whl data/mnist5k

The output is two gzip-compressed IDX files in the original MNIST layout
(big-endian magic 0x00000803 / 0x00000801).
"""
import gzip
import struct
import sys
import zipfile
from pathlib import Path


def main() -> None:
    wheel, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz")).decode()
    rows = [line.split(",") for line in raw.strip().splitlines()]
    pixels = bytearray()
    labels = bytearray()
    for row in rows:
        pixels.extend(int(v) for v in row[:-1])
        labels.append(int(row[-1]))
    n = len(rows)
    images = struct.pack(">IIII", 0x00000803, n, 28, 28) + bytes(pixels)
    label_file = struct.pack(">II", 0x00000801, n) + bytes(labels)
    # mtime=0 keeps the archives byte-reproducible
    with open(out / "images-idx3-ubyte.gz", "wb") as f:
        f.write(gzip.compress(images, mtime=0))
    with open(out / "labels-idx1-ubyte.gz", "wb") as f:
        f.write(gzip.compress(label_file, mtime=0))
    print(f"wrote {n} images to {out}")


if __name__ == "__main__":
    main()
