#!/usr/bin/env python3
"""Convert the digit JSON bundled in the `mnist` npm package (10,000 MNIST
digits, pixels stored as value/255 rounded to 3 decimals) into standard IDX
files.

Usage: npm pack mnist && tar xzf mnist-*.tgz
       python3 scripts/mnist_from_npm.py package/src/digits data/mnist
"""
import json
import struct
import sys
from pathlib import Path


def main(src: Path, dst: Path) -> None:
    per_class = []
    for digit in range(10):
        raw = json.loads((src / f"{digit}.json").read_text())["data"]
        n = len(raw) // 784
        per_class.append([raw[i * 784:(i + 1) * 784] for i in range(n)])

    # Round-robin interleave so any prefix is roughly class balanced.
    images, labels = [], []
    cursor = [0] * 10
    while any(cursor[d] < len(per_class[d]) for d in range(10)):
        for d in range(10):
            if cursor[d] < len(per_class[d]):
                images.append(per_class[d][cursor[d]])
                labels.append(d)
                cursor[d] += 1

    dst.mkdir(parents=True, exist_ok=True)
    with open(dst / "images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(min(255, max(0, round(v * 255))) for v in img))
    with open(dst / "labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))
    print(f"wrote {len(images)} images to {dst}")


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
