#!/usr/bin/env python3
"""Convert the 10,000 MNIST digits bundled in the `mnist` npm package to IDX.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_subset_to_idx.py package/src/digits data/mnist

The npm package stores digits grouped by class with pixel values in [0, 1]
rounded to three decimals. Samples are interleaved with a fixed-seed
permutation so that a positional train/gold split sees every class.
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

SIZE = 28 * 28


def main(src: Path, dst: Path) -> None:
    samples = []
    for digit in range(10):
        raw = json.loads((src / f"{digit}.json").read_text())["data"]
        for start in range(0, len(raw) - SIZE + 1, SIZE):
            pixels = bytes(min(255, max(0, round(v * 255))) for v in raw[start:start + SIZE])
            samples.append((pixels, digit))
    random.Random(20240601).shuffle(samples)

    dst.mkdir(parents=True, exist_ok=True)
    n = len(samples)
    with gzip.GzipFile(dst / "train-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, n, 28, 28))
        for pixels, _ in samples:
            f.write(pixels)
    with gzip.GzipFile(dst / "train-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, n))
        f.write(bytes(label for _, label in samples))
    print(f"wrote {n} samples to {dst}")


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
