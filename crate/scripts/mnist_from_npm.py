"""Convert the digit JSON files shipped by the npm `mnist` package into gzipped IDX files.

Usage: python3 scripts/mnist_from_npm.py <package>/src/digits data/mnist
"""

import gzip
import json
import struct
import sys
from pathlib import Path

SIDE = 28


def load(digits_dir):
    per_class = []
    for label in range(10):
        flat = json.loads((digits_dir / f"{label}.json").read_text())["data"]
        count = len(flat) // (SIDE * SIDE)
        images = [flat[i * SIDE * SIDE:(i + 1) * SIDE * SIDE] for i in range(count)]
        per_class.append(images)
    # Round-robin over classes so any prefix is roughly balanced.
    out = []
    longest = max(len(c) for c in per_class)
    for i in range(longest):
        for label, images in enumerate(per_class):
            if i < len(images):
                out.append((label, images[i]))
    return out


def main():
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)
    samples = load(src)
    n = len(samples)
    pixels = bytearray()
    for _, image in samples:
        pixels.extend(min(255, max(0, round(v * 255))) for v in image)
    labels = bytes(label for label, _ in samples)
    with gzip.GzipFile(dst / "mnist10k-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, n, SIDE, SIDE) + bytes(pixels))
    with gzip.GzipFile(dst / "mnist10k-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, n) + labels)
    print(f"wrote {n} images to {dst}")


if __name__ == "__main__":
    main()
