#!/usr/bin/env python3
"""Convert the digit JSON files shipped in the npm `mnist` package to IDX.

Usage: npm pack mnist && tar xzf mnist-*.tgz
       python3 scripts/mnist_from_npm.py package/src/digits data/mnist
"""
import gzip
import json
import struct
import sys
from pathlib import Path


def main(src: Path, dst: Path) -> None:
    images, labels = bytearray(), bytearray()
    count = 0
    for digit in range(10):
        raw = (src / f"{digit}.json").read_text()
        flat = json.loads(raw)["data"]
        assert len(flat) % 784 == 0
        for i in range(0, len(flat), 784):
            images.extend(min(255, max(0, round(v * 255))) for v in flat[i : i + 784])
            labels.append(digit)
            count += 1
    dst.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(dst / "mnist10k-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, count, 28, 28))
        f.write(images)
    with gzip.GzipFile(dst / "mnist10k-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, count))
        f.write(labels)
    print(f"wrote {count} digits to {dst}")


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
