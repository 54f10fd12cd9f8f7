#!/usr/bin/env python3
"""Convert the digit JSON files shipped with the npm `mnist` package into IDX files.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_json_to_idx.py package/src/digits data/mnist-subset \
        --train-per-class 200 --test-per-class 50

Pixels in the JSON files are byte/255 rounded to three decimals, so
round(v * 255) recovers the original byte exactly.
"""
import argparse
import json
import struct
from pathlib import Path


def write_idx(prefix: Path, images, labels):
    with open(f"{prefix}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))
    with open(f"{prefix}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--train-per-class", type=int, default=200)
    ap.add_argument("--test-per-class", type=int, default=50)
    args = ap.parse_args()

    per_class = []
    for d in range(10):
        data = json.loads((args.digits_dir / f"{d}.json").read_text())["data"]
        imgs = [
            [int(round(v * 255)) for v in data[i : i + 784]]
            for i in range(0, len(data), 784)
        ]
        per_class.append(imgs)

    n_tr, n_te = args.train_per_class, args.test_per_class
    train, test = ([], []), ([], [])
    # Interleave classes so any prefix of the files is roughly balanced.
    for i in range(n_tr):
        for d in range(10):
            train[0].append(per_class[d][i])
            train[1].append(d)
    for i in range(n_tr, n_tr + n_te):
        for d in range(10):
            test[0].append(per_class[d][i])
            test[1].append(d)

    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_idx(args.out_dir / "train", *train)
    write_idx(args.out_dir / "test", *test)


if __name__ == "__main__":
    main()
