#!/usr/bin/env python3
"""Fetch MNIST and FashionMNIST from their npm packages and write IDX files.

Writes to data/ (or --out):
  mnist-train-images.idx / mnist-train-labels.idx   9000 digits
  mnist-test-images.idx  / mnist-test-labels.idx    1000 digits
  fashion-images.idx     / fashion-labels.idx       1000 garments, 100 per class
"""
import argparse
import json
import pathlib
import struct
import subprocess
import tarfile
import tempfile

import numpy as np

PACKAGES = {"mnist": "mnist@1.1.0", "fashion": "fashion-mnist@1.1.0"}


def unpack(spec, workdir):
    out = subprocess.run(["npm", "pack", spec, "--silent"], cwd=workdir, check=True, capture_output=True, text=True)
    tgz = workdir / out.stdout.strip().splitlines()[-1]
    target = workdir / spec.split("@")[0]
    with tarfile.open(tgz) as t:
        t.extractall(target)
    return target / "package" / "src"


def write_images(path, pixels):
    n = pixels.shape[0]
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x803, n, 28, 28))
        f.write(pixels.astype(np.uint8).tobytes())


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


def load_mnist(src):
    images, labels = [], []
    for digit in range(10):
        flat = np.asarray(json.load(open(src / "digits" / f"{digit}.json"))["data"], dtype=np.float64)
        imgs = flat[: len(flat) // 784 * 784].reshape(-1, 784)
        images.append(np.rint(imgs * 255.0))
        labels += [digit] * len(imgs)
    return np.concatenate(images), np.asarray(labels)


def load_fashion(src, per_class):
    images, labels = [], []
    for cls in range(10):
        rows = [r for r in json.load(open(src / "clothes" / f"{cls}.json"))["data"] if len(r) == 784]
        images.append(np.asarray(rows[:per_class], dtype=np.float64))
        labels += [cls] * per_class
    return np.concatenate(images), np.asarray(labels)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default=str(pathlib.Path(__file__).resolve().parent.parent / "data"))
    ap.add_argument("--from-dir", help="directory holding already unpacked packages (mnist/, fashion-mnist/)")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    with tempfile.TemporaryDirectory() as tmp:
        if args.from_dir:
            base = pathlib.Path(args.from_dir)
            mnist_src, fashion_src = base / "mnist" / "package" / "src", base / "fashion-mnist" / "package" / "src"
        else:
            mnist_src = unpack(PACKAGES["mnist"], pathlib.Path(tmp))
            fashion_src = unpack(PACKAGES["fashion"], pathlib.Path(tmp))

        x, y = load_mnist(mnist_src)
        order = np.random.RandomState(args.seed).permutation(len(y))
        x, y = x[order], y[order]
        test = 1000
        write_images(out / "mnist-train-images.idx", x[test:])
        write_labels(out / "mnist-train-labels.idx", y[test:])
        write_images(out / "mnist-test-images.idx", x[:test])
        write_labels(out / "mnist-test-labels.idx", y[:test])

        fx, fy = load_fashion(fashion_src, 100)
        order = np.random.RandomState(args.seed + 1).permutation(len(fy))
        write_images(out / "fashion-images.idx", fx[order])
        write_labels(out / "fashion-labels.idx", fy[order])
    print(f"mnist: {len(y) - test} train, {test} test; fashion: {len(fy)} -> {out}")


if __name__ == "__main__":
    main()
