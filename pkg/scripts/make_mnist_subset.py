"""Build a 10,000-digit MNIST subset in IDX format from the `mnist` npm package.

The npm package (cazala/mnist) ships 10,000 MNIST digits as JSON arrays of
pixel/255 rounded to three decimals; rounding back recovers the original bytes
exactly (worst-case error 0.0005 * 255 < 0.5).

    python scripts/make_mnist_subset.py [--tarball mnist-1.1.0.tgz] [--out data]

Without --tarball the script runs ``npm pack mnist@1.1.0`` in a temp dir.
"""
import argparse
import json
import subprocess
import sys
import tarfile
import tempfile
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from yopo.dataio import MNIST_SUBSET_FILES, write_idx  # noqa: E402


def read_digits(tarball):
    images, labels = [], []
    with tarfile.open(tarball) as tar:
        for d in range(10):
            member = tar.getmember(f"package/src/digits/{d}.json")
            vals = np.asarray(json.load(tar.extractfile(member))["data"], dtype=np.float64)
            px = np.rint(vals * 255.0)
            if np.max(np.abs(px - vals * 255.0)) > 0.2:
                raise SystemExit(f"digit {d}: values are not 3-decimal pixel/255 roundings")
            px = px.astype(np.uint8).reshape(-1, 28, 28)
            images.append(px)
            labels.append(np.full(px.shape[0], d, dtype=np.uint8))
    return np.concatenate(images), np.concatenate(labels)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--tarball", type=Path)
    ap.add_argument("--out", type=Path, default=Path("data"))
    args = ap.parse_args(argv)
    with tempfile.TemporaryDirectory() as tmp:
        tarball = args.tarball
        if tarball is None:
            subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=tmp, check=True, stdout=subprocess.DEVNULL)
            tarball = Path(tmp) / "mnist-1.1.0.tgz"
        images, labels = read_digits(tarball)
    # the package groups digits by class; interleave with a fixed permutation
    perm = np.random.default_rng(0).permutation(len(labels))
    args.out.mkdir(parents=True, exist_ok=True)
    write_idx(args.out / MNIST_SUBSET_FILES[0], args.out / MNIST_SUBSET_FILES[1], images[perm], labels[perm], compress=True)
    print(f"wrote {len(labels)} digits to {args.out}", file=sys.stderr)


if __name__ == "__main__":
    main()
