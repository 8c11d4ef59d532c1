"""Write the 5000-digit MNIST sample bundled with mlxtend as gzipped IDX files.

Usage: python tools/make_mnist_subset.py <mlxtend wheel or site-packages dir> <out dir>

The bundled CSV holds 500 digits per class, pixels in 0..255, label last.
"""
import gzip
import io
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_bundle(src):
    src = Path(src)
    if src.suffix == ".whl":
        raw = zipfile.ZipFile(src).read(MEMBER)
    else:
        raw = (src / MEMBER).read_bytes()
    table = np.loadtxt(io.StringIO(gzip.decompress(raw).decode()), delimiter=",")
    return table[:, :-1].astype(np.uint8), table[:, -1].astype(np.uint8)


def write_idx(path, array):
    dtype_code = 0x08  # unsigned byte
    header = struct.pack(">HBB", 0, dtype_code, array.ndim)
    header += struct.pack(">" + "I" * array.ndim, *array.shape)
    with gzip.GzipFile(path, "wb", mtime=0) as fh:
        fh.write(header + array.tobytes())


def main(src, out):
    images, labels = read_bundle(src)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "images-idx3-ubyte.gz", images.reshape(-1, 28, 28))
    write_idx(out / "labels-idx1-ubyte.gz", labels)
    print(f"wrote {len(labels)} samples to {out}")


if __name__ == "__main__":
    main(*sys.argv[1:3])
