"""MT1 tensor file format.

Layout: magic bytes ``MT1\\n``, one ASCII header line ``ndims d0 d1 ...``,
then little-endian 32-bit floats in row-major order.
"""

import numpy as np

MAGIC = b"MT1\n"


def save_mt1(path, array) -> None:
    arr = np.asarray(array)
    if arr.ndim < 1:
        raise ValueError("MT1 stores arrays of rank >= 1")
    data = np.ascontiguousarray(arr, dtype="<f4")
    header = f"{arr.ndim} " + " ".join(str(d) for d in arr.shape) + "\n"
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header.encode("ascii"))
        fh.write(data.tobytes())


def load_mt1(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not an MT1 file (bad magic {magic!r})")
        header = b""
        while not header.endswith(b"\n"):
            ch = fh.read(1)
            if not ch:
                raise ValueError(f"{path}: truncated MT1 header")
            header += ch
        fields = header.decode("ascii").split()
        ndims = int(fields[0])
        dims = [int(d) for d in fields[1:]]
        if len(dims) != ndims or any(d <= 0 for d in dims):
            raise ValueError(f"{path}: malformed MT1 header {header!r}")
        count = int(np.prod(dims))
        payload = fh.read(4 * count)
        if len(payload) != 4 * count:
            raise ValueError(f"{path}: truncated MT1 payload")
        return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
