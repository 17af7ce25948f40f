"""Versioned binary container for named arrays plus JSON metadata.

Layout (all integers little-endian)::

    8 bytes   magic  b"EVSPLCK\\0"
    u32       format version
    u64       header length H
    H bytes   UTF-8 JSON: {"meta": {...}, "arrays": [{name, dtype, shape, offset, nbytes}]}
    ...       raw array bytes, C order, little-endian, each at its offset
              (relative to the end of the header, 8-byte aligned)

Arrays round-trip bit-exactly.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import ContractError
from .scene import GaussianCloud

MAGIC = b"EVSPLCK\0"
VERSION = 1


def save_container(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write atomically: a temp file in the target directory is renamed over ``path``."""
    table, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        data = arr.tobytes()
        table.append(dict(name=name, dtype=arr.dtype.str, shape=list(arr.shape),
                          offset=offset, nbytes=len(data)))
        pad = (-len(data)) % 8
        blobs.append(data + b"\0" * pad)
        offset += len(data) + pad
    header = json.dumps({"meta": meta or {}, "arrays": table}, sort_keys=True).encode()
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<IQ", VERSION, len(header)))
            f.write(header)
            for b in blobs:
                f.write(b)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_container(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ContractError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[20:20 + hlen])
    base = 20 + hlen
    arrays = {}
    for entry in header["arrays"]:
        start = base + entry["offset"]
        buf = data[start:start + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(buf, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    return arrays, header["meta"]


def cloud_arrays(cloud: GaussianCloud, prefix: str = "cloud") -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in cloud.params().items()}


def cloud_from_arrays(arrays: dict[str, np.ndarray], sh_degree: int, prefix: str = "cloud") -> GaussianCloud:
    g = {k: arrays[f"{prefix}.{k}"] for k in ("means", "log_scales", "rotations",
                                               "opacity_logits", "sh_coeffs")}
    return GaussianCloud(sh_degree=sh_degree, **g)


def save_cloud(path, cloud: GaussianCloud, iteration: int = 0, meta: dict | None = None) -> None:
    m = {"kind": "cloud", "sh_degree": cloud.sh_degree, "iteration": iteration}
    m.update(meta or {})
    save_container(path, cloud_arrays(cloud), m)


def load_cloud(path) -> tuple[GaussianCloud, dict]:
    arrays, meta = load_container(path)
    if "cloud.means" not in arrays:
        raise ContractError(f"{path}: no Gaussian cloud stored")
    return cloud_from_arrays(arrays, int(meta["sh_degree"])), meta
