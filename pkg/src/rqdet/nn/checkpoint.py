"""``RQF1`` checkpoint files.

Layout::

    RQF1 <header-bytes>\\n
    <JSON header: {"meta": {...}, "tensors": [{name, shape, dtype, offset, nbytes}, ...]}>\\n
    <raw little-endian buffers, concatenated; offsets relative to this point>
"""
from __future__ import annotations

import json
import os
import tempfile
from collections import OrderedDict

import numpy as np

MAGIC = b"RQF1"


class CheckpointError(ValueError):
    pass


def dumps(tensors: "dict[str, np.ndarray]", meta: dict | None = None) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "dtype": a.dtype.str,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, indent=1, sort_keys=True).encode()
    return MAGIC + b" %d\n" % len(header) + header + b"\n" + b"".join(blobs)


def loads(buf: bytes):
    if not buf.startswith(MAGIC + b" "):
        raise CheckpointError("not an RQF1 checkpoint")
    nl = buf.index(b"\n")
    hlen = int(buf[len(MAGIC) + 1:nl])
    header = json.loads(buf[nl + 1:nl + 1 + hlen])
    base = nl + 1 + hlen + 1
    out = OrderedDict()
    for e in header["tensors"]:
        start = base + e["offset"]
        raw = buf[start:start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"truncated buffer for {e['name']}")
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        out[e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return out, header["meta"]


def atomic_write(path: str, data: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path: str, tensors: dict, meta: dict | None = None) -> None:
    atomic_write(path, dumps(tensors, meta))


def load(path: str):
    with open(path, "rb") as f:
        return loads(f.read())
