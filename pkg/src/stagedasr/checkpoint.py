"""Binary archive for training state: a JSON header describing named
float64 arrays, then the raw array bytes in header order.

Equal content means equal bytes: the JSON is written with sorted keys
and no whitespace, arrays are little-endian, and the array order is the
order given at save time, so save -> load -> save reproduces the file
exactly.  The header's "meta" entry is free-form JSON owned by the
caller (architecture descriptors, optimizer scalars, rng state).
"""
from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"SCKP"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


def save_archive(path, meta, arrays):
    """Write meta plus named arrays.  arrays is a dict or a list of
    (name, array) pairs; the iteration order fixes the blob order."""
    if isinstance(arrays, dict):
        arrays = list(arrays.items())
    names = [n for n, _ in arrays]
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate array names in checkpoint")
    blobs = []
    index = []
    for name, a in arrays:
        a = np.asarray(a, dtype=np.float64)
        index.append({"name": name, "shape": list(a.shape)})
        blobs.append(a.astype("<f8").tobytes(order="C"))
    head = json.dumps({"meta": meta, "arrays": index},
                      sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, len(head)))
        f.write(head)
        for b in blobs:
            f.write(b)


def load_archive(path):
    """Read back (meta, dict of name -> array) with full validation."""
    with open(path, "rb") as f:
        raw = f.read(_HEADER.size)
        if len(raw) < _HEADER.size:
            raise CheckpointError("%s: truncated header" % path)
        magic, version, head_len = _HEADER.unpack(raw)
        if magic != MAGIC:
            raise CheckpointError("%s is not a checkpoint file" % path)
        if version != VERSION:
            raise CheckpointError("%s: unsupported checkpoint version %d"
                                  % (path, version))
        head = f.read(head_len)
        if len(head) < head_len:
            raise CheckpointError("%s: truncated header" % path)
        try:
            parsed = json.loads(head.decode("utf-8"))
        except ValueError:
            raise CheckpointError("%s: corrupt header" % path)
        arrays = {}
        for entry in parsed["arrays"]:
            shape = tuple(int(d) for d in entry["shape"])
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            blob = f.read(count * 8)
            if len(blob) < count * 8:
                raise CheckpointError("%s: truncated data for array %s"
                                      % (path, entry["name"]))
            arrays[entry["name"]] = np.frombuffer(
                blob, dtype="<f8").astype(np.float64).reshape(shape)
        if f.read(1):
            raise CheckpointError("%s: trailing bytes after last array"
                                  % path)
    return parsed["meta"], arrays
