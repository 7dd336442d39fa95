"""Single-file parameter container.

Layout::

    b"TEMCKPT\\0" | u32 LE header length | UTF-8 JSON header | raw '<f4' arrays

The header holds ``format_version``, the caller's manifest and, per array,
its name, shape and byte offset into the data section.
"""
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TEMCKPT\0"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict, manifest: dict) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        blob = a.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "manifest": manifest, "arrays": entries},
        sort_keys=True,
    ).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(arrays, manifest)``; arrays are native float32."""
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    arrays = {}
    for e in header["arrays"]:
        shape = tuple(e["shape"])
        count = int(np.prod(shape)) if shape else 1
        a = np.frombuffer(raw, dtype="<f4", count=count, offset=pos + e["offset"])
        arrays[e["name"]] = a.reshape(shape).astype(np.float32)
    return arrays, header["manifest"]
