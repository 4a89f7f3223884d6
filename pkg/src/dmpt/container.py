"""Binary tensor container shared by weight files and prompt packs.

Layout::

    magic        8 bytes ("DPTW0001" or "DPTP0001")
    header_len   uint32, little endian
    header       UTF-8 JSON: {"config": {...},
                              "tensors": [{"name", "rank", "extents"}, ...]}
    payload      little-endian float32 buffers, in manifest order
"""

import json
import struct

import numpy as np

from .errors import FormatError

WEIGHTS_MAGIC = b"DPTW0001"
PROMPTS_MAGIC = b"DPTP0001"

_LEN = struct.Struct("<I")


def write_container(path, magic, config, tensors):
    """Write ``tensors`` (an ordered name -> array mapping) to ``path``."""
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    manifest = []
    blobs = []
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4", order="C")
        manifest.append({"name": name, "rank": arr.ndim, "extents": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = json.dumps({"config": config, "tensors": manifest}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(_LEN.pack(len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_container(path, magic):
    """Return ``(config, tensors)``; raises :class:`FormatError` on any defect."""
    with open(path, "rb") as fh:
        raw = fh.read()
    return parse_container(raw, magic)


def parse_container(raw, magic):
    if len(raw) < 8:
        raise FormatError("file shorter than the magic number", offset=len(raw))
    if raw[:8] != magic:
        raise FormatError(f"bad magic {raw[:8]!r}, expected {magic!r}", offset=0)
    if len(raw) < 12:
        raise FormatError("truncated header length", offset=8)
    (hlen,) = _LEN.unpack_from(raw, 8)
    start = 12
    if start + hlen > len(raw):
        raise FormatError(f"header of {hlen} bytes runs past end of file", offset=start)
    try:
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
        config = header["config"]
        manifest = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable header: {exc}", offset=start) from exc

    offset = start + hlen
    tensors = {}
    for entry in manifest:
        try:
            name, rank, extents = entry["name"], int(entry["rank"]), [int(e) for e in entry["extents"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad manifest entry {entry!r}", offset=start) from exc
        if rank != len(extents) or any(e < 0 for e in extents):
            raise FormatError(f"tensor {name!r}: rank {rank} does not match extents {extents}", offset=start)
        count = int(np.prod(extents, dtype=np.int64)) if extents else 1
        nbytes = 4 * count
        if offset + nbytes > len(raw):
            raise FormatError(f"payload of tensor {name!r} truncated", offset=offset)
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(extents)
        tensors[name] = arr.astype(np.float32)
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{len(raw) - offset} trailing bytes after payload", offset=offset)
    return config, tensors
