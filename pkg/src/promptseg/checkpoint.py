"""Single-file checkpoint archive: plain-text header + raw float64 payload.

Layout, byte for byte:

    PSEGCKPT1\n
    meta <key> <value>\n          (zero or more; value may contain spaces)
    tensor <name> <trainable> <shape> <offset>\n   (one per tensor, in store order)
    payload <total_doubles>\n
    <raw little-endian float64 data, concatenated in tensor order>

`shape` is comma-separated extents ("-" for scalars); `offset` counts doubles
from the start of the payload. Round-tripping is bit-exact.
"""

from __future__ import annotations

import numpy as np

from .tensor import ParameterStore

__all__ = ["save_checkpoint", "load_checkpoint"]

_MAGIC = b"PSEGCKPT1"


def _shape_str(shape):
    return ",".join(str(s) for s in shape) if shape else "-"


def _parse_shape(s):
    return () if s == "-" else tuple(int(x) for x in s.split(","))


def save_checkpoint(path, store, meta=None):
    """Write the store (values, flags, order) plus metadata key/value pairs."""
    lines = [_MAGIC.decode()]
    for key, value in (meta or {}).items():
        value = str(value)
        if "\n" in key or "\n" in value or " " in key:
            raise ValueError("meta keys must be space-free and values single-line")
        lines.append("meta %s %s" % (key, value))
    offset = 0
    chunks = []
    for name, value, trainable in store.items():
        lines.append("tensor %s %d %s %d"
                     % (name, int(trainable), _shape_str(value.shape), offset))
        chunks.append(value.astype("<f8", copy=False).tobytes())
        offset += value.size
    lines.append("payload %d" % offset)
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode())
        for chunk in chunks:
            fh.write(chunk)


def load_checkpoint(path):
    """Read back a (ParameterStore, meta dict) pair, bit-exactly."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(_MAGIC + b"\n"):
        raise ValueError("%s: not a checkpoint (bad magic)" % path)
    header_end = blob.find(b"\npayload ")
    if header_end < 0:
        raise ValueError("%s: truncated header (no payload line)" % path)
    payload_nl = blob.find(b"\n", header_end + 1)
    if payload_nl < 0:
        raise ValueError("%s: truncated header (unterminated payload line)" % path)
    header = blob[:payload_nl].decode()
    payload = blob[payload_nl + 1:]

    meta = {}
    tensors = []
    total = None
    for line in header.splitlines()[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            key, _, value = rest.partition(" ")
            meta[key] = value
        elif kind == "tensor":
            name, trainable, shape, offset = rest.split(" ")
            tensors.append((name, bool(int(trainable)), _parse_shape(shape),
                            int(offset)))
        elif kind == "payload":
            total = int(rest)
        else:
            raise ValueError("%s: unknown header record %r" % (path, kind))
    if total is None:
        raise ValueError("%s: missing payload line" % path)
    if len(payload) != 8 * total:
        raise ValueError("%s: payload is %d bytes, header promises %d"
                         % (path, len(payload), 8 * total))

    store = ParameterStore()
    for name, trainable, shape, offset in tensors:
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=size,
                            offset=8 * offset).reshape(shape)
        store.add(name, arr.copy(), trainable=trainable)
    return store, meta
