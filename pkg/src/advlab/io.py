"""Versioned binary container shared by networks, null-model banks and tensors.

Layout::

    8 bytes   magic  b"ADVLAB\\x00\\x00"
    u32 LE    format version
    u64 LE    header length in bytes
    header    UTF-8 JSON: {"kind": ..., "meta": {...}, "arrays": [[name, shape], ...]}
    payload   each array as little-endian float64, row-major, in header order

Round trips are bit-exact.
"""
from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"ADVLAB\x00\x00"
VERSION = 1


class FormatError(ValueError):
    pass


def save_container(path, kind, meta, arrays):
    names = [(name, list(np.shape(a))) for name, a in arrays]
    header = json.dumps({"kind": kind, "meta": meta, "arrays": names},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(header)))
        f.write(header)
        for _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_container(path, expect_kind=None):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0")
    if len(blob) < 20:
        raise FormatError(f"{path}: truncated header at byte {len(blob)}")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    header = json.loads(blob[20:20 + hlen].decode("utf-8"))
    if expect_kind is not None and header["kind"] != expect_kind:
        raise FormatError(f"{path}: expected {expect_kind!r}, found {header['kind']!r}")
    offset = 20 + hlen
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(blob):
            raise FormatError(f"{path}: truncated payload at byte {len(blob)}")
        arrays[name] = np.frombuffer(blob[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
    return header["kind"], header["meta"], arrays


def save_network(path, net):
    from .nncore import Network  # noqa: F401  (type only)
    arrays = [(f"{i}.{name}", a) for i, name, a in net.parameters()]
    meta = {"input_shape": list(net.input_shape), "class_count": net.class_count,
            "layers": net.describe()}
    save_container(path, "network", meta, arrays)


def load_network(path):
    from .nncore import Network, layer_from_descriptor
    _, meta, arrays = load_container(path, "network")
    layers = [layer_from_descriptor(d) for d in meta["layers"]]
    for key, a in arrays.items():
        i, name = key.split(".", 1)
        layers[int(i)].params[name] = a.copy()
    return Network(layers, tuple(meta["input_shape"]), meta["class_count"])


def save_tensor(path, array, **meta):
    save_container(path, "tensor", meta, [("data", np.asarray(array, dtype=np.float64))])


def load_tensor(path):
    _, meta, arrays = load_container(path, "tensor")
    return arrays["data"]
