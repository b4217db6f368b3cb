"""Binary checkpoint container.

Layout (all little-endian)::

    4 bytes   magic  b"RFCK"
    uint32    format version
    uint64    header length in bytes
    ...       header, UTF-8 JSON (sorted keys)
    float64[] raw parameters   (header["n_params"] values)
    float64[] EMA shadow       (same length)
"""

from __future__ import annotations

import json
import struct

import numpy as np

from ..errors import FormatError, MissingInputError
from .mlp import MlpVelocityNet, ParamStore

MAGIC = b"RFCK"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


def dumps_header(header):
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_container(path, magic, version, header, arrays):
    blob = dumps_header(header)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(magic, version, len(blob)))
        fh.write(blob)
        for arr, dtype in arrays:
            fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def read_container(path, magic, version):
    """Return ``(header, payload_bytes)`` after validating magic and version."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError as exc:
        raise MissingInputError(f"no such file: {path}") from exc
    if len(data) < _PREFIX.size:
        raise FormatError(f"{path}: truncated file")
    got_magic, got_version, hlen = _PREFIX.unpack_from(data)
    if got_magic != magic:
        raise FormatError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if got_version != version:
        raise FormatError(f"{path}: unsupported format version {got_version}")
    start = _PREFIX.size
    try:
        header = json.loads(data[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header") from exc
    return header, memoryview(data)[start + hlen :]


def save_checkpoint(path, net, ema, meta):
    header = {
        "architecture": net.architecture(),
        "layout": [[name, list(shape)] for name, shape in net.params.layout],
        "n_params": net.params.count,
        "meta": meta,
    }
    write_container(path, MAGIC, VERSION, header, [(net.params.flat, "<f8"), (ema, "<f8")])


def load_checkpoint(path):
    """Return ``(net, ema, meta)``; ``net`` carries the raw parameters."""
    header, payload = read_container(path, MAGIC, VERSION)
    n = header["n_params"]
    if len(payload) != 16 * n:
        raise FormatError(f"{path}: expected {16 * n} payload bytes, found {len(payload)}")
    flat = np.frombuffer(payload, dtype="<f8", count=n).astype(np.float64)
    ema = np.frombuffer(payload, dtype="<f8", count=n, offset=8 * n).astype(np.float64)
    arch = header["architecture"]
    layout = [(name, tuple(shape)) for name, shape in header["layout"]]
    net = MlpVelocityNet(
        arch["dim"], tuple(arch["hidden"]), arch["vocab"], arch["cond_dim"], arch["time_freqs"],
        ParamStore(layout, flat),
    )
    return net, ema, header["meta"]
