"""Checkpoint file format.

Layout: 8-byte magic ``OBFCHK01``, a little-endian uint32 header length, a
UTF-8 JSON header (architecture, noise placement, granularity, tensor shape
table, training metadata), then every parameter tensor concatenated as
little-endian float32 in header order.  Round trips are bitwise exact.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .errors import FormatError
from .models import Network, build_model

MAGIC = b"OBFCHK01"
FORMAT_VERSION = 1


def save_checkpoint(model: Network, path, training_meta=None):
    """Write the model atomically (temp file + rename)."""
    names = sorted(model.params)
    header = {
        "format_version": FORMAT_VERSION,
        "model": model.meta,
        "tensors": [{"name": n, "shape": list(model.params[n].data.shape)}
                    for n in names],
        "training": training_meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    dirname = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=dirname, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            for n in names:
                f.write(model.params[n].data.astype("<f4", copy=False).tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_header(path):
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}", offset=0)
        raw = f.read(4)
        if len(raw) != 4:
            raise FormatError("truncated header length", offset=8)
        (hlen,) = struct.unpack("<I", raw)
        blob = f.read(hlen)
        if len(blob) != hlen:
            raise FormatError("truncated JSON header", offset=12)
        try:
            header = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"unreadable JSON header: {e}", offset=12) from e
        if header.get("format_version") != FORMAT_VERSION:
            raise FormatError(
                f"unsupported checkpoint version {header.get('format_version')}")
        return header, 12 + hlen


def load_checkpoint(path, expect=None):
    """Rebuild the model and load parameters bitwise.

    ``expect`` is an optional dict of model-meta fields that must match the
    header (e.g. {"arch": "cnn"}); a mismatch raises FormatError naming the
    field.  Returns (Network, header).
    """
    header, offset = read_header(path)
    meta = header["model"]
    if expect:
        for key, want in expect.items():
            if meta.get(key) != want:
                raise FormatError(
                    f"checkpoint field {key!r} is {meta.get(key)!r}, expected {want!r}")
    model = build_model(meta["arch"], meta["pni"], meta["granularity"],
                        tuple(meta["input_shape"]), meta["classes"],
                        meta["init_seed"])
    table = {t["name"]: tuple(t["shape"]) for t in header["tensors"]}
    if set(table) != set(model.params):
        raise FormatError(
            f"tensor table mismatch: header has {sorted(table)}, "
            f"model expects {sorted(model.params)}")
    with open(path, "rb") as f:
        f.seek(offset)
        for t in header["tensors"]:
            shape = tuple(t["shape"])
            want = model.params[t["name"]].data.shape
            if shape != want:
                raise FormatError(
                    f"tensor {t['name']!r} shape {shape} != model shape {want}")
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(4 * count)
            if len(buf) != 4 * count:
                raise FormatError(
                    f"truncated tensor {t['name']!r}", offset=offset + len(buf))
            offset += 4 * count
            model.params[t["name"]].data = np.frombuffer(
                buf, dtype="<f4").reshape(shape).copy()
    return model, header
