"""Binary container shared by model, dataset, sensitivity and assignment files.

Layout::

    HPIM-CONTAINER 1\\n          magic line with the format version
    {...json header...}\\n       one line, sorted keys, compact separators
    <blob 0><blob 1>...          raw little-endian arrays, row-major

The header has ``kind`` (what the file holds), ``meta`` (kind-specific
JSON), and ``blobs``: a list of ``{name, dtype, shape, offset, nbytes}``
with offsets relative to the first blob byte. ``dtype`` is a numpy
little-endian code (``<f4``, ``<i8``, ``|u1``). Writing the same content
twice produces identical bytes.
"""

from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np

MAGIC = b"HPIM-CONTAINER"
VERSION = 1
ALLOWED_DTYPES = {"<f4", "<f8", "<i8", "|u1", "|b1"}


class FormatError(ValueError):
    """Malformed, truncated, or wrong-version container."""


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def dump_bytes(kind: str, meta: dict, blobs: dict[str, np.ndarray]) -> bytes:
    entries, parts, offset = [], [], 0
    for name, arr in blobs.items():
        raw = np.ascontiguousarray(arr)
        if raw.dtype.itemsize > 1:
            raw = raw.astype(raw.dtype.newbyteorder("<"), copy=False)
        code = raw.dtype.str
        if code not in ALLOWED_DTYPES:
            raise TypeError(f"blob {name!r}: unsupported dtype {code}")
        data = raw.tobytes(order="C")
        entries.append({"name": name, "dtype": code, "shape": list(raw.shape), "offset": offset, "nbytes": len(data)})
        parts.append(data)
        offset += len(data)
    header = {"kind": kind, "meta": meta, "blobs": entries}
    return MAGIC + b" " + str(VERSION).encode() + b"\n" + _dumps(header) + b"\n" + b"".join(parts)


def load_bytes(buf: bytes, kind: str | None = None):
    """Parse a container; returns ``(meta, {name: array})``."""
    stream = io.BytesIO(buf)
    magic = stream.readline()
    if not magic.startswith(MAGIC + b" ") or not magic.endswith(b"\n"):
        raise FormatError("not a container file (bad magic line)")
    try:
        version = int(magic[len(MAGIC) + 1:-1])
    except ValueError:
        raise FormatError("unreadable format version") from None
    if version != VERSION:
        raise FormatError(f"format version {version} unsupported (expected {VERSION})")
    line = stream.readline()
    if not line.endswith(b"\n"):
        raise FormatError("truncated header")
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt header: {exc}") from None
    if not isinstance(header, dict) or {"kind", "meta", "blobs"} - header.keys():
        raise FormatError("header is missing required fields")
    if kind is not None and header["kind"] != kind:
        raise FormatError(f"expected a {kind!r} container, found {header['kind']!r}")
    body = stream.read()
    expected = sum(int(b["nbytes"]) for b in header["blobs"])
    if len(body) != expected:
        raise FormatError(f"blob section has {len(body)} bytes, header declares {expected}")
    arrays = {}
    for b in header["blobs"]:
        if b["dtype"] not in ALLOWED_DTYPES:
            raise FormatError(f"blob {b['name']!r} has unsupported dtype {b['dtype']}")
        dt = np.dtype(b["dtype"])
        count = int(np.prod(b["shape"], dtype=np.int64))
        if count * dt.itemsize != b["nbytes"]:
            raise FormatError(f"blob {b['name']!r}: shape/size mismatch")
        chunk = body[b["offset"]:b["offset"] + b["nbytes"]]
        arrays[b["name"]] = np.frombuffer(chunk, dtype=dt).reshape(b["shape"]).copy()
    return header["meta"], arrays


def write(path, kind, meta, blobs):
    Path(path).write_bytes(dump_bytes(kind, meta, blobs))


def read(path, kind=None):
    return load_bytes(Path(path).read_bytes(), kind)


# --------------------------------------------------------------------------
# typed helpers


def layer_to_dict(layer) -> dict:
    from dataclasses import asdict

    return {"kind": layer.kind, **asdict(layer)}


def layer_from_dict(d: dict):
    from . import nn

    d = dict(d)
    kind = d.pop("kind")
    cls = {"conv2d": nn.Conv2D, "dense": nn.Dense, "relu": nn.ReLU, "maxpool": nn.MaxPool, "flatten": nn.Flatten}.get(kind)
    if cls is None:
        raise FormatError(f"unknown layer kind {kind!r}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise FormatError(f"bad {kind} layer spec: {exc}") from None


def save_model(net, path):
    meta = {
        "dtype": "float32",
        "input_shape": list(net.input_shape),
        "num_classes": net.num_classes,
        "layers": [layer_to_dict(layer) for layer in net.layers],
    }
    write(path, "model", meta, {f"weight{p}": w for p, w in enumerate(net.weights)})


def load_model(path):
    from .nn import Network, ShapeError

    meta, arrays = read(path, "model")
    if meta.get("dtype") != "float32":
        raise FormatError(f"unsupported weight dtype {meta.get('dtype')!r}")
    layers = [layer_from_dict(d) for d in meta.get("layers", [])]
    if not layers:
        raise FormatError("model has an empty layer list")
    weights = [arrays[f"weight{p}"] for p in range(len(arrays))]
    try:
        return Network(layers, weights, meta["input_shape"], meta["num_classes"])
    except (ShapeError, KeyError) as exc:
        raise FormatError(f"inconsistent model: {exc}") from None


def save_dataset(ds, path):
    meta = {"num_classes": ds.num_classes, "split": ds.split}
    write(path, "dataset", meta, {"inputs": ds.inputs, "labels": ds.labels})


def load_dataset(path):
    from .data import Dataset

    meta, arrays = read(path, "dataset")
    try:
        return Dataset(arrays["inputs"], arrays["labels"], meta["num_classes"], meta["split"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"inconsistent dataset: {exc}") from None
