"""Model file format.

Layout: 8-byte magic ``DIASGN01``, an 8-byte little-endian header length,
a JSON header (config, tensor names and shapes in serialization order),
then the flat little-endian float64 blocks in that order. Round-trips are
bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .sgn import SgnConfig, SgnParams, parameter_shapes

MAGIC = b"DIASGN01"


def save_params(params: SgnParams, path) -> None:
    params.validate()
    header = {
        "format": "dia-sgn-model",
        "config": params.config.to_dict(),
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in params.tensors.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for v in params.tensors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_params(path) -> SgnParams:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise FormatError(f"{path}: not a model file (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: corrupt header") from e
    config = SgnConfig.from_dict(header["config"])
    expected = parameter_shapes(config)
    tensors: dict[str, np.ndarray] = {}
    offset = 16 + hlen
    for entry in header["tensors"]:
        name = entry["name"]
        shape = tuple(entry["shape"])
        if name not in expected or expected[name] != shape:
            raise FormatError(f"{path}: unexpected tensor {name} {shape}")
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        tensors[name] = arr.astype(np.float64)  # native, writable copy
        offset += count * 8
    if offset != len(raw):
        raise FormatError(f"{path}: trailing bytes ({len(raw) - offset})")
    params = SgnParams(config=config, tensors=tensors)
    params.validate()
    return params
