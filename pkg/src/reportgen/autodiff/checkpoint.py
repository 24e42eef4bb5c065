"""Parameter checkpoint file.

Layout: one ASCII header line ``reportgen-params <version> <manifest-json>\\n``
where the manifest is a list of ``[name, shape]`` pairs, followed by the raw
little-endian float64 values of every parameter in manifest order.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import CorruptDataError
from .tensor import Tensor

MAGIC = "reportgen-params"
FORMAT_VERSION = 1


def save_params(path: str | Path, params: Mapping[str, Tensor]) -> None:
    manifest = [[name, list(t.shape)] for name, t in params.items()]
    header = f"{MAGIC} {FORMAT_VERSION} {json.dumps(manifest, separators=(',', ':'))}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for t in params.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def read_manifest(path: str | Path) -> list[tuple[str, tuple[int, ...]]]:
    with open(path, "rb") as fh:
        line = fh.readline()
    return _parse_header(line, path)


def _parse_header(line: bytes, path) -> list[tuple[str, tuple[int, ...]]]:
    try:
        magic, version, manifest = line.decode("ascii").rstrip("\n").split(" ", 2)
        entries = json.loads(manifest)
    except (UnicodeDecodeError, ValueError):
        raise CorruptDataError(f"{path}: not a parameter checkpoint") from None
    if magic != MAGIC:
        raise CorruptDataError(f"{path}: bad magic {magic!r}")
    if int(version) != FORMAT_VERSION:
        raise CorruptDataError(f"{path}: unsupported checkpoint version {version}")
    return [(name, tuple(shape)) for name, shape in entries]


def load_params(path: str | Path) -> dict[str, Tensor]:
    with open(path, "rb") as fh:
        manifest = _parse_header(fh.readline(), path)
        payload = fh.read()
    expected = sum(int(np.prod(shape)) for _, shape in manifest) * 8
    if len(payload) != expected:
        raise CorruptDataError(f"{path}: expected {expected} payload bytes, found {len(payload)}")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    out: dict[str, Tensor] = {}
    offset = 0
    for name, shape in manifest:
        n = int(np.prod(shape))
        out[name] = Tensor(values[offset : offset + n].reshape(shape).copy(), requires_grad=True, name=name)
        offset += n
    return out
