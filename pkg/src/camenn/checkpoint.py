"""Checkpoint serialization: text header + raw little-endian values.

Layout::

    camenn-checkpoint v1
    count <N>
    <name> <float32|float64> <d0> <d1> ...   (N lines; scalars list no dims)
    end
    <raw little-endian values, concatenated in header order>

Round-trips are bit-exact. Tensor names must not contain whitespace.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .errors import DataParseError

MAGIC = "camenn-checkpoint v1"

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def save_arrays(path, arrays: Mapping[str, np.ndarray]) -> None:
    header = [MAGIC, f"count {len(arrays)}"]
    blobs = []
    for name, arr in arrays.items():
        if any(c.isspace() for c in name):
            raise ValueError(f"tensor name contains whitespace: {name!r}")
        arr = np.asarray(arr)
        if arr.dtype == np.float32:
            dt = "float32"
        elif arr.dtype == np.float64:
            dt = "float64"
        else:
            raise ValueError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        dims = " ".join(str(d) for d in arr.shape)
        header.append(f"{name} {dt} {dims}".rstrip())
        blobs.append(arr.astype(_DTYPES[dt], copy=False).tobytes(order="C"))
    header.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        for b in blobs:
            fh.write(b)


def load_arrays(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    if nl < 0 or raw[:nl].decode("ascii", "replace") != MAGIC:
        raise DataParseError(f"not a checkpoint file: bad magic in {path}", line_number=1)
    lines = []
    pos = 0
    lineno = 0
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise DataParseError("truncated header (no 'end' line)", line_number=lineno + 1)
        line = raw[pos:nl].decode("ascii")
        pos = nl + 1
        lineno += 1
        lines.append(line)
        if line == "end":
            break
    if len(lines) < 3 or not lines[1].startswith("count "):
        raise DataParseError("missing count line", line_number=2)
    try:
        count = int(lines[1].split()[1])
    except (IndexError, ValueError):
        raise DataParseError(f"bad count line: {lines[1]!r}", line_number=2)
    specs = lines[2:-1]
    if len(specs) != count:
        raise DataParseError(f"header declares {count} tensors but lists {len(specs)}")
    out: dict[str, np.ndarray] = {}
    offset = pos
    for i, spec in enumerate(specs):
        parts = spec.split()
        if len(parts) < 2 or parts[1] not in _DTYPES:
            raise DataParseError(f"bad tensor spec: {spec!r}", line_number=3 + i)
        name, dt = parts[0], _DTYPES[parts[1]]
        shape = tuple(int(d) for d in parts[2:])
        n = int(np.prod(shape)) if shape else 1
        nbytes = n * np.dtype(dt).itemsize
        chunk = raw[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise DataParseError(
                f"truncated data for tensor {name!r}: wanted {nbytes} bytes, "
                f"got {len(chunk)}", line_number=3 + i)
        out[name] = np.frombuffer(chunk, dtype=dt).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise DataParseError(f"{len(raw) - offset} trailing bytes after tensor data")
    return out
