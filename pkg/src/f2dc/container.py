"""Flat tensor container: a plain-text manifest plus one raw little-endian blob.

Layout of a container directory::

    manifest.txt   "# f2dc-container 1" then one line per tensor:
                   name <TAB> dtype <TAB> d0,d1,... <TAB> byte offset <TAB> byte count
    data.bin       the tensors back to back, row-major, little-endian

Used both for model checkpoints (all float64) and for dataset export.
"""
from __future__ import annotations

from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ContractError

HEADER = "# f2dc-container 1"
MANIFEST = "manifest.txt"
BLOB = "data.bin"
_ALLOWED = {"<f8", "<f4", "<i8"}


def save(path, tensors: Mapping[str, np.ndarray], dtype: str | None = None) -> Path:
    """Write ``tensors`` in insertion order. ``dtype`` forces one on-disk type (e.g. ``"<f8"``)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    lines = [HEADER]
    offset = 0
    with open(root / BLOB, "wb") as blob:
        for name, value in tensors.items():
            if any(c in name for c in "\t\n"):
                raise ContractError(f"tensor name {name!r} contains a tab or newline")
            arr = np.asarray(value)
            target = np.dtype(dtype) if dtype else arr.dtype.newbyteorder("<")
            arr = np.ascontiguousarray(arr.astype(target.newbyteorder("<"), copy=False))
            code = arr.dtype.str
            if code not in _ALLOWED:
                raise ContractError(f"{name}: unsupported dtype {code}")
            raw = arr.tobytes(order="C")
            blob.write(raw)
            shape = ",".join(str(d) for d in arr.shape)
            lines.append(f"{name}\t{code}\t{shape}\t{offset}\t{len(raw)}")
            offset += len(raw)
    (root / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return root


def load(path) -> dict[str, np.ndarray]:
    root = Path(path)
    lines = (root / MANIFEST).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != HEADER:
        raise ContractError(f"{root / MANIFEST}: not an f2dc container")
    raw = (root / BLOB).read_bytes()
    out: dict[str, np.ndarray] = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        name, code, shape, offset, count = line.split("\t")
        if code not in _ALLOWED:
            raise ContractError(f"{name}: unsupported dtype {code}")
        dims = tuple(int(d) for d in shape.split(",")) if shape else ()
        start, count = int(offset), int(count)
        if start + count > len(raw):
            raise ContractError(f"{name}: extends past the end of {BLOB}")
        out[name] = np.frombuffer(raw[start:start + count], dtype=np.dtype(code)).reshape(dims).copy()
    return out


def save_checkpoint(path, module) -> Path:
    """Named parameters and buffers of ``module``, stored as 64-bit reals."""
    state = dict(module.param_state())
    state.update(module.buffer_state())
    return save(path, state, dtype="<f8")


def load_checkpoint(path, module) -> None:
    state = load(path)
    module.load_params(state)
    module.load_buffers(state)
