"""Single-file checkpoint container.

Layout (all integers little-endian)::

    b"QUSR"                      magic
    u32  format_version
    u64  n, then n bytes         UTF-8 JSON metadata (config snapshot, step, ...)
    u32  tensor count
    per tensor:
        u32 n, n bytes           name (UTF-8)
        u8  n, n bytes           dtype name, e.g. "float32"
        u32 ndim, ndim x u64     shape
        u64 n, n bytes           raw little-endian element data (C order)
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"QUSR"
FORMAT_VERSION = 1

_DTYPES = {
    "float32": (torch.float32, np.dtype("<f4")),
    "float64": (torch.float64, np.dtype("<f8")),
    "int64": (torch.int64, np.dtype("<i8")),
    "int32": (torch.int32, np.dtype("<i4")),
    "uint8": (torch.uint8, np.dtype("u1")),
    "bool": (torch.bool, np.dtype("?")),
}
_BY_TORCH = {v[0]: k for k, v in _DTYPES.items()}


def save_checkpoint(path: str | Path, tensors: dict[str, torch.Tensor], meta: dict[str, Any]) -> None:
    """Write atomically (temp file + rename) so a crash never leaves a partial file."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        if t.dtype not in _BY_TORCH:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        dname = _BY_TORCH[t.dtype]
        raw = t.numpy().astype(_DTYPES[dname][1], copy=False).tobytes(order="C")
        enc = name.encode("utf-8")
        buf.write(struct.pack("<I", len(enc)))
        buf.write(enc)
        buf.write(struct.pack("<B", len(dname)))
        buf.write(dname.encode("ascii"))
        buf.write(struct.pack("<I", t.dim()))
        buf.write(struct.pack(f"<{t.dim()}Q", *t.shape))
        buf.write(struct.pack("<Q", len(raw)))
        buf.write(raw)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".qusr")
    with os.fdopen(fd, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = view[pos:pos + n]
        pos += n
        return out

    def unpack(fmt: str):
        return struct.unpack(fmt, take(struct.calcsize(fmt)))

    if bytes(take(4)) != MAGIC:
        raise CheckpointError(f"{path}: not a QUSR checkpoint")
    (version,) = unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    (n,) = unpack("<Q")
    try:
        meta = json.loads(bytes(take(n)).decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt metadata: {exc}") from None
    (count,) = unpack("<I")
    tensors = {}
    for _ in range(count):
        (n,) = unpack("<I")
        name = bytes(take(n)).decode("utf-8")
        (n,) = unpack("<B")
        dname = bytes(take(n)).decode("ascii")
        if dname not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype {dname!r} for {name}")
        (ndim,) = unpack("<I")
        shape = unpack(f"<{ndim}Q") if ndim else ()
        (n,) = unpack("<Q")
        arr = np.frombuffer(take(n), dtype=_DTYPES[dname][1]).reshape(shape)
        tensors[name] = torch.from_numpy(arr.copy())
    if pos != len(view):
        raise CheckpointError(f"{path}: trailing bytes after tensor records")
    return tensors, meta


def prefixed(state: dict[str, torch.Tensor], prefix: str) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in state.items()}


def section(tensors: dict[str, torch.Tensor], prefix: str) -> dict[str, torch.Tensor]:
    p = prefix + "."
    return {k[len(p):]: v for k, v in tensors.items() if k.startswith(p)}
