"""Named-array checkpoint container (.dicp).

Stores an ordered table of named arrays (model parameters, optimizer moments)
plus a JSON metadata blob.  Writing the same entries and meta twice yields
byte-identical files.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .autodiff import Tensor
from .binio import MAGIC_CHECKPOINT, Reader, Writer

CHECKPOINT_FORMAT_VERSION = 1

_DTYPES = {"<f4", "<f8", "<i4", "<i8", "<u1"}


def _entry_array(value) -> tuple[np.ndarray, str]:
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    # single-byte dtypes print "|u1"; build the code so the table stays uniform
    code = f"<{arr.dtype.kind}{arr.dtype.itemsize}"
    if code not in _DTYPES:
        raise ValueError(f"unsupported checkpoint dtype {arr.dtype} (use {sorted(_DTYPES)})")
    out = np.asarray(arr, dtype=code)  # ascontiguousarray would flatten 0-d shapes
    if not out.flags.c_contiguous:
        out = out.copy()
    return out, code


def save_checkpoint(path, entries: dict, meta: dict | None = None) -> None:
    """Write named arrays (Tensor or ndarray values) in dict order."""
    arrays = {name: _entry_array(v) for name, v in entries.items()}
    with open(path, "wb") as f:
        w = Writer(f, str(path))
        w.raw(MAGIC_CHECKPOINT)
        w.u32(CHECKPOINT_FORMAT_VERSION)
        w.json_blob(meta)
        w.u32(len(arrays))
        for name, (arr, code) in arrays.items():
            w.str16(name)
            w.str16(code)
            w.u8(arr.ndim)
            for s in arr.shape:
                w.u32(s)
            w.raw(arr.tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back (entries, meta); entry order matches the file."""
    with open(path, "rb") as f:
        r = Reader(f, str(path))
        r.expect_magic(MAGIC_CHECKPOINT, "checkpoint")
        r.expect_version(CHECKPOINT_FORMAT_VERSION, "checkpoint")
        meta = r.json_blob("checkpoint metadata")
        count = r.u32("entry count")
        entries: dict[str, np.ndarray] = {}
        for i in range(count):
            name = r.str16(f"entry {i} name")
            dtype = r.str16(f"entry {i} dtype")
            if dtype not in _DTYPES:
                raise r.fail(f"entry {name!r} has unsupported dtype {dtype!r}")
            ndim = r.u8(f"entry {i} ndim")
            shape = tuple(r.u32(f"entry {i} dim {d}") for d in range(ndim))
            n = int(np.prod(shape, dtype=np.int64)) if shape else 1
            entries[name] = r.typed_array(dtype, n, f"entry {i} data").reshape(shape)
    return entries, meta


def params_digest(entries: dict) -> str:
    """Order-independent sha256 over names, shapes, dtypes, and bytes."""
    h = hashlib.sha256()
    for name in sorted(entries):
        arr, code = _entry_array(entries[name])
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode("ascii"))
        h.update(code.encode("ascii"))
        h.update(arr.tobytes())
    return h.hexdigest()
