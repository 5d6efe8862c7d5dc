"""Binary model file.

Layout (all integers little-endian)::

    b"CFLMODEL" | u32 version=1 | u32 n_layers
    n_layers x ( u16 name_len | name utf-8 | u16 ndim | ndim x u64 dim )
    u8 has_slice | u64 slice_offset | u64 slice_length
    u64 n_values | n_values x f64 (IEEE-754 binary64)

The slice record names the watermarked span of the flat vector so a verifier
needs nothing but the file, the block log and the key seed.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..watermark import ParamSlice
from .models import ModelParams

MAGIC = b"CFLMODEL"
VERSION = 1


class ModelFileError(ValueError):
    pass


def dump_model(params: ModelParams, wm_slice: ParamSlice | None = None) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(params.shapes))]
    for name, shape in params.shapes:
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<H", len(shape)))
        out.append(struct.pack(f"<{len(shape)}Q", *shape))
    if wm_slice is None:
        out.append(struct.pack("<BQQ", 0, 0, 0))
    else:
        out.append(struct.pack("<BQQ", 1, wm_slice.offset, wm_slice.length))
    out.append(struct.pack("<Q", len(params.values)))
    out.append(np.asarray(params.values, dtype="<f8").tobytes())
    return b"".join(out)


def save_model(path, params: ModelParams, wm_slice: ParamSlice | None = None) -> None:
    Path(path).write_bytes(dump_model(params, wm_slice))


def parse_model(data: bytes) -> tuple[ModelParams, ParamSlice | None]:
    try:
        if data[:8] != MAGIC:
            raise ModelFileError("bad magic; not a model file")
        pos = 8
        version, n_layers = struct.unpack_from("<II", data, pos)
        pos += 8
        if version != VERSION:
            raise ModelFileError(f"unsupported model file version {version}")
        shapes = []
        for _ in range(n_layers):
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<H", data, pos)
            pos += 2
            dims = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            shapes.append((name, tuple(int(d) for d in dims)))
        has_slice, offset, length = struct.unpack_from("<BQQ", data, pos)
        pos += 17
        (n_values,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        if len(data) - pos != 8 * n_values:
            raise ModelFileError("value section length does not match header")
        values = np.frombuffer(data, dtype="<f8", count=n_values, offset=pos).astype(np.float64)
        params = ModelParams(values, tuple(shapes))
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        if isinstance(exc, ModelFileError):
            raise
        raise ModelFileError(f"malformed model file: {exc}") from exc
    return params, (ParamSlice(offset, length) if has_slice else None)


def load_model(path) -> tuple[ModelParams, ParamSlice | None]:
    return parse_model(Path(path).read_bytes())
