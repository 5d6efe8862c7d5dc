"""Canonical byte encoding for everything that is hashed or stored on chain.

Every value is written as ``tag (1 byte) | length (4 bytes, big-endian) | body``.
Dict entries are ordered by the encoding of their keys, integers use the
minimal big-endian two's-complement form, and floats are refused outright so
that digests never depend on float formatting.  Decoding is strict: a byte
string decodes only if re-encoding the result reproduces it exactly.
"""
from __future__ import annotations

import struct
from typing import Any

_NONE = b"N"
_TRUE = b"T"
_FALSE = b"F"
_INT = b"I"
_BYTES = b"B"
_STR = b"S"
_LIST = b"L"
_DICT = b"D"

_HEADER = struct.Struct(">cI")


class CodecError(ValueError):
    """Raised for values that cannot be encoded or bytes that do not decode."""


def _int_body(n: int) -> bytes:
    if n == 0:
        return b""
    length = (n + (n < 0)).bit_length() // 8 + 1
    return n.to_bytes(length, "big", signed=True)


def _frame(tag: bytes, body: bytes) -> bytes:
    return _HEADER.pack(tag, len(body)) + body


def encode(value: Any) -> bytes:
    """Return the canonical encoding of ``value``."""
    if value is None:
        return _frame(_NONE, b"")
    if value is True:
        return _frame(_TRUE, b"")
    if value is False:
        return _frame(_FALSE, b"")
    if isinstance(value, int):
        return _frame(_INT, _int_body(value))
    if isinstance(value, (bytes, bytearray)):
        return _frame(_BYTES, bytes(value))
    if isinstance(value, str):
        return _frame(_STR, value.encode("utf-8"))
    if isinstance(value, (list, tuple)):
        return _frame(_LIST, b"".join(encode(v) for v in value))
    if isinstance(value, dict):
        for k in value:
            if isinstance(k, bool) or not isinstance(k, (int, bytes, str)):
                raise CodecError(f"dict keys must be int, bytes or str, not {type(k).__name__}")
        items = sorted((encode(k), encode(v)) for k, v in value.items())
        for (a, _), (b, _) in zip(items, items[1:]):
            if a == b:
                raise CodecError("duplicate dict key after encoding")
        return _frame(_DICT, b"".join(k + v for k, v in items))
    raise CodecError(f"cannot canonically encode {type(value).__name__}")


def _decode_at(data: bytes, pos: int, limit: int) -> tuple[Any, int]:
    if pos + _HEADER.size > limit:
        raise CodecError("truncated header")
    tag, length = _HEADER.unpack_from(data, pos)
    start = pos + _HEADER.size
    end = start + length
    if end > limit:
        raise CodecError("truncated body")
    body = data[start:end]
    if tag in (_NONE, _TRUE, _FALSE):
        if length:
            raise CodecError("constant with non-empty body")
        return {_NONE: None, _TRUE: True, _FALSE: False}[tag], end
    if tag == _INT:
        n = int.from_bytes(body, "big", signed=True) if body else 0
        if _int_body(n) != body:
            raise CodecError("non-minimal integer")
        return n, end
    if tag == _BYTES:
        return body, end
    if tag == _STR:
        try:
            return body.decode("utf-8"), end
        except UnicodeDecodeError as exc:
            raise CodecError("invalid utf-8") from exc
    if tag == _LIST:
        items = []
        p = start
        while p < end:
            item, p = _decode_at(data, p, end)
            items.append(item)
        return items, end
    if tag == _DICT:
        out: dict = {}
        keys: list[bytes] = []
        p = start
        while p < end:
            k_start = p
            key, p = _decode_at(data, p, end)
            keys.append(data[k_start:p])
            val, p = _decode_at(data, p, end)
            if isinstance(key, bool) or not isinstance(key, (int, bytes, str)):
                raise CodecError("dict key of disallowed type")
            out[key] = val
        if keys != sorted(set(keys)):
            raise CodecError("dict keys not in canonical order")
        return out, end
    raise CodecError(f"unknown tag {tag!r}")


def decode(data: bytes) -> Any:
    """Decode one canonical value; trailing bytes are an error."""
    data = bytes(data)
    value, end = _decode_at(data, 0, len(data))
    if end != len(data):
        raise CodecError("trailing bytes after value")
    return value
