"""Feature-based white-box watermarks over a slice of the flat parameter vector.

A key is a ±1 projection matrix ``E`` (k x d).  Extraction reads
``sign(E @ w)`` with sign(0) = +1; embedding minimizes the hinge penalty
``sum_i max(0, gamma - b_i (E @ w)_i)``.

The matrix is generated from a SHA-256 counter stream rather than a library
PRNG so that any implementation can rebuild it bit for bit: digest ``c`` is
``SHA-256(key_seed as 8-byte BE | b"wm-proj" | c as 8-byte BE)``, digests are
concatenated, and entry ``(i, j)`` is +1 when bit ``i * d + j`` of that stream
(most significant bit first) is set, -1 otherwise.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

DEFAULT_GAMMA = 0.1
DEFAULT_LAMBDA = 0.5


class BadDimensions(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class WatermarkKey:
    key_seed: int
    k: int
    d: int
    E: np.ndarray  # (k, d) float64 of ±1


@dataclass(frozen=True)
class ParamSlice:
    offset: int
    length: int

    def take(self, values: np.ndarray) -> np.ndarray:
        if self.offset < 0 or self.offset + self.length > len(values):
            raise BadDimensions(
                f"slice [{self.offset}, {self.offset + self.length}) outside {len(values)} params")
        return values[self.offset:self.offset + self.length]


def _projection_bits(key_seed: int, n: int) -> np.ndarray:
    seed = key_seed.to_bytes(8, "big")
    n_digests = -(-n // 256)
    stream = b"".join(
        hashlib.sha256(seed + b"wm-proj" + c.to_bytes(8, "big")).digest()
        for c in range(n_digests)
    )
    return np.unpackbits(np.frombuffer(stream, dtype=np.uint8))[:n]


def derive_key(key_seed: int, k: int, d: int) -> WatermarkKey:
    if not 1 <= k <= d:
        raise BadDimensions(f"need 1 <= k <= d, got k={k}, d={d}")
    if not 0 <= key_seed < 1 << 64:
        raise BadDimensions("key seed must fit in 64 unsigned bits")
    bits = _projection_bits(key_seed, k * d).reshape(k, d)
    E = np.where(bits == 1, 1.0, -1.0)
    E.setflags(write=False)
    return WatermarkKey(key_seed, k, d, E)


def _check_slice(w, key: WatermarkKey) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (key.d,):
        raise LengthMismatch(f"slice has shape {w.shape}, key expects ({key.d},)")
    return w


def _check_bits(bits, k: int) -> np.ndarray:
    b = np.asarray(bits, dtype=np.float64)
    if b.shape != (k,):
        raise LengthMismatch(f"expected {k} bits, got shape {b.shape}")
    return b


def extract(w, key: WatermarkKey) -> np.ndarray:
    """Bits recovered from a parameter slice, as an int array of ±1."""
    w = _check_slice(w, key)
    return np.where(key.E @ w >= 0.0, 1, -1).astype(np.int64)


def regularizer(w, key: WatermarkKey, target, gamma: float = DEFAULT_GAMMA):
    """Hinge embedding loss and its gradient with respect to the slice.

    A term sitting exactly on the kink counts as inactive.
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    w = _check_slice(w, key)
    b = _check_bits(target, key.k)
    slack = gamma - b * (key.E @ w)
    active = slack > 0.0
    loss = float(np.sum(slack[active]))
    grad = -(b[active] @ key.E[active]) if active.any() else np.zeros(key.d)
    return loss, grad


def detection_rate(extracted, target) -> float:
    a = np.asarray(extracted)
    b = np.asarray(target)
    if a.shape != b.shape:
        raise LengthMismatch(f"bit vectors differ in shape: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise LengthMismatch("empty bit vectors")
    return float(np.mean(a == b))


def encode_bits(bits) -> bytes:
    """One byte per bit: 0x01 for +1, 0x00 for -1."""
    arr = np.asarray(bits)
    if not np.all((arr == 1) | (arr == -1)):
        raise ValueError("bits must be +1 or -1")
    return (arr == 1).astype(np.uint8).tobytes()


def commitment(bits, key_seed: int) -> bytes:
    return hashlib.sha256(encode_bits(bits) + int(key_seed).to_bytes(8, "big")).digest()


def embed(w, key: WatermarkKey, target, gamma: float = DEFAULT_GAMMA,
          lr: float = 0.01, max_steps: int = 500) -> tuple[np.ndarray, int]:
    """Plain gradient descent on the hinge penalty alone.

    Returns the updated slice and the number of steps taken; stops as soon as
    every hinge is inactive.
    """
    w = _check_slice(w, key).copy()
    for step in range(max_steps):
        loss, grad = regularizer(w, key, target, gamma)
        if loss == 0.0:
            return w, step
        w -= lr * grad
    return w, max_steps
