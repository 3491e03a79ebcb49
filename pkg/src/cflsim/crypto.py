"""Authenticated-encryption envelopes for relayed aggregates.

AES-GCM with 128-bit keys, 96-bit nonces and 128-bit tags.  Nonces are
built deterministically from (round, step, per-key counter) and every
(key, nonce) pair is checked against a registry so reuse is a hard error.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import AuthFailure, NonceReuse, UnsupportedKeyLength

KEY_BITS = 128
KEY_BYTES = KEY_BITS // 8
NONCE_BYTES = 12
TAG_BYTES = 16
BLOCK_BYTES = 16
DEFAULT_WINDOW_MS = 30_000

_STAMP = struct.Struct("<IIQ")  # round, step, wall-clock ms
_VEC_HEADER = struct.Struct("<Ic")  # element count, dtype code
_NONCE = struct.Struct(">III")


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def ae_gen(bits: int = KEY_BITS, seed=None) -> bytes:
    if bits != KEY_BITS:
        raise UnsupportedKeyLength(f"only {KEY_BITS}-bit keys are supported, got {bits}")
    return _rng(seed).bytes(bits // 8)


# -- vector wire format ------------------------------------------------------

def encode_vector(values: np.ndarray) -> bytes:
    """Length-prefixed little-endian 64-bit encoding (int64 or float64)."""
    arr = np.asarray(values)
    if arr.dtype.kind == "i":
        code, body = b"i", arr.astype("<i8").tobytes()
    elif arr.dtype.kind == "f":
        code, body = b"f", arr.astype("<f8").tobytes()
    else:
        raise TypeError(f"cannot encode dtype {arr.dtype}")
    return _VEC_HEADER.pack(arr.size, code) + body


def decode_vector(data: bytes) -> np.ndarray:
    n, code = _VEC_HEADER.unpack_from(data)
    body = data[_VEC_HEADER.size:]
    if len(body) != 8 * n:
        raise ValueError("vector length prefix does not match payload")
    dtype = {b"i": "<i8", b"f": "<f8"}[code]
    return np.frombuffer(body, dtype=dtype).astype(dtype[1:]).copy()


# -- payloads and envelopes ---------------------------------------------------

@dataclass(frozen=True)
class StampedPayload:
    payload: bytes
    round: int
    step: int
    wall_ms: int = 0

    def to_bytes(self) -> bytes:
        return self.payload + _STAMP.pack(self.round, self.step, self.wall_ms)

    @classmethod
    def from_bytes(cls, data: bytes) -> "StampedPayload":
        if len(data) < _STAMP.size:
            raise ValueError("payload shorter than timestamp")
        body, stamp = data[: -_STAMP.size], data[-_STAMP.size:]
        r, s, ms = _STAMP.unpack(stamp)
        return cls(body, r, s, ms)


@dataclass(frozen=True)
class Envelope:
    ciphertext: bytes
    tag: bytes
    nonce: bytes
    key_pair: tuple[int, int] | None = None

    @property
    def nbytes(self) -> int:
        return len(self.ciphertext) + len(self.tag) + len(self.nonce)

    def wire_bytes(self) -> bytes:
        return self.nonce + self.ciphertext + self.tag

    def flip_bit(self, bit: int) -> "Envelope":
        """Copy with one bit inverted; bits index nonce, then ciphertext, then tag."""
        raw = bytearray(self.wire_bytes())
        raw[bit // 8] ^= 1 << (bit % 8)
        nn, nc = len(self.nonce), len(self.ciphertext)
        return Envelope(bytes(raw[nn:nn + nc]), bytes(raw[nn + nc:]), bytes(raw[:nn]), self.key_pair)

    @property
    def n_bits(self) -> int:
        return 8 * self.nbytes


def make_nonce(round_: int, step: int, counter: int) -> bytes:
    return _NONCE.pack(round_ & 0xFFFFFFFF, step & 0xFFFFFFFF, counter & 0xFFFFFFFF)


class NonceRegistry:
    """Tracks every nonce used under each key for the lifetime of a run."""

    def __init__(self):
        self._used: dict[bytes, set[bytes]] = {}
        self._counter: dict[bytes, int] = {}

    def register(self, key: bytes, nonce: bytes) -> None:
        used = self._used.setdefault(bytes(key), set())
        if nonce in used:
            raise NonceReuse(f"nonce {nonce.hex()} already used under this key")
        used.add(nonce)

    def next_nonce(self, key: bytes, round_: int, step: int) -> bytes:
        k = bytes(key)
        c = self._counter.get(k, 0)
        self._counter[k] = c + 1
        return make_nonce(round_, step, c)

    def __len__(self) -> int:
        return sum(len(v) for v in self._used.values())


def ae_encrypt(
    payload: StampedPayload,
    key: bytes,
    nonce: bytes,
    registry: NonceRegistry,
    key_pair: tuple[int, int] | None = None,
) -> Envelope:
    if len(key) != KEY_BYTES:
        raise UnsupportedKeyLength(f"key must be {KEY_BYTES} bytes")
    if len(nonce) != NONCE_BYTES:
        raise ValueError(f"nonce must be {NONCE_BYTES} bytes")
    registry.register(key, nonce)
    sealed = AESGCM(key).encrypt(nonce, payload.to_bytes(), None)
    return Envelope(sealed[:-TAG_BYTES], sealed[-TAG_BYTES:], nonce, key_pair)


def ae_decrypt(env: Envelope, key: bytes) -> StampedPayload:
    if len(key) != KEY_BYTES or len(env.nonce) != NONCE_BYTES or len(env.tag) != TAG_BYTES:
        raise AuthFailure("malformed envelope or key")
    try:
        plain = AESGCM(key).decrypt(env.nonce, env.ciphertext + env.tag, None)
    except InvalidTag:
        raise AuthFailure("authentication tag mismatch") from None
    try:
        return StampedPayload.from_bytes(plain)
    except ValueError as exc:
        raise AuthFailure(str(exc)) from None


def validate_timestamp(
    payload: StampedPayload,
    expected: tuple[int, int],
    now_ms: int,
    window_ms: int = DEFAULT_WINDOW_MS,
) -> bool:
    """Accept only the expected logical (round, step) with wall-clock skew within the window."""
    if (payload.round, payload.step) != tuple(expected):
        return False
    return abs(int(now_ms) - int(payload.wall_ms)) <= window_ms


# -- plain block cipher used by the key-discovery challenge --------------------

def ck_encrypt(key: bytes, blocks: bytes) -> bytes:
    enc = Cipher(algorithms.AES(key), modes.ECB()).encryptor()
    return enc.update(blocks) + enc.finalize()


def ck_decrypt(key: bytes, blocks: bytes) -> bytes:
    dec = Cipher(algorithms.AES(key), modes.ECB()).decryptor()
    return dec.update(blocks) + dec.finalize()


def xor_bytes(chunks: Iterable[bytes]) -> bytes:
    acc = None
    for c in chunks:
        v = np.frombuffer(c, dtype=np.uint8)
        acc = v.copy() if acc is None else acc ^ v
    if acc is None:
        raise ValueError("nothing to XOR")
    return acc.tobytes()
