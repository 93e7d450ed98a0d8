"""Binary arithmetic coding with quantized per-bit probabilities.

Probabilities are quantized to p16/65536 with p16 in [1, 65535] before any
coding, so encoder/decoder agreement is an integer equality and decodability
never rests on float reproducibility. The coder itself is a 32-bit range
coder with byte-wise renormalization and carry propagation; fixed overhead
is 4 bytes of flush (the first register byte is emitted lazily, so there is
no leading pad byte).

Two equivalent interfaces:

* array path (``ac_encode`` / ``ac_decode`` with an ndarray of p16 values):
  runs through the backend kernels, used per scale by the pipeline;
* stepping path (``RangeEncoder`` / ``RangeDecoder`` and ``ac_decode`` with
  a callable): bit-at-a-time, for probability providers that depend on the
  decoded prefix.

Both produce/consume identical bytes (tested).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend
from .errors import ContractError, DecodeError

PROB_EPS = 2.0**-16
_TOP = 1 << 24
_BOT = 0xFF000000
_MASK32 = 0xFFFFFFFF

__all__ = [
    "PROB_EPS",
    "CodedSegment",
    "quantize_prob",
    "quantize_probs",
    "ac_encode",
    "ac_decode",
    "shannon_bits",
    "RangeEncoder",
    "RangeDecoder",
]


@dataclass(frozen=True)
class CodedSegment:
    """An entropy-coded payload plus the number of source bits it carries."""

    payload: bytes
    n_bits: int


def quantize_prob(p: float) -> int:
    """Quantize P(bit=1) to p16 in [1, 65535]; round-to-nearest, clamped."""
    if not np.isfinite(p):
        raise ContractError(f"probability must be finite, got {p}")
    return int(min(65535, max(1, round(p * 65536.0))))


def quantize_probs(p: np.ndarray) -> np.ndarray:
    """Vectorized quantize_prob -> int64 array of p16 values."""
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ContractError("probabilities must be finite")
    q = np.rint(p * 65536.0).astype(np.int64)
    return np.clip(q, 1, 65535)


def shannon_bits(bits: np.ndarray, p16: np.ndarray) -> float:
    """Ideal code length sum(-log2 q_i), q_i = p16/65536 for 1-bits else 1-p16/65536."""
    bits = np.asarray(bits)
    p = np.asarray(p16, dtype=np.float64) / 65536.0
    q = np.where(bits != 0, p, 1.0 - p)
    return float(-np.log2(q).sum())


def _check_pair(bits, p16):
    bits = np.ascontiguousarray(np.asarray(bits).reshape(-1), dtype=np.uint8)
    p16 = np.ascontiguousarray(np.asarray(p16).reshape(-1), dtype=np.int64)
    if bits.shape[0] != p16.shape[0]:
        raise ContractError(
            f"bits/probs length mismatch: {bits.shape[0]} vs {p16.shape[0]}"
        )
    if p16.size and (p16.min() < 1 or p16.max() > 65535):
        raise ContractError("p16 values must lie in [1, 65535]")
    return bits, p16


def ac_encode(bits: np.ndarray, p16: np.ndarray) -> CodedSegment:
    """Arithmetic-code a bit sequence under quantized probabilities."""
    bits, p16 = _check_pair(bits, p16)
    payload = backend.rc_encode_bits(bits, p16)
    return CodedSegment(payload=payload, n_bits=int(bits.shape[0]))


def ac_decode(segment: CodedSegment, probs) -> np.ndarray:
    """Recover the exact bit sequence from a segment.

    ``probs`` is either an int64 array of p16 values (one per bit) or a
    callable ``(i, decoded_prefix) -> p16`` receiving all bits decoded so
    far (this is how prefix-conditioned probability models plug in). The
    whole payload must be consumed: short or over-long payloads raise
    DecodeError rather than returning corrupt bits.
    """
    n = segment.n_bits
    if callable(probs):
        dec = RangeDecoder(segment.payload)
        out = np.empty(n, dtype=np.uint8)
        for i in range(n):
            out[i] = dec.decode_bit(int(probs(i, out[:i])))
        consumed = dec.consumed
    else:
        p16 = np.ascontiguousarray(np.asarray(probs).reshape(-1), dtype=np.int64)
        if p16.shape[0] != n:
            raise ContractError(f"expected {n} probabilities, got {p16.shape[0]}")
        if p16.size and (p16.min() < 1 or p16.max() > 65535):
            raise ContractError("p16 values must lie in [1, 65535]")
        payload = np.frombuffer(segment.payload, dtype=np.uint8).copy()
        out, consumed = backend.rc_decode_bits(payload, p16, n)
        if consumed < 0:
            raise DecodeError(
                f"payload truncated: {len(segment.payload)} bytes for {n} bits"
            )
    if consumed != len(segment.payload):
        raise DecodeError(
            f"payload length mismatch: consumed {consumed} of {len(segment.payload)} bytes"
        )
    return out


class RangeEncoder:
    """Bit-at-a-time encoder; byte-identical to the array fast path."""

    def __init__(self):
        self._low = 0
        self._rng = _MASK32
        self._cache = 0
        self._pending = 0
        self._started = False
        self._out = bytearray()
        self._done = False

    def _shift_low(self):
        low = self._low
        if low < _BOT or low > _MASK32:
            carry = low >> 32
            if self._started:
                self._out.append((self._cache + carry) & 0xFF)
            elif carry:
                raise AssertionError("carry out of an empty stream")
            if self._pending:
                self._out.extend(((0xFF + carry) & 0xFF,) * self._pending)
                self._pending = 0
            self._cache = (low >> 24) & 0xFF
            self._started = True
        else:
            self._pending += 1
        self._low = (low << 8) & _MASK32

    def encode_bit(self, bit: int, p16: int) -> None:
        if self._done:
            raise ContractError("encoder already finished")
        if not 1 <= p16 <= 65535:
            raise ContractError(f"p16 out of range: {p16}")
        bound = (self._rng * p16) >> 16
        if bit:
            self._rng = bound
        else:
            self._low += bound
            self._rng -= bound
        while self._rng < _TOP:
            self._rng = (self._rng << 8) & _MASK32
            self._shift_low()

    def finish(self) -> bytes:
        if not self._done:
            for _ in range(5):
                self._shift_low()
            self._done = True
        return bytes(self._out)


class RangeDecoder:
    """Bit-at-a-time decoder over a fixed payload."""

    def __init__(self, payload: bytes):
        self._payload = payload
        self._pos = 0
        self._rng = _MASK32
        self._code = 0
        if len(payload) < 4:
            raise DecodeError(f"payload shorter than flush: {len(payload)} bytes")
        for _ in range(4):
            self._code = (self._code << 8) | payload[self._pos]
            self._pos += 1

    @property
    def consumed(self) -> int:
        return self._pos

    def decode_bit(self, p16: int) -> int:
        if not 1 <= p16 <= 65535:
            raise ContractError(f"p16 out of range: {p16}")
        bound = (self._rng * p16) >> 16
        if self._code < bound:
            bit = 1
            self._rng = bound
        else:
            bit = 0
            self._code -= bound
            self._rng -= bound
        while self._rng < _TOP:
            if self._pos >= len(self._payload):
                raise DecodeError(
                    f"payload truncated at byte {self._pos} of {len(self._payload)}"
                )
            self._rng = (self._rng << 8) & _MASK32
            self._code = (self._code << 8) | self._payload[self._pos]
            self._pos += 1
        return bit
