"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The codec requires bit-reproducible arithmetic between encoder and decoder,
so the usual BLAS matmul is off the table (its accumulation order is
unspecified). Both backends below accumulate matrix products in ascending-k
order, one rounding per add, and therefore agree bitwise with a naive
triple loop. The binary range coder is a per-bit state machine and is the
other hot loop.

Backend selection: environment variable ``PGVC_BACKEND`` in
``{"auto", "numba", "numpy"}`` (default ``auto``: numba when importable).
Both implementations stay importable regardless of the flag so they can be
benchmarked against each other in one process.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import ConfigError

_RC_TOP = 1 << 24
_RC_BOT = 0xFF000000
_MASK32 = 0xFFFFFFFF

_requested = os.environ.get("PGVC_BACKEND", "auto").strip().lower()
if _requested not in ("auto", "numba", "numpy"):
    raise ConfigError(
        f"PGVC_BACKEND must be one of auto/numba/numpy, got {_requested!r}"
    )

if _requested in ("auto", "numba"):
    try:
        from numba import njit

        HAS_NUMBA = True
    except ImportError:  # pragma: no cover - exercised via PGVC_BACKEND=numpy
        if _requested == "numba":
            raise ConfigError("PGVC_BACKEND=numba but numba is not importable")
        HAS_NUMBA = False
else:
    HAS_NUMBA = False

ACTIVE_BACKEND = "numba" if HAS_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# fixed-order matrix multiply
# ---------------------------------------------------------------------------

def matmul_numpy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(m,k) @ (k,n) accumulated in ascending-k order, one add per term."""
    m, kk = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float64)
    for k in range(kk):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def _matmul_loop(a, b, out):
    m, kk = a.shape
    n = b.shape[1]
    for i in range(m):
        for k in range(kk):
            aik = a[i, k]
            for j in range(n):
                out[i, j] = out[i, j] + aik * b[k, j]
    return out


# ---------------------------------------------------------------------------
# binary range coder (32-bit register, byte-wise renormalization)
# ---------------------------------------------------------------------------
#
# p16 is P(bit == 1) in 1/65536 units, clamped to [1, 65535]. bound is the
# width of the bit==1 sub-interval, computed with a full 64-bit product so
# quantization costs stay microscopic. The encoder holds back the most
# recent byte (cache) plus any run of 0xFF bytes so a carry out of `low`
# can still propagate; the first shift emits nothing (no leading pad byte),
# making the payload exactly (data shifts + 4) bytes, which the decoder
# consumes in full - that is what turns truncation into a detectable error.

def _rc_encode_loop(bits, p16, out):
    low = 0
    rng = _MASK32
    cache = 0
    n_pending = 0
    started = False
    pos = 0
    n_calls = bits.shape[0] + 5
    for step in range(n_calls):
        if step < bits.shape[0]:
            bound = (rng * int(p16[step])) >> 16
            if bits[step] != 0:
                rng = bound
            else:
                low += bound
                rng -= bound
            while rng < _RC_TOP:
                rng = (rng << 8) & _MASK32
                # shift_low
                if low < _RC_BOT or low > _MASK32:
                    carry = low >> 32
                    if started:
                        out[pos] = (cache + carry) & 0xFF
                        pos += 1
                    while n_pending > 0:
                        out[pos] = (0xFF + carry) & 0xFF
                        pos += 1
                        n_pending -= 1
                    cache = (low >> 24) & 0xFF
                    started = True
                else:
                    n_pending += 1
                low = (low << 8) & _MASK32
        else:
            # flush: five more shifts drain everything the decoder needs
            if low < _RC_BOT or low > _MASK32:
                carry = low >> 32
                if started:
                    out[pos] = (cache + carry) & 0xFF
                    pos += 1
                while n_pending > 0:
                    out[pos] = (0xFF + carry) & 0xFF
                    pos += 1
                    n_pending -= 1
                cache = (low >> 24) & 0xFF
                started = True
            else:
                n_pending += 1
            low = (low << 8) & _MASK32
    return pos


def _rc_decode_loop(payload, p16, bits):
    rng = _MASK32
    code = 0
    pos = 0
    n = bits.shape[0]
    if payload.shape[0] < 4:
        return -1
    for _ in range(4):
        code = (code << 8) | int(payload[pos])
        pos += 1
    for step in range(n):
        bound = (rng * int(p16[step])) >> 16
        if code < bound:
            bits[step] = 1
            rng = bound
        else:
            bits[step] = 0
            code -= bound
            rng -= bound
        while rng < _RC_TOP:
            if pos >= payload.shape[0]:
                return -1
            rng = (rng << 8) & _MASK32
            code = (code << 8) | int(payload[pos])
            pos += 1
    return pos


if HAS_NUMBA:
    matmul_numba = njit("float64[:,::1](float64[:,::1], float64[:,::1], float64[:,::1])", cache=True)(_matmul_loop)
    rc_encode_numba = njit("int64(uint8[::1], int64[::1], uint8[::1])", cache=True)(_rc_encode_loop)
    rc_decode_numba = njit("int64(uint8[::1], int64[::1], uint8[::1])", cache=True)(_rc_decode_loop)
else:  # pragma: no cover - numpy-only environments
    matmul_numba = None
    rc_encode_numba = None
    rc_decode_numba = None


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Backend-dispatched fixed-order (m,k)@(k,n) product."""
    if ACTIVE_BACKEND == "numba":
        # the compiled signature wants writable buffers; read-only views
        # (e.g. frozen model weights) get a private copy
        if not a.flags.writeable:
            a = a.copy()
        if not b.flags.writeable:
            b = b.copy()
        out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
        return matmul_numba(a, b, out)
    return matmul_numpy(a, b)


def rc_encode_bits(bits: np.ndarray, p16: np.ndarray) -> bytes:
    """Arithmetic-code a uint8 bit array under per-bit P(1) in 1/65536 units."""
    n = bits.shape[0]
    out = np.empty((n * 17) // 8 + 16, dtype=np.uint8)
    if ACTIVE_BACKEND == "numba":
        n_bytes = rc_encode_numba(bits, p16, out)
    else:
        n_bytes = _rc_encode_loop(bits, p16, out)
    return out[:n_bytes].tobytes()


def rc_decode_bits(payload: np.ndarray, p16: np.ndarray, n_bits: int) -> "tuple[np.ndarray, int]":
    """Decode ``n_bits`` from a payload; returns (bits, bytes consumed or -1)."""
    bits = np.empty(n_bits, dtype=np.uint8)
    if ACTIVE_BACKEND == "numba":
        consumed = rc_decode_numba(payload, p16, bits)
    else:
        consumed = _rc_decode_loop(payload, p16, bits)
    return bits, int(consumed)
