"""Compare the numba and numpy backends on the codec's two hot loops.

Both backends must produce bitwise-identical results -- the decoder replays
the encoder's arithmetic exactly, so "fast" is only allowed to mean "same
numbers, sooner". This script measures the fixed-order matmul and the binary
range coder on representative shapes and verifies the equality while at it.

Run:  python3 benchmarks/bench_backends.py [--repeats N]
"""

import argparse
import time

import numpy as np

from pgvc import backend


def _time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_matmul(repeats):
    # (tokens x d) @ (d x d) projections and (tokens x dh) @ (dh x tokens)
    # attention scores are where encode/decode time goes.
    shapes = [(4096, 32, 32), (1024, 16, 1024), (256, 32, 4096)]
    rows = []
    for m, k, n in shapes:
        rng = np.random.default_rng(m + k + n)
        a = rng.normal(size=(m, k))
        b = rng.normal(size=(k, n))
        ref = backend.matmul_numpy(a, b)
        t_np = _time(lambda: backend.matmul_numpy(a, b), repeats)
        if backend.HAS_NUMBA:
            out = np.zeros((m, n), dtype=np.float64)
            backend.matmul_numba(a, b, out)  # warm the JIT cache
            def run():
                buf = np.zeros((m, n), dtype=np.float64)
                backend.matmul_numba(a, b, buf)
                return buf
            got = run()
            t_nb = _time(run, repeats)
            identical = np.array_equal(ref, got)
        else:
            t_nb, identical = None, None
        rows.append((f"matmul {m}x{k}x{n}", 2.0 * m * k * n, t_np, t_nb, identical))
    return rows


def bench_range_coder(repeats):
    rng = np.random.default_rng(99)
    n = 1_000_000
    bits = rng.integers(0, 2, size=n, dtype=np.uint8)
    p16 = rng.integers(1, 65536, size=n, dtype=np.int64)
    scratch = np.empty((n * 17) // 8 + 16, dtype=np.uint8)

    n_np = backend._rc_encode_loop(bits, p16, scratch)
    ref_payload = scratch[:n_np].copy()
    dec = np.empty(n, dtype=np.uint8)
    backend._rc_decode_loop(ref_payload, p16, dec)
    assert np.array_equal(dec, bits), "numpy round trip broke"

    t_np_enc = _time(lambda: backend._rc_encode_loop(bits, p16, scratch), repeats)
    t_np_dec = _time(lambda: backend._rc_decode_loop(ref_payload, p16, dec), repeats)

    rows = [("rc encode 1e6 bits", n, t_np_enc, None, None),
            ("rc decode 1e6 bits", n, t_np_dec, None, None)]
    if backend.HAS_NUMBA:
        backend.rc_encode_numba(bits[:64], p16[:64], scratch)  # warm the JIT
        n_nb = backend.rc_encode_numba(bits, p16, scratch)
        identical = n_nb == n_np and np.array_equal(scratch[:n_nb], ref_payload)
        t_nb_enc = _time(lambda: backend.rc_encode_numba(bits, p16, scratch), repeats)
        backend.rc_decode_numba(ref_payload, p16, dec)
        dec_ok = np.array_equal(dec, bits)
        t_nb_dec = _time(lambda: backend.rc_decode_numba(ref_payload, p16, dec),
                         repeats)
        rows[0] = ("rc encode 1e6 bits", n, t_np_enc, t_nb_enc, identical)
        rows[1] = ("rc decode 1e6 bits", n, t_np_dec, t_nb_dec, dec_ok)
    return rows


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=3,
                        help="timing repeats, best-of (default 3)")
    args = parser.parse_args(argv)

    print(f"active backend: {backend.ACTIVE_BACKEND} "
          f"(numba importable: {backend.HAS_NUMBA})")
    print(f"{'kernel':<24} {'numpy':>10} {'numba':>10} {'speedup':>8}  bitwise")
    for name, work, t_np, t_nb, same in (bench_matmul(args.repeats)
                                         + bench_range_coder(args.repeats)):
        np_s = f"{1e3 * t_np:8.2f}ms"
        if t_nb is None:
            print(f"{name:<24} {np_s:>10} {'-':>10} {'-':>8}  -")
        else:
            nb_s = f"{1e3 * t_nb:8.2f}ms"
            flag = "yes" if same else "NO <-- BUG"
            print(f"{name:<24} {np_s:>10} {nb_s:>10} {t_np / t_nb:7.1f}x  {flag}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
