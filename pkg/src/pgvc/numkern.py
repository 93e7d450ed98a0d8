"""Deterministic numeric primitives shared by every stage of the codec.

Encoder and decoder must produce bit-identical intermediate tensors, so the
reductions here have pinned accumulation orders (see backend.matmul) and the
resampling operators are expressed through those same primitives. All public
ops take and return float64 ndarrays.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from . import backend
from .errors import ContractError, ShapeError

__all__ = [
    "matmul",
    "masked_softmax",
    "layer_norm",
    "sigmoid",
    "gelu",
    "resample_down",
    "resample_up",
    "area_weight_matrix",
    "bilinear_axis_plan",
]


def _as_f64_2d(x: np.ndarray, name: str) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {x.shape}")
    return np.ascontiguousarray(x, dtype=np.float64)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with ascending-k accumulation (bit-reproducible)."""
    a = _as_f64_2d(a, "a")
    b = _as_f64_2d(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dims differ: {a.shape} @ {b.shape}")
    return backend.matmul(a, b)


def masked_softmax(
    scores: np.ndarray, mask: np.ndarray | None, out: np.ndarray | None = None
) -> np.ndarray:
    """Row-wise softmax over allowed entries; disallowed outputs are exactly 0.

    ``mask`` is boolean, True = allowed (None means everything is allowed).
    Every row must allow at least one entry. Outputs are bitwise independent
    of the score values at disallowed positions (they are replaced before any
    exp/sum happens).

    ``out`` may be the ``scores`` buffer itself; large attention matrices are
    the dominant allocation on the coding path, so callers that own their
    score buffer can reuse it.  The arithmetic is the same either way.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ShapeError(f"scores must be 2-D, got shape {scores.shape}")
    if mask is not None:
        mask = np.asarray(mask)
        if mask.dtype != np.bool_:
            raise ShapeError(f"mask must be boolean, got dtype {mask.dtype}")
        if scores.shape != mask.shape:
            raise ShapeError(
                f"scores/mask must be matching 2-D, got {scores.shape} vs {mask.shape}"
            )
    if scores.shape[0] == 0:
        return np.zeros_like(scores)
    if mask is not None and not mask.any(axis=1).all():
        raise ContractError("masked_softmax row with no allowed entries")
    if out is None:
        out = np.empty_like(scores)
    elif out.shape != scores.shape or out.dtype != np.float64:
        raise ShapeError("out buffer must be float64 with the scores shape")
    with np.errstate(invalid="ignore"):
        if mask is None:
            mx = scores.max(axis=1, keepdims=True)
            np.subtract(scores, mx, out=out)
        else:
            np.copyto(out, scores)
            out[~mask] = -np.inf
            mx = out.max(axis=1, keepdims=True)
            np.subtract(out, mx, out=out)  # -inf - finite stays -inf
    np.exp(out, out=out)  # exp(-inf) == +0.0 exactly
    out /= out.sum(axis=1, keepdims=True)
    return out


def layer_norm(
    x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = np.asarray(x, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise ShapeError("layer_norm needs a non-empty last axis")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"gamma/beta must have shape ({d},), got {gamma.shape}/{beta.shape}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    var = np.square(x - mu).mean(axis=-1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + eps)
    return xhat * gamma + beta


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic; sigmoid(0) == 0.5 exactly."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact (erf-based) gaussian error linear unit."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def area_weight_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) row-stochastic matrix of fractional cell overlaps.

    Output cell o covers input span [o*n_in/n_out, (o+1)*n_in/n_out); each
    overlapped input cell contributes proportionally. Rows sum to 1, so the
    operator preserves means and maps constants to themselves.
    """
    if n_in <= 0 or n_out <= 0:
        raise ShapeError(f"resample axis sizes must be positive, got {n_in}->{n_out}")
    w = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for o in range(n_out):
        lo = o * scale
        hi = (o + 1) * scale
        j0 = int(math.floor(lo))
        j1 = min(int(math.ceil(hi)), n_in)
        for j in range(j0, j1):
            ov = min(hi, j + 1.0) - max(lo, float(j))
            if ov > 0:
                w[o, j] = ov / scale
    return w


def bilinear_axis_plan(n_in: int, n_out: int):
    """Gather indices + fractions for half-pixel-center linear interpolation."""
    if n_in <= 0 or n_out <= 0:
        raise ShapeError(f"resample axis sizes must be positive, got {n_in}->{n_out}")
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, float(n_in - 1))
    i0 = np.minimum(np.floor(pos).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = pos - i0
    return i0, i1, frac


def _check_thwc(x: np.ndarray, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"{name} must be (t, h, w, c), got shape {x.shape}")
    return x


def _apply_rows(mat: np.ndarray, x: np.ndarray, axis: int) -> np.ndarray:
    """Apply a (n_out, n_in) matrix along one spatial axis of (t,h,w,c)."""
    moved = np.moveaxis(x, axis, 0)
    flat = np.ascontiguousarray(moved.reshape(moved.shape[0], -1))
    y = backend.matmul(np.ascontiguousarray(mat), flat)
    y = y.reshape((mat.shape[0],) + moved.shape[1:])
    return np.moveaxis(y, 0, axis)


def resample_down(x: np.ndarray, size: "tuple[int, int]") -> np.ndarray:
    """Area-average a (t,h,w,c) tensor down (or across) to (t,h',w',c)."""
    x = _check_thwc(x, "x")
    h, w = x.shape[1], x.shape[2]
    hh, ww = int(size[0]), int(size[1])
    if hh <= 0 or ww <= 0:
        raise ShapeError(f"resample target must be positive, got {size}")
    if hh > h or ww > w:
        raise ContractError(f"resample_down target {size} exceeds source {(h, w)}")
    if (hh, ww) == (h, w):
        return x.copy()
    out = x
    if hh != h:
        out = _apply_rows(area_weight_matrix(h, hh), out, 1)
    if ww != w:
        out = _apply_rows(area_weight_matrix(w, ww), out, 2)
    return out


def _lerp_axis(x: np.ndarray, plan, axis: int) -> np.ndarray:
    i0, i1, frac = plan
    lo = np.take(x, i0, axis=axis)
    hi = np.take(x, i1, axis=axis)
    shape = [1] * x.ndim
    shape[axis] = frac.shape[0]
    f = frac.reshape(shape)
    # lerp form keeps constants exact: lo + f*(hi-lo) == lo when hi == lo
    return lo + f * (hi - lo)


def resample_up(x: np.ndarray, size: "tuple[int, int]") -> np.ndarray:
    """Bilinear (half-pixel-center) upsample of (t,h,w,c) to (t,h',w',c)."""
    x = _check_thwc(x, "x")
    h, w = x.shape[1], x.shape[2]
    hh, ww = int(size[0]), int(size[1])
    if hh <= 0 or ww <= 0:
        raise ShapeError(f"resample target must be positive, got {size}")
    if hh < h or ww < w:
        raise ContractError(f"resample_up target {size} below source {(h, w)}")
    if (hh, ww) == (h, w):
        return x.copy()
    out = x
    if hh != h:
        out = _lerp_axis(out, bilinear_axis_plan(h, hh), 1)
    if ww != w:
        out = _lerp_axis(out, bilinear_axis_plan(w, ww), 2)
    return out
