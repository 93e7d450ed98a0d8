"""Multi-scale residual binary quantization of latent tensors.

A latent f is decomposed over K scales: at scale k the running residual is
downsampled to (h_k, w_k), every token vector is sign-quantized to L bits
(BSQ: value (2b-1)/sqrt(L)), the dequantized map is upsampled back to full
resolution and subtracted. Summing the upsampled dequantized maps of any
prefix of scales gives a progressively refined approximation; the final
residual satisfies the telescoping identity f = sum_k U_k(r_k) + e_{K+1}
exactly (up to float rounding).

Bit layout inside a TokenMap is row-major (frame, row, col, bit), which is
also the coding order of every entropy-coded segment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .numkern import resample_down, resample_up

__all__ = [
    "ScaleSpec",
    "ScaleSchedule",
    "TokenMap",
    "ScalePyramid",
    "default_schedule",
    "bsq_quantize",
    "bsq_dequantize",
    "ms_quantize",
    "ms_dequantize",
    "aggregate_scale_input",
    "prefix_scale_input",
]


@dataclass(frozen=True)
class ScaleSpec:
    """One pyramid level: 1-based index, token grid size, bits per token."""

    index: int
    width: int
    height: int
    bit_length: int

    def __post_init__(self):
        if self.index < 1:
            raise ShapeError(f"scale index must be >= 1, got {self.index}")
        if min(self.width, self.height, self.bit_length) < 1:
            raise ShapeError(
                f"scale {self.index}: extents must be positive "
                f"({self.width}x{self.height}, L={self.bit_length})"
            )

    def raw_bits(self, frames: int) -> int:
        return frames * self.height * self.width * self.bit_length


@dataclass(frozen=True)
class ScaleSchedule:
    scales: "tuple[ScaleSpec, ...]"

    def __post_init__(self):
        if not self.scales:
            raise ShapeError("schedule must contain at least one scale")
        for pos, spec in enumerate(self.scales, start=1):
            if spec.index != pos:
                raise ShapeError(
                    f"scale indices must be 1..K contiguous, got {spec.index} at {pos}"
                )
        for a, b in zip(self.scales, self.scales[1:]):
            if b.width < a.width or b.height < a.height:
                raise ShapeError(
                    f"scale resolutions must be monotone: {a} then {b}"
                )

    def __len__(self) -> int:
        return len(self.scales)

    def __iter__(self):
        return iter(self.scales)

    def __getitem__(self, k: int) -> ScaleSpec:
        """1-based scale lookup."""
        if not 1 <= k <= len(self.scales):
            raise ContractError(f"scale index {k} outside 1..{len(self.scales)}")
        return self.scales[k - 1]

    @property
    def full_size(self) -> "tuple[int, int]":
        last = self.scales[-1]
        return last.height, last.width


def default_schedule(latent_h: int, latent_w: int, channels: int) -> ScaleSchedule:
    """Square scales 1,2,4,... while the side fits strictly inside the latent
    grid, then the full grid. One bit-length = channel count everywhere."""
    if min(latent_h, latent_w, channels) < 1:
        raise ShapeError("latent extents must be positive")
    sides = []
    side = 1
    while side < min(latent_h, latent_w):
        sides.append(side)
        side *= 2
    dims = [(s, s) for s in sides] + [(latent_h, latent_w)]
    return ScaleSchedule(
        tuple(
            ScaleSpec(index=i + 1, width=w, height=h, bit_length=channels)
            for i, (h, w) in enumerate(dims)
        )
    )


@dataclass(frozen=True)
class TokenMap:
    """Binary tokens of one scale: bits array of shape (T', h, w, L)."""

    spec: ScaleSpec
    bits: np.ndarray

    def __post_init__(self):
        b = self.bits
        if not isinstance(b, np.ndarray) or b.dtype != np.uint8 or b.ndim != 4:
            raise ShapeError("token bits must be a uint8 (T',h,w,L) ndarray")
        if b.shape[1:] != (self.spec.height, self.spec.width, self.spec.bit_length):
            raise ShapeError(
                f"token bits shape {b.shape} does not match scale {self.spec}"
            )
        if b.size and b.max() > 1:
            raise ContractError("token bits must be 0/1")

    @property
    def frames(self) -> int:
        return self.bits.shape[0]

    @property
    def n_bits(self) -> int:
        return self.bits.size

    def flat_bits(self) -> np.ndarray:
        """Coding order: (frame, row, col, bit) row-major."""
        return np.ascontiguousarray(self.bits).reshape(-1)

    def dequantize(self) -> np.ndarray:
        return bsq_dequantize(self.bits)


@dataclass(frozen=True)
class ScalePyramid:
    """All token maps of one kind (intra: T'=1, inter: remaining frames)."""

    schedule: ScaleSchedule
    maps: "tuple[TokenMap, ...]"
    kind: str

    def __post_init__(self):
        if self.kind not in ("intra", "inter"):
            raise ContractError(f"pyramid kind must be intra/inter, got {self.kind}")
        if len(self.maps) != len(self.schedule):
            raise ShapeError(
                f"pyramid has {len(self.maps)} maps for K={len(self.schedule)}"
            )
        frames = {m.frames for m in self.maps}
        if len(frames) > 1:
            raise ShapeError(f"inconsistent frame counts across scales: {frames}")
        for m, spec in zip(self.maps, self.schedule):
            if m.spec != spec:
                raise ShapeError(f"map spec {m.spec} != schedule spec {spec}")
        if self.kind == "intra" and self.maps and self.maps[0].frames != 1:
            raise ShapeError("intra pyramids must carry exactly one frame")

    @property
    def frames(self) -> int:
        return self.maps[0].frames

    @property
    def n_scales(self) -> int:
        return len(self.schedule)


def bsq_quantize(v: np.ndarray) -> "tuple[np.ndarray, np.ndarray]":
    """Sign-quantize along the last axis: bit 1 iff v >= 0 (sign(0) := +1).

    Returns (bits, dequantized values (2b-1)/sqrt(L)).
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim < 1 or v.shape[-1] < 1:
        raise ShapeError("bsq_quantize needs a non-empty last axis")
    bits = (v >= 0.0).astype(np.uint8)
    return bits, bsq_dequantize(bits)


def bsq_dequantize(bits: np.ndarray) -> np.ndarray:
    length = bits.shape[-1]
    scale = 1.0 / math.sqrt(length)
    return (2.0 * bits.astype(np.float64) - 1.0) * scale


def _check_latent(f: np.ndarray, schedule: ScaleSchedule) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 4:
        raise ShapeError(f"latent must be (T',h,w,L), got shape {f.shape}")
    full_h, full_w = schedule.full_size
    if f.shape[1] != full_h or f.shape[2] != full_w:
        raise ShapeError(
            f"latent spatial size {f.shape[1:3]} != final scale {(full_h, full_w)}"
        )
    for spec in schedule:
        if spec.bit_length != f.shape[3]:
            raise ShapeError(
                f"scale {spec.index} bit length {spec.bit_length} != channels {f.shape[3]}"
            )
    return f


def ms_quantize(
    f: np.ndarray, schedule: ScaleSchedule, kind: str = "intra"
) -> "tuple[ScalePyramid, np.ndarray]":
    """Residual-quantize a latent across all scales.

    Returns the pyramid and the final residual e_{K+1} (same shape as f).
    """
    f = _check_latent(f, schedule)
    full = f.shape[1], f.shape[2]
    residual = f.copy()
    maps = []
    for spec in schedule:
        down = resample_down(residual, (spec.height, spec.width))
        bits, values = bsq_quantize(down)
        maps.append(TokenMap(spec=spec, bits=bits))
        residual = residual - resample_up(values, full)
    return ScalePyramid(schedule=schedule, maps=tuple(maps), kind=kind), residual


def ms_dequantize(pyramid: ScalePyramid, prefix: int) -> np.ndarray:
    """Sum of upsampled dequantized maps for scales 1..prefix (0 -> zeros)."""
    k = len(pyramid.schedule)
    if not 0 <= prefix <= k:
        raise ContractError(f"prefix {prefix} outside 0..{k}")
    full_h, full_w = pyramid.schedule.full_size
    frames = pyramid.frames
    channels = pyramid.schedule[len(pyramid.schedule)].bit_length
    acc = np.zeros((frames, full_h, full_w, channels), dtype=np.float64)
    for m in pyramid.maps[:prefix]:
        acc += resample_up(m.dequantize(), (full_h, full_w))
    return acc


def aggregate_scale_input(pyramid: ScalePyramid, k: int) -> np.ndarray:
    """Scales 1..k summed at full resolution, rendered on scale k's grid."""
    spec = pyramid.schedule[k]
    return resample_down(ms_dequantize(pyramid, k), (spec.height, spec.width))


def prefix_input_from_maps(
    schedule: ScaleSchedule, maps, k: int, frames: int
):
    """Aggregate of scales < k on scale k's grid, from the maps decoded so
    far (``maps`` holds at least scales 1..k-1). Scale 1 has no prefix:
    returns None. Both codec ends call this, so the accumulation order —
    and therefore every probability downstream — is bitwise reproducible."""
    spec = schedule[k]
    if k == 1:
        return None
    full_h, full_w = schedule.full_size
    channels = schedule[len(schedule)].bit_length
    acc = np.zeros((frames, full_h, full_w, channels), dtype=np.float64)
    for m in maps[: k - 1]:
        acc += resample_up(m.dequantize(), (full_h, full_w))
    return resample_down(acc, (spec.height, spec.width))


def prefix_scale_input(pyramid: ScalePyramid, k: int):
    """Aggregate of scales < k on scale k's grid — the context-model input
    for predicting scale k. Scale 1 has no prefix: returns None."""
    pyramid.schedule[k]  # validate k before delegating
    return prefix_input_from_maps(
        pyramid.schedule, list(pyramid.maps), k, pyramid.frames
    )
