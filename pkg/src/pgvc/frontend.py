"""Invertible pixel <-> latent transform and the raw clip file format.

Latents are produced by an orthonormal 2-D DCT-II over non-overlapping
s x s blocks of each color channel of each frame (pixels normalized to
[0,1]); the s*s coefficients of the three colors become C = 3*s*s latent
channels. Orthonormality makes the transform exactly invertible up to
float rounding, so every downstream rate/distortion effect is attributable
to quantization and coding alone.

Latent channel order: channel = color*s*s + u*s + v, i.e. the DC terms of
R, G, B sit at channels 0, s*s and 2*s*s. Latent frame 1 corresponds to the
intra frame; frames 2..T to inter frames (no temporal compression).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ParseError, ShapeError

CLIP_MAGIC = b"PGVV"
CLIP_VERSION = 1

__all__ = [
    "FrontendConfig",
    "VideoClip",
    "dct_matrix",
    "extract_latents",
    "reconstruct_video",
    "unit_frames_to_latents",
    "latents_to_unit_frames",
    "clip_to_bytes",
    "clip_from_bytes",
    "read_clip",
    "write_clip",
]


@dataclass(frozen=True)
class FrontendConfig:
    """Block transform parameters. ``channels`` is fixed by spatial_factor."""

    spatial_factor: int = 4
    temporal_factor: int = 1

    def __post_init__(self):
        if self.spatial_factor not in (2, 4, 8):
            raise ShapeError(f"spatial_factor must be 2, 4 or 8, got {self.spatial_factor}")
        if self.temporal_factor != 1:
            raise ShapeError("temporal_factor other than 1 is not implemented")

    @property
    def channels(self) -> int:
        return 3 * self.spatial_factor**2


@dataclass(frozen=True)
class VideoClip:
    """8-bit RGB frames, shape (T, H, W, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        p = self.pixels
        if not isinstance(p, np.ndarray) or p.dtype != np.uint8:
            raise ShapeError("clip pixels must be a uint8 ndarray")
        if p.ndim != 4 or p.shape[3] != 3 or min(p.shape[:3]) < 1:
            raise ShapeError(f"clip pixels must be (T,H,W,3) nonempty, got {p.shape}")

    @property
    def t_total(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]


def dct_matrix(s: int) -> np.ndarray:
    """Orthonormal DCT-II basis: B[u, x] = c_u cos(pi (2x+1) u / (2s))."""
    x = np.arange(s, dtype=np.float64)
    u = np.arange(s, dtype=np.float64)[:, None]
    b = np.cos(np.pi * (2.0 * x + 1.0) * u / (2.0 * s))
    b[0, :] *= np.sqrt(1.0 / s)
    b[1:, :] *= np.sqrt(2.0 / s)
    return b


def _check_divisible(h: int, w: int, s: int):
    if h % s or w % s:
        raise ShapeError(f"frame size {w}x{h} not divisible by spatial factor {s}")


def unit_frames_to_latents(frames: np.ndarray, cfg: FrontendConfig) -> np.ndarray:
    """Float path: (T,H,W,3) unit-range frames -> (T,H/s,W/s,3s^2) latents."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4 or frames.shape[3] != 3:
        raise ShapeError(f"frames must be (T,H,W,3), got {frames.shape}")
    s = cfg.spatial_factor
    t, h, w, _ = frames.shape
    _check_divisible(h, w, s)
    hb, wb = h // s, w // s
    z = frames.reshape(t, hb, s, wb, s, 3)
    basis = dct_matrix(s)
    y = np.einsum("ua,vb,tiajbc->tiujvc", basis, basis, z)
    return y.transpose(0, 1, 3, 5, 2, 4).reshape(t, hb, wb, 3 * s * s)


def latents_to_unit_frames(latents: np.ndarray, cfg: FrontendConfig) -> np.ndarray:
    """Float path inverse of unit_frames_to_latents (no clamping/rounding)."""
    latents = np.asarray(latents, dtype=np.float64)
    s = cfg.spatial_factor
    if latents.ndim != 4 or latents.shape[3] != 3 * s * s:
        raise ShapeError(
            f"latents must be (T,h,w,{3 * s * s}) for s={s}, got {latents.shape}"
        )
    t, hb, wb, _ = latents.shape
    y = latents.reshape(t, hb, wb, 3, s, s).transpose(0, 1, 4, 2, 5, 3)
    basis = dct_matrix(s)
    z = np.einsum("ua,vb,tiujvc->tiajbc", basis, basis, y)
    return z.reshape(t, hb * s, wb * s, 3)


def extract_latents(video: VideoClip, cfg: FrontendConfig) -> np.ndarray:
    """8-bit clip -> latent tensor (pixels normalized by 255)."""
    return unit_frames_to_latents(video.pixels.astype(np.float64) / 255.0, cfg)


def reconstruct_video(latents: np.ndarray, cfg: FrontendConfig) -> VideoClip:
    """Latents -> 8-bit clip: inverse transform, clamp to [0,1], round half up."""
    unit = latents_to_unit_frames(latents, cfg)
    clamped = np.clip(unit, 0.0, 1.0)
    pixels = np.floor(clamped * 255.0 + 0.5).astype(np.uint8)
    return VideoClip(pixels=pixels)


# ---------------------------------------------------------------------------
# raw clip format
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sBIII")  # magic, version, W, H, T_total


def clip_to_bytes(clip: VideoClip) -> bytes:
    head = _HEADER.pack(
        CLIP_MAGIC, CLIP_VERSION, clip.width, clip.height, clip.t_total
    )
    return head + clip.pixels.tobytes()


def clip_from_bytes(data: bytes) -> VideoClip:
    if len(data) < _HEADER.size:
        raise ParseError(f"clip file too short: {len(data)} bytes")
    magic, version, w, h, t = _HEADER.unpack_from(data, 0)
    if magic != CLIP_MAGIC:
        raise ParseError(f"bad clip magic {magic!r}")
    if version != CLIP_VERSION:
        raise ParseError(f"unsupported clip version {version}")
    if w < 1 or h < 1 or t < 1:
        raise ParseError(f"invalid clip dimensions {w}x{h}x{t}")
    expect = _HEADER.size + t * h * w * 3
    if len(data) != expect:
        raise ParseError(
            f"clip payload length mismatch: have {len(data)}, expected {expect}"
        )
    pixels = (
        np.frombuffer(data, dtype=np.uint8, offset=_HEADER.size)
        .reshape(t, h, w, 3)
        .copy()
    )
    return VideoClip(pixels=pixels)


def read_clip(path) -> VideoClip:
    with open(path, "rb") as fh:
        return clip_from_bytes(fh.read())


def write_clip(clip: VideoClip, path) -> None:
    with open(path, "wb") as fh:
        fh.write(clip_to_bytes(clip))
