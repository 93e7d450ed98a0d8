"""End-to-end codec orchestration.

Encode: pixels -> block-transform latents -> residual token pyramids ->
incremental context-model probabilities -> arithmetic-coded segments ->
container bytes.  Decode runs the mirror image, entropy-decoding the
transmitted scales and generating the truncated inter scales by per-bit
argmax before the multi-scale sum and the inverse transform.

Every coding probability on both ends comes from the same incremental
model path and the same quantizer, which is what makes a bitstream
written on one end losslessly decodable on the other.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import time
from dataclasses import dataclass

import numpy as np

from .container import (
    ContainerHeader,
    read_container,
    truncate,
    write_container,
)
from .ctxmodel import (
    ContextModelParams,
    DecodeState,
    ModelConfig,
    ProbTensor,
    forward_incremental,
)
from .entcoder import CodedSegment, ac_decode, ac_encode, quantize_probs
from .errors import (
    ConfigError,
    ContractError,
    DecodeError,
    ModelError,
    ShapeError,
)
from .frontend import (
    FrontendConfig,
    VideoClip,
    extract_latents,
    reconstruct_video,
)
from .msrq import (
    ScalePyramid,
    ScaleSchedule,
    ScaleSpec,
    TokenMap,
    default_schedule,
    ms_dequantize,
    ms_quantize,
    prefix_input_from_maps,
    prefix_scale_input,
)

PSNR_CAP = 99.0

SYNTH_KINDS = ("moving_gradient", "drifting_blobs", "noise_floor")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CodecConfig:
    """Everything the encoder needs besides the clip and the weights."""

    frontend: FrontendConfig = FrontendConfig()
    model: ModelConfig = ModelConfig()
    schedule: ScaleSchedule | None = None
    kappa_p: int | None = None
    budget_bits: int | None = None

    def __post_init__(self) -> None:
        if self.kappa_p is not None and self.budget_bits is not None:
            raise ConfigError("set a kappa_P target or a bit budget, not both")
        if self.kappa_p is not None and self.kappa_p < 0:
            raise ConfigError("kappa_P must be >= 0")
        if self.budget_bits is not None and self.budget_bits < 0:
            raise ConfigError("bit budget must be >= 0")


def _check_arch(expected: ModelConfig, got: ModelConfig) -> None:
    a = dataclasses.replace(expected, seed=0)
    b = dataclasses.replace(got, seed=0)
    if a != b:
        raise ModelError(
            f"model architecture mismatch: config wants {a}, weights carry {b}"
        )


def _resolve_schedule(
    cfg: CodecConfig, latent_h: int, latent_w: int, channels: int
) -> ScaleSchedule:
    schedule = cfg.schedule
    if schedule is None:
        schedule = default_schedule(latent_h, latent_w, channels)
    full = schedule.full_size
    if full != (latent_h, latent_w):
        raise ConfigError(
            f"schedule tops out at {full}, latent grid is {(latent_h, latent_w)}"
        )
    last = schedule[len(schedule)]
    if last.bit_length != channels:
        raise ConfigError(
            f"schedule carries L={last.bit_length}, frontend produces {channels}"
        )
    return schedule


# ---------------------------------------------------------------------------
# stats
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScaleStats:
    kind: str
    scale_index: int
    tokens: int
    raw_bits: int
    coded_bits: int
    transmitted: bool


@dataclass(frozen=True)
class EncodeStats:
    width: int
    height: int
    frames: int
    n_scales: int
    kappa_p: int
    per_scale: tuple[ScaleStats, ...]
    payload_bits: int
    container_bytes: int
    bits_per_pixel: float
    wall_seconds: float

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d["per_scale"] = [dataclasses.asdict(s) for s in self.per_scale]
        return json.dumps(d, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(
            ["kind", "scale", "tokens", "raw_bits", "coded_bits", "transmitted"]
        )
        for s in self.per_scale:
            writer.writerow(
                [s.kind, s.scale_index, s.tokens, s.raw_bits, s.coded_bits,
                 int(s.transmitted)]
            )
        return buf.getvalue()


@dataclass(frozen=True)
class DecodeStats:
    width: int
    height: int
    frames: int
    n_scales: int
    kappa_p: int
    generated_scales: tuple[int, ...]
    decoded_bits: int
    wall_seconds: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        d = dataclasses.asdict(self)
        d["generated_scales"] = " ".join(map(str, self.generated_scales))
        writer.writerow(d.keys())
        writer.writerow(d.values())
        return buf.getvalue()


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def pad_to_blocks(video: VideoClip, s: int) -> tuple[np.ndarray, int, int]:
    """Edge-replicate the right/bottom borders up to a multiple of s."""

    pad_r = (-video.width) % s
    pad_b = (-video.height) % s
    pixels = video.pixels
    if pad_r or pad_b:
        pixels = np.pad(pixels, ((0, 0), (0, pad_b), (0, pad_r), (0, 0)), mode="edge")
    return pixels, pad_r, pad_b


def pyramids_from_clip(
    video: VideoClip, cfg: CodecConfig
) -> tuple[ScaleSchedule, ScalePyramid, ScalePyramid | None]:
    """Quantized token pyramids for one clip (training and encoding share this)."""

    pixels, _, _ = pad_to_blocks(video, cfg.frontend.spatial_factor)
    latents = extract_latents(VideoClip(pixels), cfg.frontend)
    t, lh, lw, channels = latents.shape
    schedule = _resolve_schedule(cfg, lh, lw, channels)
    intra, _ = ms_quantize(latents[:1], schedule, kind="intra")
    inter = None
    if t > 1:
        inter, _ = ms_quantize(latents[1:], schedule, kind="inter")
    return schedule, intra, inter


def generate_scale(probs: ProbTensor) -> TokenMap:
    """Most-probable bits for a truncated scale: 1 iff p >= 0.5 (ties to 1)."""

    spec = ScaleSpec(
        index=probs.scale_index,
        width=probs.width,
        height=probs.height,
        bit_length=probs.bit_length,
    )
    bits = (probs.probs >= 0.5).astype(np.uint8)
    return TokenMap(
        spec, bits.reshape(probs.frames, probs.height, probs.width, probs.bit_length)
    )


def select_kappa(per_scale_coded_bits, budget_bits) -> int:
    """Largest prefix of inter scales whose cumulative cost fits the budget."""

    if budget_bits < 0:
        raise ContractError("budget must be >= 0")
    total = 0
    kappa = 0
    for cost in per_scale_coded_bits:
        if cost < 0:
            raise ContractError("scale costs must be >= 0")
        total += cost
        if total > budget_bits:
            break
        kappa += 1
    return kappa


# ---------------------------------------------------------------------------
# encode
# ---------------------------------------------------------------------------


def encode_video(
    video: VideoClip, cfg: CodecConfig, params: ContextModelParams
) -> tuple[bytes, EncodeStats]:
    t0 = time.perf_counter()
    _check_arch(cfg.model, params.config)
    pixels, pad_r, pad_b = pad_to_blocks(video, cfg.frontend.spatial_factor)
    latents = extract_latents(VideoClip(pixels), cfg.frontend)
    t_total, lh, lw, channels = latents.shape
    schedule = _resolve_schedule(cfg, lh, lw, channels)
    k_scales = len(schedule)

    intra, _ = ms_quantize(latents[:1], schedule, kind="intra")
    inter: ScalePyramid | None = None
    inter_frames = t_total - 1
    if inter_frames > 0:
        inter, _ = ms_quantize(latents[1:], schedule, kind="inter")

    # probabilities come from the incremental path, exactly as in decode
    state = DecodeState(params, schedule, inter_frames)
    segments: list[CodedSegment] = []
    for pyramid in (intra, inter):
        if pyramid is None:
            continue
        for k in range(1, k_scales + 1):
            probs = forward_incremental(
                state, pyramid.kind, k, prefix_scale_input(pyramid, k)
            )
            p16 = quantize_probs(probs.probs)
            segments.append(ac_encode(pyramid.maps[k - 1].flat_bits(), p16))

    inter_segments = segments[k_scales:]
    if cfg.budget_bits is not None:
        kappa_p = select_kappa(
            [8 * len(seg.payload) for seg in inter_segments], cfg.budget_bits
        )
    elif cfg.kappa_p is not None:
        if cfg.kappa_p > k_scales:
            raise ConfigError(f"kappa_P={cfg.kappa_p} exceeds K={k_scales}")
        kappa_p = cfg.kappa_p
    else:
        kappa_p = k_scales
    if inter_frames == 0:
        kappa_p = 0

    header = ContainerHeader(
        width=video.width,
        height=video.height,
        t_total=t_total,
        pad_right=pad_r,
        pad_bottom=pad_b,
        spatial_factor=cfg.frontend.spatial_factor,
        temporal_factor=cfg.frontend.temporal_factor,
        schedule=schedule,
        kappa_p=kappa_p,
        model_hash=params.weight_hash,
    )
    kept = segments[: k_scales + kappa_p]
    blob = write_container(header, kept)

    per_scale = []
    for i, seg in enumerate(segments):
        kind = "intra" if i < k_scales else "inter"
        k = i + 1 if i < k_scales else i - k_scales + 1
        spec = schedule[k]
        frames = 1 if kind == "intra" else inter_frames
        per_scale.append(
            ScaleStats(
                kind=kind,
                scale_index=k,
                tokens=frames * spec.height * spec.width,
                raw_bits=spec.raw_bits(frames),
                coded_bits=8 * len(seg.payload),
                transmitted=i < k_scales + kappa_p,
            )
        )
    stats = EncodeStats(
        width=video.width,
        height=video.height,
        frames=t_total,
        n_scales=k_scales,
        kappa_p=kappa_p,
        per_scale=tuple(per_scale),
        payload_bits=sum(8 * len(seg.payload) for seg in kept),
        container_bytes=len(blob),
        bits_per_pixel=8.0 * len(blob) / (video.width * video.height * t_total),
        wall_seconds=time.perf_counter() - t0,
    )
    return blob, stats


# ---------------------------------------------------------------------------
# decode
# ---------------------------------------------------------------------------


def decode_video(
    blob: bytes, params: ContextModelParams
) -> tuple[VideoClip, DecodeStats]:
    t0 = time.perf_counter()
    box = read_container(blob)
    header = box.header
    if header.model_hash != params.weight_hash:
        raise ModelError(
            f"container was coded with model {header.model_hash:#018x}, "
            f"loaded weights hash to {params.weight_hash:#018x}"
        )
    fcfg = FrontendConfig(
        spatial_factor=header.spatial_factor,
        temporal_factor=header.temporal_factor,
    )
    schedule = header.schedule
    k_scales = len(schedule)
    grid = (
        header.padded_height // fcfg.spatial_factor,
        header.padded_width // fcfg.spatial_factor,
    )
    if schedule.full_size != grid:
        raise DecodeError(
            f"schedule grid {schedule.full_size} does not match the padded "
            f"video's latent grid {grid}"
        )
    if schedule[k_scales].bit_length != fcfg.channels:
        raise DecodeError(
            f"schedule carries L={schedule[k_scales].bit_length}, frontend "
            f"produces {fcfg.channels}"
        )
    inter_frames = header.t_total - 1
    if inter_frames == 0 and header.kappa_p > 0:
        raise DecodeError("single-frame container cannot carry inter segments")

    state = DecodeState(params, schedule, inter_frames)
    decoded_bits = 0

    def recover(kind: str, k: int, frames: int, maps: list[TokenMap]) -> TokenMap:
        nonlocal decoded_bits
        spec = schedule[k]
        probs = forward_incremental(
            state, kind, k, prefix_input_from_maps(schedule, maps, k, frames)
        )
        transmitted = kind == "intra" or k <= header.kappa_p
        if not transmitted:
            return generate_scale(probs)
        seg_idx = (k - 1) if kind == "intra" else (k_scales + k - 1)
        seg = box.segments[seg_idx]
        if seg.n_bits != spec.raw_bits(frames):
            raise DecodeError(
                f"{kind} scale {k} segment carries {seg.n_bits} bits, "
                f"expected {spec.raw_bits(frames)}"
            )
        bits = ac_decode(seg, quantize_probs(probs.probs))
        decoded_bits += seg.n_bits
        return TokenMap(
            spec, bits.reshape(frames, spec.height, spec.width, spec.bit_length)
        )

    intra_maps: list[TokenMap] = []
    for k in range(1, k_scales + 1):
        intra_maps.append(recover("intra", k, 1, intra_maps))
    intra = ScalePyramid(schedule, tuple(intra_maps), "intra")

    generated = []
    latest = ms_dequantize(intra, k_scales)
    if inter_frames > 0:
        inter_maps: list[TokenMap] = []
        for k in range(1, k_scales + 1):
            inter_maps.append(recover("inter", k, inter_frames, inter_maps))
            if k > header.kappa_p:
                generated.append(k)
        inter = ScalePyramid(schedule, tuple(inter_maps), "inter")
        latest = np.concatenate([latest, ms_dequantize(inter, k_scales)], axis=0)

    clip = reconstruct_video(latest, fcfg)
    pixels = clip.pixels[:, : header.height, : header.width, :]
    out = VideoClip(np.ascontiguousarray(pixels))
    stats = DecodeStats(
        width=header.width,
        height=header.height,
        frames=header.t_total,
        n_scales=k_scales,
        kappa_p=header.kappa_p,
        generated_scales=tuple(generated),
        decoded_bits=decoded_bits,
        wall_seconds=time.perf_counter() - t0,
    )
    return out, stats


# ---------------------------------------------------------------------------
# metrics and synthetic clips
# ---------------------------------------------------------------------------


def psnr(a: VideoClip, b: VideoClip) -> float:
    """Peak signal-to-noise ratio in dB over all pixels, capped at 99."""

    if a.pixels.shape != b.pixels.shape:
        raise ShapeError(
            f"clip shapes differ: {a.pixels.shape} vs {b.pixels.shape}"
        )
    diff = a.pixels.astype(np.float64) - b.pixels.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(255.0**2 / mse))


def synth_clip(
    seed: int, width: int, height: int, t_frames: int, kind: str = "moving_gradient"
) -> VideoClip:
    """Deterministic toy clips; the first two kinds move coherently in time."""

    if min(width, height, t_frames) < 1:
        raise ContractError("clip dimensions must be positive")
    if kind not in SYNTH_KINDS:
        raise ConfigError(f"unknown synthetic kind {kind!r}; pick from {SYNTH_KINDS}")
    rng = np.random.default_rng(seed)

    if kind == "noise_floor":
        pixels = rng.integers(0, 256, size=(t_frames, height, width, 3), dtype=np.uint8)
        return VideoClip(pixels)

    if kind == "moving_gradient":
        vy = int(rng.integers(1, 3))
        vx = int(rng.integers(1, 3))
        fy = 2.0 * math.pi * int(rng.integers(1, 3)) / height
        fx = 2.0 * math.pi * int(rng.integers(1, 3)) / width
        phase = rng.uniform(0.0, 2.0 * math.pi, size=3)
        yy, xx = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
        ramp = fy * yy + fx * xx
        base = 127.5 + 127.5 * np.sin(ramp[:, :, None] + phase[None, None, :])
        base = np.clip(np.floor(base + 0.5), 0, 255).astype(np.uint8)
        frames = [
            np.roll(base, shift=(t * vy, t * vx), axis=(0, 1))
            for t in range(t_frames)
        ]
        return VideoClip(np.stack(frames, axis=0))

    # drifting_blobs: soft discs sliding along straight toroidal tracks
    n_blobs = int(rng.integers(3, 6))
    pos = rng.uniform([0.0, 0.0], [height, width], size=(n_blobs, 2))
    vel = rng.uniform(-2.0, 2.0, size=(n_blobs, 2))
    sigma = rng.uniform(min(height, width) / 8.0, min(height, width) / 4.0, n_blobs)
    amp = rng.uniform(0.3, 1.0, size=(n_blobs, 3))
    yy, xx = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    frames = np.zeros((t_frames, height, width, 3))
    for t in range(t_frames):
        img = np.zeros((height, width, 3))
        for i in range(n_blobs):
            py, px = (pos[i] + t * vel[i]) % [height, width]
            dy = np.minimum(np.abs(yy - py), height - np.abs(yy - py))
            dx = np.minimum(np.abs(xx - px), width - np.abs(xx - px))
            blob = np.exp(-(dy * dy + dx * dx) / (2.0 * sigma[i] ** 2))
            img += blob[:, :, None] * amp[i]
        frames[t] = img
    pixels = np.clip(np.floor(frames * 255.0 + 0.5), 0, 255).astype(np.uint8)
    return VideoClip(pixels)


__all__ = [
    "CodecConfig",
    "DecodeStats",
    "EncodeStats",
    "PSNR_CAP",
    "SYNTH_KINDS",
    "ScaleStats",
    "decode_video",
    "encode_video",
    "generate_scale",
    "pad_to_blocks",
    "psnr",
    "pyramids_from_clip",
    "select_kappa",
    "synth_clip",
    "truncate",
]
