"""Progressive bitstream container: header, segment index, then payloads.

Layout (everything little-endian; see FORMAT.md for the annotated example):

    magic "PGVC", version u8,
    W u32, H u32, T_total u32, pad_right u16, pad_bottom u16,
    s u8, tau u8, K u8, kappa_P u8,
    K x (w u16, h u16, L u16),
    model hash u64,
    segment count u16 (= K + kappa_P),
    per segment: bit count u32, byte length u32,
    payloads: K intra segments then kappa_P inter segments, coarse to fine.

The index lives up front so :func:`truncate` is a header rewrite plus a
copy of the surviving bytes — dropping inter tails never touches payloads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .entcoder import CodedSegment
from .errors import ContractError, ParseError, ShapeError
from .msrq import ScaleSchedule, ScaleSpec

CONTAINER_MAGIC = b"PGVC"
CONTAINER_VERSION = 1

_FIXED = struct.Struct("<4sBIIIHHBBBB")
_SCALE_ENTRY = struct.Struct("<HHH")
_HASH = struct.Struct("<Q")
_SEG_COUNT = struct.Struct("<H")
_SEG_ENTRY = struct.Struct("<II")

_U16 = 0xFFFF
_U32 = 0xFFFFFFFF


@dataclass(frozen=True)
class ContainerHeader:
    """Everything a decoder needs before the first payload byte."""

    width: int
    height: int
    t_total: int
    pad_right: int
    pad_bottom: int
    spatial_factor: int
    temporal_factor: int
    schedule: ScaleSchedule
    kappa_p: int
    model_hash: int

    def __post_init__(self) -> None:
        if min(self.width, self.height, self.t_total) < 1:
            raise ContractError("video dimensions must be positive")
        if max(self.width, self.height, self.t_total) > _U32:
            raise ContractError("video dimensions exceed the u32 header fields")
        if not 0 <= self.pad_right <= _U16 or not 0 <= self.pad_bottom <= _U16:
            raise ContractError("padding must fit in u16")
        if not 1 <= self.spatial_factor <= 255 or not 1 <= self.temporal_factor <= 255:
            raise ContractError("frontend factors must fit in u8")
        if len(self.schedule) > 255:
            raise ContractError("schedule longer than 255 scales")
        if not 0 <= self.kappa_p <= len(self.schedule):
            raise ContractError(
                f"kappa_P={self.kappa_p} outside 0..K={len(self.schedule)}"
            )
        if not 0 <= self.model_hash < 2**64:
            raise ContractError("model hash must fit in u64")
        for spec in self.schedule:
            if max(spec.width, spec.height, spec.bit_length) > _U16:
                raise ContractError(f"scale {spec.index} exceeds the u16 entry fields")

    @property
    def n_scales(self) -> int:
        return len(self.schedule)

    @property
    def n_segments(self) -> int:
        return self.n_scales + self.kappa_p

    @property
    def padded_width(self) -> int:
        return self.width + self.pad_right

    @property
    def padded_height(self) -> int:
        return self.height + self.pad_bottom

    def segment_label(self, i: int) -> tuple[str, int]:
        """(kind, scale index) of segment i in storage order."""
        if not 0 <= i < self.n_segments:
            raise ContractError(f"segment index {i} outside 0..{self.n_segments - 1}")
        if i < self.n_scales:
            return "intra", i + 1
        return "inter", i - self.n_scales + 1


@dataclass(frozen=True)
class Container:
    header: ContainerHeader
    segments: tuple[CodedSegment, ...]

    def __post_init__(self) -> None:
        if len(self.segments) != self.header.n_segments:
            raise ContractError(
                f"container holds {len(self.segments)} segments, header "
                f"promises {self.header.n_segments}"
            )


def write_container(header: ContainerHeader, segments) -> bytes:
    """Serialize deterministically; read_container inverts this exactly."""

    segments = tuple(segments)
    if len(segments) != header.n_segments:
        raise ContractError(
            f"got {len(segments)} segments, header needs {header.n_segments} "
            f"(K={header.n_scales} intra + kappa_P={header.kappa_p} inter)"
        )
    for i, seg in enumerate(segments):
        if seg.n_bits > _U32 or len(seg.payload) > _U32:
            kind, k = header.segment_label(i)
            raise ContractError(f"{kind} scale {k} segment exceeds u32 index fields")

    parts = [
        _FIXED.pack(
            CONTAINER_MAGIC,
            CONTAINER_VERSION,
            header.width,
            header.height,
            header.t_total,
            header.pad_right,
            header.pad_bottom,
            header.spatial_factor,
            header.temporal_factor,
            header.n_scales,
            header.kappa_p,
        )
    ]
    for spec in header.schedule:
        parts.append(_SCALE_ENTRY.pack(spec.width, spec.height, spec.bit_length))
    parts.append(_HASH.pack(header.model_hash))
    parts.append(_SEG_COUNT.pack(header.n_segments))
    for seg in segments:
        parts.append(_SEG_ENTRY.pack(seg.n_bits, len(seg.payload)))
    for seg in segments:
        parts.append(seg.payload)
    return b"".join(parts)


def read_container(blob: bytes) -> Container:
    """Parse and fully validate; trailing garbage is rejected."""

    if len(blob) < _FIXED.size:
        raise ParseError("container truncated inside the fixed header")
    (
        magic, version, width, height, t_total,
        pad_right, pad_bottom, s_factor, t_factor, k_scales, kappa_p,
    ) = _FIXED.unpack_from(blob, 0)
    if magic != CONTAINER_MAGIC:
        raise ParseError(f"bad magic {magic!r}")
    if version != CONTAINER_VERSION:
        raise ParseError(f"unsupported container version {version}")
    pos = _FIXED.size

    if len(blob) < pos + k_scales * _SCALE_ENTRY.size:
        raise ParseError("container truncated inside the scale table")
    specs = []
    for i in range(k_scales):
        w, h, bit_len = _SCALE_ENTRY.unpack_from(blob, pos)
        pos += _SCALE_ENTRY.size
        try:
            specs.append(ScaleSpec(index=i + 1, width=w, height=h, bit_length=bit_len))
        except ShapeError as exc:
            raise ParseError(f"scale table entry {i + 1}: {exc}") from exc
    try:
        schedule = ScaleSchedule(tuple(specs))
    except ShapeError as exc:
        raise ParseError(f"scale table: {exc}") from exc

    if len(blob) < pos + _HASH.size + _SEG_COUNT.size:
        raise ParseError("container truncated before the segment index")
    (model_hash,) = _HASH.unpack_from(blob, pos)
    pos += _HASH.size
    (seg_count,) = _SEG_COUNT.unpack_from(blob, pos)
    pos += _SEG_COUNT.size
    if seg_count != k_scales + kappa_p:
        raise ParseError(
            f"segment count {seg_count} does not equal K+kappa_P="
            f"{k_scales + kappa_p}"
        )

    try:
        header = ContainerHeader(
            width=width,
            height=height,
            t_total=t_total,
            pad_right=pad_right,
            pad_bottom=pad_bottom,
            spatial_factor=s_factor,
            temporal_factor=t_factor,
            schedule=schedule,
            kappa_p=kappa_p,
            model_hash=model_hash,
        )
    except ContractError as exc:
        raise ParseError(f"header: {exc}") from exc

    if len(blob) < pos + seg_count * _SEG_ENTRY.size:
        raise ParseError("container truncated inside the segment index")
    index = []
    for _ in range(seg_count):
        index.append(_SEG_ENTRY.unpack_from(blob, pos))
        pos += _SEG_ENTRY.size

    segments = []
    for i, (n_bits, n_bytes) in enumerate(index):
        if len(blob) < pos + n_bytes:
            kind, k = header.segment_label(i)
            raise ParseError(
                f"container truncated inside {kind} scale {k} payload "
                f"(need {n_bytes} bytes, have {len(blob) - pos})"
            )
        segments.append(CodedSegment(payload=blob[pos : pos + n_bytes], n_bits=n_bits))
        pos += n_bytes
    if pos != len(blob):
        raise ParseError(f"{len(blob) - pos} bytes of trailing garbage")
    return Container(header=header, segments=tuple(segments))


def truncate(blob: bytes, new_kappa: int) -> bytes:
    """Drop inter segments above new_kappa; output parses and decodes."""

    box = read_container(blob)
    header = box.header
    if not 0 <= new_kappa <= header.kappa_p:
        raise ContractError(
            f"new kappa_P={new_kappa} outside 0..{header.kappa_p}"
        )
    kept = box.segments[: header.n_scales + new_kappa]
    new_header = ContainerHeader(
        width=header.width,
        height=header.height,
        t_total=header.t_total,
        pad_right=header.pad_right,
        pad_bottom=header.pad_bottom,
        spatial_factor=header.spatial_factor,
        temporal_factor=header.temporal_factor,
        schedule=header.schedule,
        kappa_p=new_kappa,
        model_hash=header.model_hash,
    )
    return write_container(new_header, kept)


def read_container_file(path) -> Container:
    with open(path, "rb") as fh:
        return read_container(fh.read())


def write_container_file(path, header: ContainerHeader, segments) -> None:
    with open(path, "wb") as fh:
        fh.write(write_container(header, segments))
