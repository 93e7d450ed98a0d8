"""Autoregressive context model over multi-scale token pyramids.

A small pre-norm transformer maps the aggregated prefix of each scale to
per-bit Bernoulli probabilities for that scale's tokens.  Intra and inter
scales share one weight set but occupy distinct slots in the sequence, and
a block-granular attention mask decides which earlier scales each scale may
consult: the mask *variant* governs same-kind visibility, while the
intra-reference *policy* governs which intra scale the inter scales may key
into.  Intra scales never see inter tokens.

The incremental path (:class:`DecodeState` + :func:`forward_incremental`)
is the canonical source of coding probabilities on both ends of the codec;
the teacher-forced :func:`forward_full` path exists for training and
analysis and agrees with it to float tolerance, not bitwise.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
import struct
from dataclasses import dataclass

import numpy as np

from .entcoder import PROB_EPS
from .errors import (
    ConfigError,
    ContractError,
    ModelError,
    ParseError,
    ProtocolError,
    ShapeError,
    TrainError,
)
from .msrq import ScalePyramid, ScaleSchedule, prefix_scale_input
from .numkern import gelu, layer_norm, masked_softmax, matmul, sigmoid

MASK_VARIANTS = ("self_only", "full_causal", "sparse")
INTRA_REFERENCE_POLICIES = ("none", "smallest", "same_resolution", "largest")

MODEL_MAGIC = b"PGVM"
MODEL_VERSION = 1

_MODEL_HEADER = struct.Struct("<4sBHBBBBBHQ")

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# configuration and parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    """Architecture descriptor; immutable and fully determines weight shapes."""

    d: int = 32
    n_blocks: int = 2
    n_heads: int = 2
    variant: str = "sparse"
    intra_reference: str = "largest"
    max_scales: int = 8
    bit_length: int = 48
    seed: int = 0

    def __post_init__(self) -> None:
        if self.d <= 0 or self.n_blocks <= 0 or self.n_heads <= 0:
            raise ConfigError("model dims must be positive")
        if self.d % self.n_heads != 0:
            raise ConfigError(
                f"model dim {self.d} not divisible by {self.n_heads} heads"
            )
        if self.variant not in MASK_VARIANTS:
            raise ConfigError(f"unknown mask variant {self.variant!r}")
        if self.intra_reference not in INTRA_REFERENCE_POLICIES:
            raise ConfigError(
                f"unknown intra-reference policy {self.intra_reference!r}"
            )
        if not 1 <= self.max_scales <= 255:
            raise ConfigError("max_scales must be in 1..255")
        if not 1 <= self.bit_length <= 65535:
            raise ConfigError("bit_length must be in 1..65535")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads


def param_layout(cfg: ModelConfig) -> tuple[tuple[str, tuple[int, ...]], ...]:
    """Weight names and shapes in declaration (= serialization) order."""

    d, L = cfg.d, cfg.bit_length
    entries: list[tuple[str, tuple[int, ...]]] = [
        ("start", (d,)),
        ("w_in", (L, d)),
        ("kind_scale_embed", (2 * cfg.max_scales, d)),
        ("w_pos", (3, d)),
    ]
    for b in range(cfg.n_blocks):
        p = f"blocks.{b}."
        entries += [
            (p + "ln1_gamma", (d,)),
            (p + "ln1_beta", (d,)),
            (p + "wq", (d, d)),
            (p + "wk", (d, d)),
            (p + "wv", (d, d)),
            (p + "wo", (d, d)),
            (p + "ln2_gamma", (d,)),
            (p + "ln2_beta", (d,)),
            (p + "w1", (d, 4 * d)),
            (p + "b1", (4 * d,)),
            (p + "w2", (4 * d, d)),
            (p + "b2", (d,)),
        ]
    entries += [
        ("lnf_gamma", (d,)),
        ("lnf_beta", (d,)),
        ("w_head", (d, L)),
        ("b_head", (L,)),
    ]
    return tuple(entries)


def param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in param_layout(cfg))


def _weights_hash(cfg: ModelConfig, weights: dict[str, np.ndarray]) -> int:
    h = hashlib.sha256()
    for name, _ in param_layout(cfg):
        h.update(weights[name].astype("<f8").tobytes())
    return int.from_bytes(h.digest()[:8], "little")


@dataclass(frozen=True, eq=False)
class ContextModelParams:
    """Immutable weight set plus a 64-bit content hash over the weights."""

    config: ModelConfig
    weights: dict[str, np.ndarray]
    weight_hash: int = dataclasses.field(init=False)

    def __post_init__(self) -> None:
        layout = param_layout(self.config)
        expected = {name for name, _ in layout}
        got = set(self.weights)
        if got != expected:
            missing = sorted(expected - got)
            extra = sorted(got - expected)
            raise ModelError(
                f"weight names do not match architecture "
                f"(missing={missing}, unexpected={extra})"
            )
        frozen: dict[str, np.ndarray] = {}
        for name, shape in layout:
            w = np.array(self.weights[name], dtype=np.float64, order="C")
            if w.shape != shape:
                raise ModelError(
                    f"weight {name} has shape {w.shape}, expected {shape}"
                )
            if not np.all(np.isfinite(w)):
                raise ModelError(f"weight {name} contains non-finite values")
            w.flags.writeable = False
            frozen[name] = w
        object.__setattr__(self, "weights", frozen)
        object.__setattr__(self, "weight_hash", _weights_hash(self.config, frozen))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.weights[name]


def init_params(cfg: ModelConfig, seed: int) -> ContextModelParams:
    """Scaled-uniform initialization (+-1/sqrt(fan_in)), deterministic per seed."""

    cfg = dataclasses.replace(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    weights: dict[str, np.ndarray] = {}
    for name, shape in param_layout(cfg):
        base = name.rsplit(".", 1)[-1]
        if base in ("ln1_gamma", "ln2_gamma", "lnf_gamma"):
            weights[name] = np.ones(shape)
        elif base in ("ln1_beta", "ln2_beta", "lnf_beta", "b1", "b2", "b_head"):
            weights[name] = np.zeros(shape)
        else:
            fan_in = shape[0] if len(shape) == 2 else cfg.d
            bound = 1.0 / math.sqrt(fan_in)
            weights[name] = rng.uniform(-bound, bound, size=shape)
    return ContextModelParams(config=cfg, weights=weights)


def zero_params(cfg: ModelConfig) -> ContextModelParams:
    """All-zero weights (layer-norm gains included): every probability is 0.5."""

    weights = {name: np.zeros(shape) for name, shape in param_layout(cfg)}
    return ContextModelParams(config=cfg, weights=weights)


# ---------------------------------------------------------------------------
# sequence layout and attention masks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayoutBlock:
    kind: str
    scale_index: int
    frames: int
    height: int
    width: int
    offset: int

    @property
    def token_count(self) -> int:
        return self.frames * self.height * self.width


@dataclass(frozen=True)
class SequenceLayout:
    """Ordered token blocks: intra scales 1..K, then inter scales 1..K."""

    schedule: ScaleSchedule
    inter_frames: int
    blocks: tuple[LayoutBlock, ...]

    def __post_init__(self) -> None:
        pos = 0
        for blk in self.blocks:
            if blk.offset != pos:
                raise ContractError("layout token offsets are not contiguous")
            pos += blk.token_count

    @property
    def n_tokens(self) -> int:
        return sum(blk.token_count for blk in self.blocks)

    def index_of(self, kind: str, scale_index: int) -> int:
        for i, blk in enumerate(self.blocks):
            if blk.kind == kind and blk.scale_index == scale_index:
                return i
        raise ContractError(f"no block for kind={kind!r} scale={scale_index}")


def build_layout(schedule: ScaleSchedule, inter_frames: int) -> SequenceLayout:
    """Pure function of the schedule and the inter frame count."""

    if inter_frames < 0:
        raise ContractError("inter_frames must be >= 0")
    blocks: list[LayoutBlock] = []
    offset = 0
    for spec in schedule:
        blocks.append(
            LayoutBlock("intra", spec.index, 1, spec.height, spec.width, offset)
        )
        offset += blocks[-1].token_count
    if inter_frames > 0:
        for spec in schedule:
            blocks.append(
                LayoutBlock(
                    "inter", spec.index, inter_frames, spec.height, spec.width, offset
                )
            )
            offset += blocks[-1].token_count
    return SequenceLayout(schedule, inter_frames, tuple(blocks))


def _block_pair_allowed(
    cfg: ModelConfig, n_scales: int, query: LayoutBlock, key: LayoutBlock
) -> bool:
    if query.kind == key.kind:
        if cfg.variant == "self_only":
            return key.scale_index == query.scale_index
        if cfg.variant == "full_causal":
            return key.scale_index <= query.scale_index
        if cfg.variant == "sparse":
            return key.scale_index in (query.scale_index, query.scale_index - 1)
        raise ConfigError(f"unknown mask variant {cfg.variant!r}")
    if query.kind == "intra":
        return False  # intra never consults inter
    # inter query against intra key: the intra-reference policy decides
    if cfg.intra_reference == "none":
        return False
    if cfg.intra_reference == "smallest":
        return key.scale_index == 1
    if cfg.intra_reference == "same_resolution":
        return key.scale_index == query.scale_index
    if cfg.intra_reference == "largest":
        return key.scale_index == n_scales
    raise ConfigError(f"unknown intra-reference policy {cfg.intra_reference!r}")


def _allowed_blocks(cfg: ModelConfig, layout: SequenceLayout) -> np.ndarray:
    n = len(layout.blocks)
    k = len(layout.schedule)
    allowed = np.zeros((n, n), dtype=bool)
    for i, qb in enumerate(layout.blocks):
        for j, kb in enumerate(layout.blocks):
            allowed[i, j] = _block_pair_allowed(cfg, k, qb, kb)
    return allowed


def build_mask(cfg: ModelConfig, layout: SequenceLayout) -> np.ndarray:
    """Token-level boolean attention mask (True = key visible to query)."""

    allowed = _allowed_blocks(cfg, layout)
    n = layout.n_tokens
    mask = np.zeros((n, n), dtype=bool)
    for i, qb in enumerate(layout.blocks):
        qs = slice(qb.offset, qb.offset + qb.token_count)
        for j, kb in enumerate(layout.blocks):
            if allowed[i, j]:
                mask[qs, kb.offset : kb.offset + kb.token_count] = True
    return mask


# ---------------------------------------------------------------------------
# probability container
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ProbTensor:
    """Per-bit probabilities for one scale, flat in (frame, row, col, bit) order."""

    kind: str
    scale_index: int
    frames: int
    height: int
    width: int
    bit_length: int
    probs: np.ndarray

    def __post_init__(self) -> None:
        p = np.ascontiguousarray(self.probs, dtype=np.float64)
        expected = self.frames * self.height * self.width * self.bit_length
        if p.ndim != 1 or p.shape[0] != expected:
            raise ShapeError(
                f"probability vector has length {p.size}, expected {expected}"
            )
        if p.size and (p.min() < PROB_EPS or p.max() > 1.0 - PROB_EPS):
            raise ContractError("probabilities escape the clamped range")
        p.flags.writeable = False
        object.__setattr__(self, "probs", p)

    @property
    def n_bits(self) -> int:
        return self.probs.shape[0]


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def _pos_features(block: LayoutBlock) -> np.ndarray:
    t = (np.arange(block.frames) + 0.5) / block.frames
    y = (np.arange(block.height) + 0.5) / block.height
    x = (np.arange(block.width) + 0.5) / block.width
    tt, yy, xx = np.meshgrid(t, y, x, indexing="ij")
    return np.ascontiguousarray(
        np.stack([tt, yy, xx], axis=-1).reshape(-1, 3)
    )


def _embed_block(
    params: ContextModelParams, block: LayoutBlock, scale_input: np.ndarray | None
) -> tuple[np.ndarray, np.ndarray | None, np.ndarray]:
    """Token embeddings for one block; returns (x, flat_input, pos) for reuse."""

    cfg = params.config
    n = block.token_count
    if block.scale_index == 1:
        if scale_input is not None:
            raise ContractError("scale 1 takes no input; it is the sequence start")
        flat = None
        x = np.tile(params["start"], (n, 1))
    else:
        if scale_input is None:
            raise ContractError(f"scale {block.scale_index} requires an input array")
        arr = np.ascontiguousarray(scale_input, dtype=np.float64)
        want = (block.frames, block.height, block.width, cfg.bit_length)
        if arr.shape != want:
            raise ShapeError(f"scale input has shape {arr.shape}, expected {want}")
        flat = arr.reshape(n, cfg.bit_length)
        x = matmul(flat, params["w_in"])
    row = (0 if block.kind == "intra" else cfg.max_scales) + block.scale_index - 1
    x = x + params["kind_scale_embed"][row]
    pos = _pos_features(block)
    x = x + matmul(pos, params["w_pos"])
    return x, flat, pos


def _split_heads(x: np.ndarray, n_heads: int) -> list[np.ndarray]:
    dh = x.shape[1] // n_heads
    return [np.ascontiguousarray(x[:, h * dh : (h + 1) * dh]) for h in range(n_heads)]


def _attend(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    mask: np.ndarray | None,
    n_heads: int,
    trace: dict | None = None,
) -> np.ndarray:
    """Multi-head masked attention; per-head scores scaled by 1/sqrt(head_dim)."""

    dh = q.shape[1] // n_heads
    scale = 1.0 / math.sqrt(dh)
    out = np.empty_like(q)
    if trace is not None:
        trace["attn_weights"] = []
    for h, (qs, ks, vs) in enumerate(
        zip(_split_heads(q, n_heads), _split_heads(k, n_heads), _split_heads(v, n_heads))
    ):
        scores = matmul(qs, np.ascontiguousarray(ks.T))
        scores *= scale
        weights = masked_softmax(scores, mask, out=scores)
        out[:, h * dh : (h + 1) * dh] = matmul(weights, vs)
        if trace is not None:
            trace["attn_weights"].append(weights)
    return out


def _check_model_inputs(
    params: ContextModelParams, schedule: ScaleSchedule
) -> None:
    cfg = params.config
    if schedule[len(schedule)].bit_length != cfg.bit_length:
        raise ModelError(
            f"schedule bit length {schedule[len(schedule)].bit_length} does not "
            f"match model bit length {cfg.bit_length}"
        )
    if len(schedule) > cfg.max_scales:
        raise ModelError(
            f"schedule has {len(schedule)} scales, model supports {cfg.max_scales}"
        )


def _gather_inputs(
    intra: ScalePyramid, inter: ScalePyramid | None
) -> list[np.ndarray | None]:
    inputs: list[np.ndarray | None] = []
    for pyr in (intra, inter):
        if pyr is None:
            continue
        for k in range(1, len(pyr.schedule) + 1):
            inputs.append(prefix_scale_input(pyr, k))
    return inputs


def forward_full(
    params: ContextModelParams,
    intra: ScalePyramid,
    inter: ScalePyramid | None,
    mask: np.ndarray,
) -> list[ProbTensor]:
    """Teacher-forced pass over the whole sequence; one ProbTensor per scale."""

    if intra.kind != "intra":
        raise ContractError("first pyramid must be the intra pyramid")
    if inter is not None:
        if inter.kind != "inter":
            raise ContractError("second pyramid must be the inter pyramid")
        if inter.schedule != intra.schedule:
            raise ContractError("intra and inter pyramids must share one schedule")
    _check_model_inputs(params, intra.schedule)
    layout = build_layout(
        intra.schedule, inter.maps[0].frames if inter is not None else 0
    )
    n = layout.n_tokens
    if mask.dtype != np.bool_ or mask.shape != (n, n):
        raise ShapeError(f"mask must be bool of shape {(n, n)}, got {mask.shape}")
    inputs = _gather_inputs(intra, inter)
    logits, _ = _forward_tokens(params, layout, inputs, mask, trace=None)
    return _split_probs(params.config, layout, logits)


def _forward_tokens(
    params: ContextModelParams,
    layout: SequenceLayout,
    inputs: list[np.ndarray | None],
    mask: np.ndarray,
    trace: dict | None,
) -> tuple[np.ndarray, dict | None]:
    cfg = params.config
    embeds = []
    if trace is not None:
        trace["flat_inputs"] = []
        trace["pos"] = []
    for block, scale_input in zip(layout.blocks, inputs):
        x_b, flat, pos = _embed_block(params, block, scale_input)
        embeds.append(x_b)
        if trace is not None:
            trace["flat_inputs"].append(flat)
            trace["pos"].append(pos)
    x = np.concatenate(embeds, axis=0) if embeds else np.zeros((0, cfg.d))
    if trace is not None:
        trace["blocks"] = []
    for b in range(cfg.n_blocks):
        p = f"blocks.{b}."
        btrace: dict | None = {} if trace is not None else None
        x_in1 = x
        h1 = layer_norm(x, params[p + "ln1_gamma"], params[p + "ln1_beta"])
        q = matmul(h1, params[p + "wq"])
        k = matmul(h1, params[p + "wk"])
        v = matmul(h1, params[p + "wv"])
        attn = _attend(q, k, v, mask, cfg.n_heads, btrace)
        x = x + matmul(attn, params[p + "wo"])
        x_in2 = x
        h2 = layer_norm(x, params[p + "ln2_gamma"], params[p + "ln2_beta"])
        a1 = matmul(h2, params[p + "w1"]) + params[p + "b1"]
        g = gelu(a1)
        x = x + matmul(g, params[p + "w2"]) + params[p + "b2"]
        if btrace is not None:
            btrace.update(
                x_in1=x_in1, h1=h1, q=q, k=k, v=v, attn=attn,
                x_in2=x_in2, h2=h2, a1=a1, g=g,
            )
            trace["blocks"].append(btrace)
    hf = layer_norm(x, params["lnf_gamma"], params["lnf_beta"])
    logits = matmul(hf, params["w_head"]) + params["b_head"]
    if trace is not None:
        trace["x_final"] = x
        trace["hf"] = hf
        trace["logits"] = logits
    return logits, trace


def _split_probs(
    cfg: ModelConfig, layout: SequenceLayout, logits: np.ndarray
) -> list[ProbTensor]:
    probs = np.clip(sigmoid(logits), PROB_EPS, 1.0 - PROB_EPS)
    out = []
    for block in layout.blocks:
        chunk = probs[block.offset : block.offset + block.token_count]
        out.append(
            ProbTensor(
                kind=block.kind,
                scale_index=block.scale_index,
                frames=block.frames,
                height=block.height,
                width=block.width,
                bit_length=cfg.bit_length,
                probs=chunk.reshape(-1),
            )
        )
    return out


# ---------------------------------------------------------------------------
# incremental (coding) path
# ---------------------------------------------------------------------------


class DecodeState:
    """Single-owner cache of per-layer keys/values for processed scales.

    Scales must be submitted in layout order (intra 1..K, then inter 1..K);
    anything else is a protocol error.  The same state type drives both the
    encoder and the decoder so coding probabilities are computed by one code
    path on both ends.
    """

    def __init__(
        self,
        params: ContextModelParams,
        schedule: ScaleSchedule,
        inter_frames: int,
    ) -> None:
        _check_model_inputs(params, schedule)
        self.params = params
        self.layout = build_layout(schedule, inter_frames)
        self._allowed = _allowed_blocks(params.config, self.layout)
        self._cursor = 0
        nb = params.config.n_blocks
        self._keys: list[list[np.ndarray]] = [[] for _ in range(nb)]
        self._values: list[list[np.ndarray]] = [[] for _ in range(nb)]

    @property
    def expected(self) -> tuple[str, int] | None:
        """(kind, scale_index) of the next block, or None when finished."""

        if self._cursor >= len(self.layout.blocks):
            return None
        blk = self.layout.blocks[self._cursor]
        return blk.kind, blk.scale_index

    def _advance(self, keys: list[np.ndarray], values: list[np.ndarray]) -> None:
        for b, (k, v) in enumerate(zip(keys, values)):
            self._keys[b].append(k)
            self._values[b].append(v)
        self._cursor += 1


def forward_incremental(
    state: DecodeState,
    kind: str,
    scale_index: int,
    scale_input: np.ndarray | None,
) -> ProbTensor:
    """Probabilities for the next scale; caches its keys/values for later scales."""

    expected = state.expected
    if expected is None:
        raise ProtocolError("all scales were already processed")
    if (kind, scale_index) != expected:
        raise ProtocolError(
            f"got kind={kind!r} scale={scale_index}, "
            f"expected kind={expected[0]!r} scale={expected[1]}"
        )
    params = state.params
    cfg = params.config
    idx = state._cursor
    block = state.layout.blocks[idx]
    x, _, _ = _embed_block(params, block, scale_input)
    new_keys: list[np.ndarray] = []
    new_values: list[np.ndarray] = []
    for b in range(cfg.n_blocks):
        p = f"blocks.{b}."
        h1 = layer_norm(x, params[p + "ln1_gamma"], params[p + "ln1_beta"])
        q = matmul(h1, params[p + "wq"])
        k = matmul(h1, params[p + "wk"])
        v = matmul(h1, params[p + "wv"])
        prev = [j for j in range(idx) if state._allowed[idx, j]]
        keys = np.concatenate([state._keys[b][j] for j in prev] + [k], axis=0)
        values = np.concatenate([state._values[b][j] for j in prev] + [v], axis=0)
        # Everything gathered here is visible by construction, so skip the mask.
        attn = _attend(q, keys, values, None, cfg.n_heads)
        x = x + matmul(attn, params[p + "wo"])
        h2 = layer_norm(x, params[p + "ln2_gamma"], params[p + "ln2_beta"])
        x = x + matmul(gelu(matmul(h2, params[p + "w1"]) + params[p + "b1"]),
                       params[p + "w2"]) + params[p + "b2"]
        new_keys.append(k)
        new_values.append(v)
    hf = layer_norm(x, params["lnf_gamma"], params["lnf_beta"])
    logits = matmul(hf, params["w_head"]) + params["b_head"]
    state._advance(new_keys, new_values)
    probs = np.clip(sigmoid(logits), PROB_EPS, 1.0 - PROB_EPS)
    return ProbTensor(
        kind=block.kind,
        scale_index=block.scale_index,
        frames=block.frames,
        height=block.height,
        width=block.width,
        bit_length=cfg.bit_length,
        probs=probs.reshape(-1),
    )


# ---------------------------------------------------------------------------
# training: loss and reverse-mode gradients
# ---------------------------------------------------------------------------


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    from scipy.special import erf

    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def _layer_norm_backward(
    dy: np.ndarray, x: np.ndarray, gamma: np.ndarray, eps: float = 1e-5
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    dx = inv * (
        dxhat
        - dxhat.mean(axis=1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
    )
    return dx, dgamma, dbeta


def _softmax_backward(dweights: np.ndarray, weights: np.ndarray) -> np.ndarray:
    inner = (dweights * weights).sum(axis=1, keepdims=True)
    return weights * (dweights - inner)


def _targets(intra: ScalePyramid, inter: ScalePyramid | None) -> np.ndarray:
    maps = list(intra.maps) + (list(inter.maps) if inter is not None else [])
    flats = [m.bits.reshape(m.frames * m.spec.height * m.spec.width, m.spec.bit_length)
             for m in maps]
    return np.concatenate(flats, axis=0).astype(np.float64)


def loss_and_grads(
    params: ContextModelParams,
    batch: list[tuple[ScalePyramid, ScalePyramid | None]],
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean per-bit binary cross-entropy (nats) and its full gradient."""

    if not batch:
        raise ContractError("training batch is empty")
    cfg = params.config
    schedule = batch[0][0].schedule
    for intra, inter in batch:
        if intra.kind != "intra" or (inter is not None and inter.kind != "inter"):
            raise ContractError("batch entries must be (intra, inter) pairs")
        if intra.schedule != schedule or (
            inter is not None and inter.schedule != schedule
        ):
            raise ContractError("all batch entries must share one schedule")
    _check_model_inputs(params, schedule)

    grads = {name: np.zeros(shape) for name, shape in param_layout(cfg)}
    total_bits = 0
    for intra, inter in batch:
        layout = build_layout(
            schedule, inter.maps[0].frames if inter is not None else 0
        )
        total_bits += layout.n_tokens * cfg.bit_length
    loss_sum = 0.0

    for intra, inter in batch:
        layout = build_layout(
            schedule, inter.maps[0].frames if inter is not None else 0
        )
        mask = build_mask(cfg, layout)
        inputs = _gather_inputs(intra, inter)
        trace: dict = {}
        logits, _ = _forward_tokens(params, layout, inputs, mask, trace)
        targets = _targets(intra, inter)
        # softplus(z) - b*z summed over every bit, in nats
        loss_sum += float(np.sum(np.logaddexp(0.0, logits) - targets * logits))
        dlogits = (sigmoid(logits) - targets) / total_bits

        # head
        grads["w_head"] += matmul(np.ascontiguousarray(trace["hf"].T), dlogits)
        grads["b_head"] += dlogits.sum(axis=0)
        dhf = matmul(dlogits, np.ascontiguousarray(params["w_head"].T))
        dx, dg, db = _layer_norm_backward(dhf, trace["x_final"], params["lnf_gamma"])
        grads["lnf_gamma"] += dg
        grads["lnf_beta"] += db

        for b in reversed(range(cfg.n_blocks)):
            p = f"blocks.{b}."
            bt = trace["blocks"][b]
            # MLP sub-layer (residual)
            dm = dx
            grads[p + "w2"] += matmul(np.ascontiguousarray(bt["g"].T), dm)
            grads[p + "b2"] += dm.sum(axis=0)
            dgelu = matmul(dm, np.ascontiguousarray(params[p + "w2"].T))
            da1 = dgelu * _gelu_grad(bt["a1"])
            grads[p + "w1"] += matmul(np.ascontiguousarray(bt["h2"].T), da1)
            grads[p + "b1"] += da1.sum(axis=0)
            dh2 = matmul(da1, np.ascontiguousarray(params[p + "w1"].T))
            dres, dg, db = _layer_norm_backward(
                dh2, bt["x_in2"], params[p + "ln2_gamma"]
            )
            grads[p + "ln2_gamma"] += dg
            grads[p + "ln2_beta"] += db
            dx = dx + dres

            # attention sub-layer (residual)
            dattn = matmul(dx, np.ascontiguousarray(params[p + "wo"].T))
            grads[p + "wo"] += matmul(np.ascontiguousarray(bt["attn"].T), dx)
            n_heads = cfg.n_heads
            dh = cfg.head_dim
            scale = 1.0 / math.sqrt(dh)
            dq = np.zeros_like(bt["q"])
            dk = np.zeros_like(bt["k"])
            dv = np.zeros_like(bt["v"])
            for h in range(n_heads):
                sl = slice(h * dh, (h + 1) * dh)
                qs = np.ascontiguousarray(bt["q"][:, sl])
                ks = np.ascontiguousarray(bt["k"][:, sl])
                vs = np.ascontiguousarray(bt["v"][:, sl])
                weights = bt["attn_weights"][h]
                dout = np.ascontiguousarray(dattn[:, sl])
                dweights = matmul(dout, np.ascontiguousarray(vs.T))
                dv[:, sl] = matmul(np.ascontiguousarray(weights.T), dout)
                dscores = _softmax_backward(dweights, weights) * scale
                dq[:, sl] = matmul(dscores, ks)
                dk[:, sl] = matmul(np.ascontiguousarray(dscores.T), qs)
            grads[p + "wq"] += matmul(np.ascontiguousarray(bt["h1"].T), dq)
            grads[p + "wk"] += matmul(np.ascontiguousarray(bt["h1"].T), dk)
            grads[p + "wv"] += matmul(np.ascontiguousarray(bt["h1"].T), dv)
            dh1 = (
                matmul(dq, np.ascontiguousarray(params[p + "wq"].T))
                + matmul(dk, np.ascontiguousarray(params[p + "wk"].T))
                + matmul(dv, np.ascontiguousarray(params[p + "wv"].T))
            )
            dres, dg, db = _layer_norm_backward(
                dh1, bt["x_in1"], params[p + "ln1_gamma"]
            )
            grads[p + "ln1_gamma"] += dg
            grads[p + "ln1_beta"] += db
            dx = dx + dres

        # embeddings
        for block, flat, pos in zip(
            layout.blocks, trace["flat_inputs"], trace["pos"]
        ):
            dxb = dx[block.offset : block.offset + block.token_count]
            if block.scale_index == 1:
                grads["start"] += dxb.sum(axis=0)
            else:
                grads["w_in"] += matmul(np.ascontiguousarray(flat.T), dxb)
            row = (
                0 if block.kind == "intra" else cfg.max_scales
            ) + block.scale_index - 1
            grads["kind_scale_embed"][row] += dxb.sum(axis=0)
            grads["w_pos"] += matmul(np.ascontiguousarray(pos.T), dxb)

    return loss_sum / total_bits, grads


def train_step(
    params: ContextModelParams,
    batch: list[tuple[ScalePyramid, ScalePyramid | None]],
    lr: float,
    momentum: float = 0.0,
    velocity: dict[str, np.ndarray] | None = None,
) -> tuple[float, ContextModelParams, dict[str, np.ndarray]]:
    """One gradient-descent (optionally momentum) update; returns new params."""

    loss, grads = loss_and_grads(params, batch)
    if not math.isfinite(loss):
        raise TrainError(f"training loss is non-finite: {loss!r}")
    if velocity is None:
        velocity = {name: np.zeros(shape) for name, shape in param_layout(params.config)}
    new_weights: dict[str, np.ndarray] = {}
    new_velocity: dict[str, np.ndarray] = {}
    for name, _ in param_layout(params.config):
        v = momentum * velocity[name] - lr * grads[name]
        new_velocity[name] = v
        new_weights[name] = params[name] + v
    return loss, ContextModelParams(params.config, new_weights), new_velocity


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------


def model_to_bytes(params: ContextModelParams) -> bytes:
    cfg = params.config
    head = _MODEL_HEADER.pack(
        MODEL_MAGIC,
        MODEL_VERSION,
        cfg.d,
        cfg.n_blocks,
        cfg.n_heads,
        MASK_VARIANTS.index(cfg.variant),
        INTRA_REFERENCE_POLICIES.index(cfg.intra_reference),
        cfg.max_scales,
        cfg.bit_length,
        cfg.seed,
    )
    body = b"".join(
        params[name].astype("<f8").tobytes() for name, _ in param_layout(cfg)
    )
    return head + body + struct.pack("<Q", params.weight_hash)


def model_from_bytes(blob: bytes) -> ContextModelParams:
    if len(blob) < _MODEL_HEADER.size:
        raise ParseError("model blob shorter than its header")
    (
        magic, version, d, n_blocks, n_heads,
        variant_code, policy_code, max_scales, bit_length, seed,
    ) = _MODEL_HEADER.unpack_from(blob, 0)
    if magic != MODEL_MAGIC:
        raise ParseError(f"bad model magic {magic!r}")
    if version != MODEL_VERSION:
        raise ParseError(f"unsupported model version {version}")
    if variant_code >= len(MASK_VARIANTS):
        raise ParseError(f"unknown mask variant code {variant_code}")
    if policy_code >= len(INTRA_REFERENCE_POLICIES):
        raise ParseError(f"unknown intra-reference policy code {policy_code}")
    cfg = ModelConfig(
        d=d,
        n_blocks=n_blocks,
        n_heads=n_heads,
        variant=MASK_VARIANTS[variant_code],
        intra_reference=INTRA_REFERENCE_POLICIES[policy_code],
        max_scales=max_scales,
        bit_length=bit_length,
        seed=seed,
    )
    layout = param_layout(cfg)
    n_weights = sum(int(np.prod(shape)) for _, shape in layout)
    expected = _MODEL_HEADER.size + 8 * n_weights + 8
    if len(blob) != expected:
        raise ParseError(
            f"model blob is {len(blob)} bytes, expected {expected}"
        )
    pos = _MODEL_HEADER.size
    weights: dict[str, np.ndarray] = {}
    for name, shape in layout:
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos)
        weights[name] = arr.astype(np.float64).reshape(shape)
        pos += 8 * count
    (stored_hash,) = struct.unpack_from("<Q", blob, pos)
    params = ContextModelParams(cfg, weights)
    if params.weight_hash != stored_hash:
        raise ModelError(
            f"model weight hash mismatch: stored {stored_hash:#018x}, "
            f"recomputed {params.weight_hash:#018x}"
        )
    return params


def save_model(params: ContextModelParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(params))


def load_model(path) -> ContextModelParams:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
